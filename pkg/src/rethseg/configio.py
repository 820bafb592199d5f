"""Flat ``key = value`` configuration text, with dotted keys for lists.

One line per entry, ``#`` starts a comment, duplicate keys are an error.
List entries use dotted indices (``stages.0.stride = 2``), which keeps the
format greppable and lets a config file and repeated ``--set`` flags share
one grammar.  Model configs round-trip through :func:`rethnet_to_kv` /
:func:`rethnet_from_kv`.
"""

from __future__ import annotations

import re
from dataclasses import replace

from .errors import UsageError
from .network import RethNetConfig, StageConfig, default_config

__all__ = [
    "parse_kv_text",
    "parse_kv_pairs",
    "format_kv",
    "take_prefix",
    "kv_int",
    "kv_float",
    "kv_bool",
    "rethnet_to_kv",
    "rethnet_from_kv",
]

_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*(\.[A-Za-z0-9_]+)*$")


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{ln}: expected key = value, got {raw.strip()!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        if not _KEY_RE.match(key):
            raise UsageError(f"{source}:{ln}: malformed key {key!r}")
        if key in values:
            raise UsageError(f"{source}:{ln}: duplicate key {key!r}")
        values[key] = val
    return values


def parse_kv_pairs(pairs: list[str], source: str = "--set") -> dict[str, str]:
    """Parse repeated command-line ``key=value`` tokens."""
    values: dict[str, str] = {}
    for token in pairs:
        if "=" not in token:
            raise UsageError(f"{source}: expected key=value, got {token!r}")
        key, val = (part.strip() for part in token.split("=", 1))
        if not _KEY_RE.match(key):
            raise UsageError(f"{source}: malformed key {key!r}")
        if key in values:
            raise UsageError(f"{source}: duplicate key {key!r}")
        values[key] = val
    return values


def format_kv(values: dict[str, str]) -> str:
    return "".join(f"{k} = {values[k]}\n" for k in sorted(values))


def take_prefix(values: dict[str, str], prefix: str) -> dict[str, str]:
    """Remove and return entries under ``prefix.`` with the prefix stripped."""
    dotted = prefix + "."
    out = {}
    for key in list(values):
        if key.startswith(dotted):
            out[key[len(dotted):]] = values.pop(key)
    return out


def kv_int(values: dict[str, str], key: str, default: int) -> int:
    if key not in values:
        return default
    raw = values.pop(key)
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: expected an integer, got {raw!r}") from None


def kv_float(values: dict[str, str], key: str, default: float) -> float:
    if key not in values:
        return default
    raw = values.pop(key)
    try:
        return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: expected a number, got {raw!r}") from None


def kv_bool(values: dict[str, str], key: str, default: bool) -> bool:
    if key not in values:
        return default
    raw = values.pop(key).lower()
    if raw in ("true", "1", "yes"):
        return True
    if raw in ("false", "0", "no"):
        return False
    raise UsageError(f"config key {key!r}: expected true/false, got {raw!r}")


def reject_unknown(values: dict[str, str], source: str) -> None:
    if values:
        raise UsageError(f"{source}: unknown config keys {sorted(values)}")


# ---------------------------------------------------------------------------
# model config


def rethnet_to_kv(cfg: RethNetConfig) -> dict[str, str]:
    h, w, c = cfg.input_size
    out = {
        "input_size": f"{h}x{w}x{c}",
        "num_classes": str(cfg.num_classes),
        "decoder_low_level_stage": str(cfg.decoder_low_level_stage),
        "decoder_channels": str(cfg.decoder_channels),
        "se_ratio": str(cfg.se_ratio),
        "seed": str(cfg.seed),
    }
    for i, st in enumerate(cfg.stages):
        out[f"stages.{i}.out_channels"] = str(st.out_channels)
        out[f"stages.{i}.stride"] = str(st.stride)
        out[f"stages.{i}.variant"] = st.variant
        out[f"stages.{i}.n"] = str(st.n)
    return out


def _parse_input_size(raw: str) -> tuple[int, int, int]:
    parts = raw.lower().split("x")
    if len(parts) != 3:
        raise UsageError(f"input_size must look like 64x64x3, got {raw!r}")
    try:
        h, w, c = (int(p) for p in parts)
    except ValueError:
        raise UsageError(f"input_size must look like 64x64x3, got {raw!r}") from None
    return h, w, c


def rethnet_from_kv(values: dict[str, str], base: RethNetConfig | None = None,
                    exact: bool = False) -> RethNetConfig:
    """Build a model config from flat keys, starting from ``base`` defaults.

    ``values`` is consumed; leftover keys raise, so typos never pass silently.
    With ``exact`` the ``stages.*`` keys define the whole stage list instead
    of patching the base, which is what reading back a serialized config
    needs: a two-stage config must not inherit a third stage from defaults.
    """
    cfg = base if base is not None else default_config()
    kv = dict(values)
    values.clear()

    input_size = cfg.input_size
    if "input_size" in kv:
        input_size = _parse_input_size(kv.pop("input_size"))
    num_classes = kv_int(kv, "num_classes", cfg.num_classes)
    low_stage = kv_int(kv, "decoder_low_level_stage", cfg.decoder_low_level_stage)
    dec_channels = kv_int(kv, "decoder_channels", cfg.decoder_channels)
    se_ratio = kv_int(kv, "se_ratio", cfg.se_ratio)
    seed = kv_int(kv, "seed", cfg.seed)

    if not exact and "stages" in kv:
        # a plain count trims the inherited stage list, e.g. stages=2 keeps
        # the first two base stages for a shallower trunk
        keep = kv_int(kv, "stages", len(cfg.stages))
        if keep < 1:
            raise UsageError(f"config key 'stages': need at least 1, got {keep}")
        cfg = replace(cfg, stages=cfg.stages[:keep])

    stage_kv: dict[int, dict[str, str]] = {}
    for key in list(kv):
        parts = key.split(".")
        if len(parts) == 3 and parts[0] == "stages":
            if not parts[1].isdigit():
                raise UsageError(f"config key {key!r}: stage index must be a number")
            stage_kv.setdefault(int(parts[1]), {})[parts[2]] = kv.pop(key)

    if exact:
        n_stages = max(stage_kv, default=-1) + 1
        missing = [i for i in range(n_stages) if i not in stage_kv]
        if n_stages == 0 or missing:
            raise UsageError(f"stage list incomplete; missing indices {missing}")
    else:
        n_stages = max(len(cfg.stages), max(stage_kv, default=-1) + 1)
        if stage_kv and max(stage_kv) >= len(cfg.stages):
            missing = [i for i in range(n_stages)
                       if i >= len(cfg.stages) and i not in stage_kv]
            if missing:
                raise UsageError(f"stage indices are not contiguous; missing {missing}")
    stages = []
    for i in range(n_stages):
        if not exact and i < len(cfg.stages):
            st = cfg.stages[i]
            defaults = (st.out_channels, st.stride, st.variant, st.n)
        else:
            defaults = (None, 2, "none", 1)
        sv = stage_kv.get(i, {})
        if defaults[0] is None and "out_channels" not in sv:
            raise UsageError(f"new stage {i} needs stages.{i}.out_channels")
        out_channels = kv_int(sv, "out_channels", defaults[0])
        stride = kv_int(sv, "stride", defaults[1])
        variant = sv.pop("variant", defaults[2])
        n = kv_int(sv, "n", defaults[3])
        if sv:
            raise UsageError(f"stage {i}: unknown config keys {sorted(sv)}")
        stages.append(StageConfig(out_channels=out_channels, stride=stride,
                                  variant=variant, n=n))

    reject_unknown(kv, "model config")
    out = RethNetConfig(input_size=input_size, num_classes=num_classes,
                        stages=stages, decoder_low_level_stage=low_stage,
                        decoder_channels=dec_channels, se_ratio=se_ratio,
                        seed=seed)
    out.validate()
    return out
