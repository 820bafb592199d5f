"""Command line entry point.

Subcommands: ``gen`` writes a synthetic dataset, ``train`` fits a model and
renders a training report, ``eval`` scores a checkpoint on a split,
``infer`` segments one image, ``ablate`` runs the block-variant comparison.

All tunables travel through one grammar: ``--config FILE`` reads
``key = value`` lines and repeated ``--set key=value`` flags override them,
with ``train.`` / ``model.`` / ``data.`` prefixes and dotted list indices
(``model.stages.0.n = 4``).  The ``RETHSEG_PRECISION`` environment variable
selects ``f32`` (default) or ``f64`` arithmetic for the whole process.

Exit codes: 0 success, 1 usage problems, 2 bad data on disk, 3 numeric
failure during training.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from . import data as data_mod
from . import train as train_mod
from .checkpoint import load_checkpoint, restore_model
from .configio import parse_kv_pairs, parse_kv_text, rethnet_from_kv, take_prefix
from .errors import DataError, NumericError, UsageError
from .network import RethNetConfig, StageConfig, quarter_rule
from .report import ablation_report, eval_report, infer_report, training_report
from .tensor import set_precision

__all__ = ["main", "config_for_data"]


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on its own, which collides with the
    # data-error code; route its failures through UsageError instead.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _apply_precision_env() -> None:
    mode = os.environ.get("RETHSEG_PRECISION")
    if mode is not None:
        try:
            set_precision(mode)
        except ValueError as exc:
            raise UsageError(f"RETHSEG_PRECISION: {exc}") from None


def config_for_data(spec: data_mod.CoOccurrenceSpec,
                    variant: str = "rethinker_e") -> RethNetConfig:
    """Default model sized for a dataset: three stages, output stride 8."""
    size = spec.size
    return RethNetConfig(
        input_size=(size, size, 3),
        num_classes=spec.k,
        stages=[
            StageConfig(16, 2, variant, quarter_rule(size // 2)),
            StageConfig(32, 2, variant, quarter_rule(size // 4)),
            StageConfig(64, 2, variant, quarter_rule(size // 8)),
        ],
    )


def _gather_kv(args) -> dict[str, str]:
    kv: dict[str, str] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"{path}: config file not found")
        kv.update(parse_kv_text(path.read_text(), source=str(path)))
    kv.update(parse_kv_pairs(getattr(args, "set", []) or []))
    return kv


def _reject_leftover(kv: dict[str, str]) -> None:
    if kv:
        raise UsageError(
            f"unknown config keys {sorted(kv)}; expected train.*, model.* "
            f"or data.* prefixes")


def _load_configs(args, dataspec):
    kv = _gather_kv(args)
    train_kv = take_prefix(kv, "train")
    model_kv = take_prefix(kv, "model")
    _reject_leftover(kv)
    train_cfg = train_mod.train_config_from_kv(train_kv)
    base = config_for_data(dataspec, variant=args.variant)
    model_cfg = rethnet_from_kv(model_kv, base=base)
    return train_cfg, model_cfg


# ---------------------------------------------------------------------------
# subcommands


def _cmd_gen(args) -> int:
    kv = _gather_kv(args)
    data_kv = take_prefix(kv, "data")
    _reject_leftover(kv)
    spec = data_mod.spec_from_kv(data_kv)
    counts = {"train": args.train, "val": args.val, "test": args.test}
    data_mod.write_dataset(args.root, spec, counts)
    total = sum(counts.values())
    print(f"wrote {total} samples under {args.root} "
          f"(train={args.train} val={args.val} test={args.test})")
    print(f"classes={spec.k} size={spec.size} "
          f"pairs={','.join(f'{a}-{b}' for a, b in spec.texture_pairs)}")
    return 0


def _cmd_train(args) -> int:
    dataspec = data_mod.load_spec(args.root)
    train_cfg, model_cfg = _load_configs(args, dataspec)
    train_samples = data_mod.load_split(args.root, "train")
    val_samples = data_mod.load_split(args.root, "val")
    result = train_mod.fit(train_samples, val_samples, train_cfg,
                           model_cfg=model_cfg, out_dir=args.out,
                           resume=args.resume, log=print)
    written = training_report(args.out, result)
    print(f"best val_miou={result.best_score:.4f} at epoch {result.best_epoch}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_eval(args) -> int:
    model = restore_model(load_checkpoint(args.ckpt))
    samples = data_mod.load_split(args.root, args.split)
    ev = train_mod.evaluate(model, samples)
    written = eval_report(args.out, ev)
    print(f"split={args.split} samples={len(samples)} "
          f"miou={ev.miou:.4f} pixel_acc={ev.pixel_acc:.4f}")
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_infer(args) -> int:
    model = restore_model(load_checkpoint(args.ckpt))
    image = data_mod.read_ppm(args.image)
    truth = data_mod.read_pgm(args.mask) if args.mask else None
    pred = train_mod.predict(model, image)
    written = infer_report(args.out, image, pred, truth,
                           num_classes=model.config.num_classes,
                           stem=Path(args.image).stem)
    for path in written:
        print(f"wrote {path}")
    return 0


def _cmd_ablate(args) -> int:
    dataspec = data_mod.load_spec(args.root)
    train_cfg, model_cfg = _load_configs(args, dataspec)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds must be comma-separated integers, "
                         f"got {args.seeds!r}") from None
    train_samples = data_mod.load_split(args.root, "train")
    val_samples = data_mod.load_split(args.root, "val")
    test_samples = data_mod.load_split(args.root, "test")
    res = train_mod.ablate(train_samples, val_samples, test_samples, dataspec,
                           model_cfg, train_cfg, variants, seeds, log=print)
    written = ablation_report(args.out, res)
    for v in res.variants():
        mean, sd = res.stats(v)
        print(f"variant={v} mean_miou={mean:.4f} sd={sd:.4f}")
    print(f"oracle_paired_miou={res.oracle_paired_miou:.4f}")
    for path in written:
        print(f"wrote {path}")
    return 0


# ---------------------------------------------------------------------------
# parser


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config entry; repeatable")
    p.add_argument("--variant", default="rethinker_e",
                   help="block variant for every gridded stage "
                        "(default: %(default)s)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rethseg",
                     description="Segmentation with raster-scan rethinker blocks "
                                 "on a synthetic co-occurrence benchmark.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[], help="generate a dataset")
    p.add_argument("--root", required=True, help="dataset directory to create")
    p.add_argument("--train", type=int, default=64)
    p.add_argument("--val", type=int, default=16)
    p.add_argument("--test", type=int, default=16)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="data.* spec overrides, e.g. data.seed=7")
    p.set_defaults(func=_cmd_gen)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--root", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="run directory for checkpoints "
                                                "and reports")
    p.add_argument("--resume", action="store_true",
                   help="continue from OUT/last.ckpt")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a split")
    p.add_argument("--root", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=data_mod.SPLITS)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("infer", help="segment one PPM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--mask", help="optional truth mask for the overlay figure")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_infer)

    p = sub.add_parser("ablate", help="compare block variants over seeds")
    p.add_argument("--root", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default="baseline_c,rethinker_d,rethinker_e")
    p.add_argument("--seeds", default="0,1,2")
    _add_config_flags(p)
    p.set_defaults(func=_cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        _apply_precision_env()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
