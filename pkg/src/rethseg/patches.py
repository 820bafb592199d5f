"""Raster-order patch decomposition of feature maps.

A map ``(H, W, D)`` is cut into an ``n x n`` grid of equal tiles and exposed
as a sequence of ``n**2`` patches ``(H/n, W/n, D)``, ordered row-major over
the grid.  Patch ``t`` therefore holds
``u[(t // n) * H' + i, (t % n) * W' + j, d]`` at ``[i, j, d]``.  Both
directions are pure index permutations, so a round trip is bit-exact and the
adjoint of each is the other's forward permutation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, _from_data, _record

__all__ = ["PatchSequence", "image2patches", "patches2image"]


@dataclass
class PatchSequence:
    """A stack of tiles plus the geometry needed to reassemble them."""

    patches: Tensor  # (n*n, H', W', D)
    n: int
    original_h: int
    original_w: int

    @property
    def patch_h(self) -> int:
        return self.original_h // self.n

    @property
    def patch_w(self) -> int:
        return self.original_w // self.n


def _check_divisible(h: int, w: int, n: int) -> None:
    if n < 1:
        raise ValueError(f"slicing count must be >= 1, got {n}")
    if h % n or w % n:
        raise ValueError(f"slicing count {n} does not divide feature extent {h}x{w}")


def image2patches(u: Tensor, n: int) -> PatchSequence:
    """Split ``(H, W, D)`` into ``n**2`` raster-ordered tiles."""
    if u.ndim != 3:
        raise ValueError(f"image2patches input must be (H, W, D), got shape {u.shape}")
    h, w, d = u.shape
    _check_divisible(h, w, n)
    hp, wp = h // n, w // n
    arr = u.data.reshape(n, hp, n, wp, d).transpose(0, 2, 1, 3, 4)
    out = _from_data(np.ascontiguousarray(arr.reshape(n * n, hp, wp, d)))

    def bwd(g):
        back = g.reshape(n, n, hp, wp, d).transpose(0, 2, 1, 3, 4)
        return (np.ascontiguousarray(back.reshape(h, w, d)),)

    _record((u,), out, bwd)
    return PatchSequence(out, n, h, w)


def patches2image(seq: PatchSequence) -> Tensor:
    """Reassemble a :class:`PatchSequence` into its original map."""
    p = seq.patches
    if p.ndim != 4:
        raise ValueError(f"patches must be (T, H', W', D), got shape {p.shape}")
    t, hp, wp, d = p.shape
    n = seq.n
    if t != n * n:
        raise ValueError(f"expected {n * n} patches for n={n}, got {t}")
    if hp * n != seq.original_h or wp * n != seq.original_w:
        raise ValueError(
            f"patch extent {hp}x{wp} with n={n} does not rebuild "
            f"{seq.original_h}x{seq.original_w}")
    arr = p.data.reshape(n, n, hp, wp, d).transpose(0, 2, 1, 3, 4)
    out = _from_data(np.ascontiguousarray(arr.reshape(seq.original_h, seq.original_w, d)))

    def bwd(g):
        back = g.reshape(n, hp, n, wp, d).transpose(0, 2, 1, 3, 4)
        return (np.ascontiguousarray(back.reshape(t, hp, wp, d)),)

    return _record((p,), out, bwd)
