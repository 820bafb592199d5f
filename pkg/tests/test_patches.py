"""Tile split and reassembly must be exact inverses, bit for bit."""

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rethseg.patches import PatchSequence, image2patches, patches2image
from rethseg.tensor import Tape, Tensor, mul_const, sum_all


@given(n=st.integers(1, 4), hp=st.integers(1, 5), wp=st.integers(1, 5),
       d=st.integers(1, 3), seed=st.integers(0, 2**32 - 1))
def test_round_trip_is_bit_exact(n, hp, wp, d, seed):
    rng = np.random.default_rng(seed)
    u = Tensor(rng.standard_normal((n * hp, n * wp, d)))
    back = patches2image(image2patches(u, n))
    assert back.data.dtype == u.data.dtype
    assert np.array_equal(back.data, u.data)


def test_patches_come_out_in_raster_order():
    h, w, d, n = 6, 8, 2, 2
    u = np.arange(h * w * d, dtype=np.float64).reshape(h, w, d)
    seq = image2patches(Tensor(u), n)
    assert seq.patches.shape == (n * n, h // n, w // n, d)
    assert (seq.patch_h, seq.patch_w) == (h // n, w // n)
    got = seq.patches.data
    for t in range(n * n):
        for i in range(h // n):
            for j in range(w // n):
                for c in range(d):
                    src = u[(t // n) * (h // n) + i, (t % n) * (w // n) + j, c]
                    assert got[t, i, j, c] == np.float32(src)


def test_split_rejects_bad_shapes():
    with pytest.raises(ValueError, match="does not divide"):
        image2patches(Tensor(np.zeros((6, 6, 1))), 4)
    with pytest.raises(ValueError, match="does not divide"):
        image2patches(Tensor(np.zeros((8, 6, 1))), 4)
    with pytest.raises(ValueError, match=">= 1"):
        image2patches(Tensor(np.zeros((6, 6, 1))), 0)
    with pytest.raises(ValueError, match="input must be"):
        image2patches(Tensor(np.zeros((6, 6))), 2)


def test_reassembly_rejects_inconsistent_geometry():
    patches = Tensor(np.zeros((4, 3, 3, 1)))
    with pytest.raises(ValueError, match="expected 9 patches"):
        patches2image(PatchSequence(patches, 3, 9, 9))
    with pytest.raises(ValueError, match="does not rebuild"):
        patches2image(PatchSequence(patches, 2, 8, 6))
    with pytest.raises(ValueError, match="patches must be"):
        patches2image(PatchSequence(Tensor(np.zeros((4, 3, 3))), 2, 6, 6))


def test_round_trip_gradient_is_the_identity():
    # both adjoints are pure permutations, so the chained backward pass must
    # hand the upstream weights back unchanged
    rng = np.random.default_rng(7)
    u = Tensor(rng.standard_normal((6, 6, 2)), requires_grad=True)
    w = rng.standard_normal((6, 6, 2))
    with Tape() as tape:
        y = patches2image(image2patches(u, 3))
        tape.backward(sum_all(mul_const(y, w)))
    assert np.array_equal(u.grad, w.astype(u.data.dtype))
