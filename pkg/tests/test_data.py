"""Benchmark scenes, augmentation, and the dataset file format."""

import numpy as np
import pytest

from rethseg.data import (
    IGNORE_INDEX,
    CoOccurrenceSpec,
    SegSample,
    augment,
    class_template,
    generate_sample,
    load_spec,
    load_split,
    paired_classes,
    read_pgm,
    read_ppm,
    sample_paths,
    spec_from_kv,
    spec_from_text,
    spec_to_text,
    window_oracle,
    write_dataset,
    write_pgm,
    write_ppm,
)
from rethseg.errors import DataError, UsageError


class ScriptRng:
    """Hands out pre-chosen draws so augmentation becomes deterministic."""

    def __init__(self, uniforms=(), randoms=(), integers=()):
        self.uniforms = list(uniforms)
        self.randoms = list(randoms)
        self.ints = list(integers)

    def uniform(self, lo, hi):
        return self.uniforms.pop(0)

    def random(self):
        return self.randoms.pop(0)

    def integers(self, lo, hi):
        return self.ints.pop(0)


# ---------------------------------------------------------------------------
# spec


def test_default_spec_classes():
    spec = CoOccurrenceSpec()
    spec.validate()
    assert spec.anchor_classes() == [5]
    assert paired_classes(spec) == [1, 2, 3, 4]


@pytest.mark.parametrize("mutate,msg", [
    (lambda s: setattr(s, "k", 3), "class count"),
    (lambda s: setattr(s, "grid", 0), "blob density"),
    (lambda s: setattr(s, "noise_sigma", -0.1), "noise sigma"),
    (lambda s: setattr(s, "size", 16), "scene size"),
    (lambda s: setattr(s, "texture_pairs", [(0, 1)]), "outside"),
    (lambda s: setattr(s, "texture_pairs", [(1, 2), (2, 3)]), "more than one pair"),
    (lambda s: setattr(s, "texture_pairs", [(1, 1)]), "more than one pair"),
    (lambda s: (setattr(s, "k", 5), setattr(s, "texture_pairs", [(1, 2), (3, 4)])),
     "anchor"),
])
def test_spec_validation(mutate, msg):
    spec = CoOccurrenceSpec()
    mutate(spec)
    with pytest.raises(UsageError, match=msg):
        spec.validate()


# ---------------------------------------------------------------------------
# scene generation


def test_generation_is_deterministic_per_seed_and_index():
    spec = CoOccurrenceSpec()
    a = generate_sample(spec, 5)
    b = generate_sample(spec, 5)
    assert np.array_equal(a.image, b.image)
    assert np.array_equal(a.mask, b.mask)
    c = generate_sample(spec, 6)
    assert not np.array_equal(a.mask, c.mask)
    d = generate_sample(CoOccurrenceSpec(seed=1), 5)
    assert not np.array_equal(a.image, d.image)


def test_scene_structure():
    spec = CoOccurrenceSpec()
    s = generate_sample(spec, 0)
    assert s.image.shape == (64, 64, 3) and s.image.dtype == np.float32
    assert s.mask.shape == (64, 64) and s.mask.dtype == np.uint8
    assert s.image.min() >= 0.0 and s.image.max() <= 1.0
    assert s.mask.max() < spec.k  # generation itself never emits ignore
    assert (s.mask == 5).sum() > 0  # both anchors are always placed
    with pytest.raises(UsageError, match="index"):
        generate_sample(spec, -1)


def test_every_class_appears_across_a_handful_of_scenes():
    spec = CoOccurrenceSpec()
    seen = np.zeros(spec.k, dtype=np.int64)
    for idx in range(12):
        seen += np.bincount(generate_sample(spec, idx).mask.reshape(-1),
                            minlength=spec.k)
    assert np.all(seen > 0)


def test_paired_textures_are_pixel_identical():
    spec = CoOccurrenceSpec()
    t1 = class_template(1, spec, 64, 64)
    t2 = class_template(2, spec, 64, 64)
    t3 = class_template(3, spec, 64, 64)
    t4 = class_template(4, spec, 64, 64)
    assert np.array_equal(t1, t2)
    assert np.array_equal(t3, t4)
    assert not np.array_equal(t1, t3)
    assert not np.array_equal(class_template(5, spec, 64, 64), t1)


def test_noise_free_pixels_match_the_class_templates():
    spec = CoOccurrenceSpec(noise_sigma=0.0)
    s = generate_sample(spec, 3)
    for cid in np.unique(s.mask):
        tmpl = class_template(int(cid), spec, 64, 64).astype(np.float32)
        sel = s.mask == cid
        assert np.array_equal(s.image[sel], tmpl[sel]), f"class {cid}"


def test_scaled_scenes_keep_the_same_structure():
    spec = CoOccurrenceSpec(size=96)
    s = generate_sample(spec, 0)
    assert s.image.shape == (96, 96, 3)
    assert (s.mask == 5).sum() > 0


# ---------------------------------------------------------------------------
# the local-window reference classifier


def test_window_oracle_never_predicts_the_second_of_a_pair():
    spec = CoOccurrenceSpec()
    for idx in range(4):
        s = generate_sample(spec, idx)
        pred = window_oracle(s.image, spec)
        assert pred.shape == s.mask.shape and pred.dtype == np.uint8
        assert not np.isin(pred, [2, 4]).any()


def test_window_oracle_is_accurate_where_appearance_suffices():
    spec = CoOccurrenceSpec()
    s = generate_sample(spec, 0)
    pred = window_oracle(s.image, spec)
    assert (pred == s.mask).mean() >= 0.85


def test_window_oracle_rejects_bad_windows():
    spec = CoOccurrenceSpec()
    img = np.zeros((8, 8, 3))
    with pytest.raises(UsageError, match="odd"):
        window_oracle(img, spec, window=4)
    with pytest.raises(UsageError, match="odd"):
        window_oracle(img, spec, window=0)


# ---------------------------------------------------------------------------
# augmentation


def _flat_sample(h=10, w=12):
    rng = np.random.default_rng(71)
    image = rng.uniform(0, 1, (h, w, 3)).astype(np.float32)
    mask = rng.integers(0, 6, (h, w)).astype(np.uint8)
    return SegSample(image=image, mask=mask)


def test_identity_draws_reproduce_the_sample_exactly():
    s = _flat_sample()
    rng = ScriptRng(uniforms=[0.0, 1.0], randoms=[0.9], integers=[0, 0])
    out = augment(s, rng, (10, 12))
    assert np.array_equal(out.image, s.image)
    assert np.array_equal(out.mask, s.mask)


def test_flip_draw_mirrors_horizontally():
    s = _flat_sample()
    rng = ScriptRng(uniforms=[0.0, 1.0], randoms=[0.1], integers=[0, 0])
    out = augment(s, rng, (10, 12))
    assert np.array_equal(out.image, s.image[:, ::-1])
    assert np.array_equal(out.mask, s.mask[:, ::-1])


def test_crop_draw_selects_the_subregion():
    s = _flat_sample()
    rng = ScriptRng(uniforms=[0.0, 1.0], randoms=[0.9], integers=[2, 3])
    out = augment(s, rng, (4, 5))
    assert np.array_equal(out.image, s.image[2:6, 3:8])
    assert np.array_equal(out.mask, s.mask[2:6, 3:8])


def test_rotation_moves_content_the_right_way():
    import math

    h = w = 33
    image = np.zeros((h, w, 3), dtype=np.float32)
    mask = np.zeros((h, w), dtype=np.uint8)
    py, px = 6, 26  # bright dot away from the centre
    image[py, px] = 1.0
    mask[py, px] = 3
    deg = 15.0
    rng = ScriptRng(uniforms=[deg, 1.0], randoms=[0.9], integers=[0, 0])
    out = augment(SegSample(image, mask), rng, (h, w))
    # forward map is the inverse of the sampling map: rotate by -theta
    t = math.radians(-deg)
    cy = cx = (h - 1) / 2.0
    ey = cy + math.cos(t) * (py - cy) - math.sin(t) * (px - cx)
    ex = cx + math.sin(t) * (py - cy) + math.cos(t) * (px - cx)
    got = np.unravel_index(out.image[:, :, 0].argmax(), (h, w))
    assert abs(got[0] - ey) <= 1.0 and abs(got[1] - ex) <= 1.0
    my, mx = np.argwhere(out.mask == 3)[0]
    assert abs(my - ey) <= 1.0 and abs(mx - ex) <= 1.0


def test_zooming_out_marks_borders_as_ignore():
    s = _flat_sample(12, 12)
    rng = ScriptRng(uniforms=[0.0, 0.8], randoms=[0.9], integers=[0, 0])
    out = augment(s, rng, (12, 12))
    assert out.mask[0, 0] == IGNORE_INDEX
    assert np.all(out.image[0, 0] == 0.0)
    assert out.mask[6, 6] != IGNORE_INDEX
    # zooming in keeps every sampling point inside the frame
    rng = ScriptRng(uniforms=[0.0, 1.2], randoms=[0.9], integers=[0, 0])
    assert IGNORE_INDEX not in augment(s, rng, (12, 12)).mask


def test_oversized_crop_is_rejected():
    s = _flat_sample(8, 8)
    with pytest.raises(UsageError, match="crop"):
        augment(s, ScriptRng(), (9, 8))


def test_augment_with_a_real_generator_stays_well_formed():
    spec = CoOccurrenceSpec()
    s = generate_sample(spec, 1)
    rng = np.random.default_rng(9)
    out = augment(s, rng, (48, 48))
    assert out.image.shape == (48, 48, 3) and out.image.dtype == np.float32
    assert out.mask.shape == (48, 48) and out.mask.dtype == np.uint8
    classes = set(np.unique(out.mask)) - {IGNORE_INDEX}
    assert classes <= set(range(spec.k))


# ---------------------------------------------------------------------------
# image files


def test_ppm_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(72)
    image = (rng.integers(0, 256, (7, 9, 3)) / 255.0).astype(np.float32)
    path = tmp_path / "img.ppm"
    write_ppm(path, image)
    assert np.array_equal(read_ppm(path), image)


def test_pgm_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(73)
    mask = rng.integers(0, 256, (5, 4)).astype(np.uint8)
    mask[0, 0] = 255
    path = tmp_path / "msk.pgm"
    write_pgm(path, mask)
    assert np.array_equal(read_pgm(path), mask)


def test_netpbm_rejects_malformed_files(tmp_path):
    good = tmp_path / "good.ppm"
    write_ppm(good, np.zeros((2, 2, 3), dtype=np.float32))

    bad_magic = tmp_path / "magic.ppm"
    bad_magic.write_bytes(b"P3\n2 2\n255\n" + bytes(12))
    with pytest.raises(DataError, match="P6 magic"):
        read_ppm(bad_magic)

    bad_maxval = tmp_path / "maxval.ppm"
    bad_maxval.write_bytes(b"P6\n2 2\n128\n" + bytes(12))
    with pytest.raises(DataError, match="maxval 255"):
        read_ppm(bad_maxval)

    truncated = tmp_path / "short.ppm"
    truncated.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(DataError, match="truncated at byte"):
        read_ppm(truncated)

    header_only = tmp_path / "header.ppm"
    header_only.write_bytes(b"P6\n2")
    with pytest.raises(DataError, match="ended early"):
        read_ppm(header_only)

    not_a_number = tmp_path / "nan.ppm"
    not_a_number.write_bytes(b"P6\nx 2\n255\n" + bytes(12))
    with pytest.raises(DataError, match="bad header number"):
        read_ppm(not_a_number)

    with pytest.raises(UsageError, match="must be"):
        write_ppm(tmp_path / "x.ppm", np.zeros((2, 2)))
    with pytest.raises(UsageError, match="must be"):
        write_pgm(tmp_path / "x.pgm", np.zeros((2, 2, 3)))


# ---------------------------------------------------------------------------
# spec files and dataset directories


def test_spec_text_round_trip():
    spec = CoOccurrenceSpec(k=7, grid=2, texture_pairs=[(2, 5), (1, 4)],
                            noise_sigma=0.035, seed=11, size=96)
    again = spec_from_text(spec_to_text(spec))
    assert again == spec


def test_spec_text_rejects_bad_content():
    with pytest.raises(DataError, match="unknown keys"):
        spec_from_text("k = 6\nflavor = vanilla\n")
    with pytest.raises(DataError, match="invalid literal"):
        spec_from_text("k = six\n")
    with pytest.raises(DataError, match=":2: expected key = value"):
        spec_from_text("k = 6\nnot a key value line\n")
    with pytest.raises(UsageError, match="unknown keys"):
        spec_from_kv({"flavor": "vanilla"})


def test_dataset_round_trip(tmp_path):
    spec = CoOccurrenceSpec(size=64)
    root = tmp_path / "data"
    write_dataset(root, spec, {"train": 2, "val": 1, "test": 1})
    assert load_spec(root) == spec
    train = load_split(root, "train")
    val = load_split(root, "val")
    test = load_split(root, "test")
    assert len(train) == 2 and len(val) == 1 and len(test) == 1
    # splits continue one global scene sequence, so no scene repeats
    assert np.array_equal(train[0].mask, generate_sample(spec, 0).mask)
    assert np.array_equal(train[1].mask, generate_sample(spec, 1).mask)
    assert np.array_equal(val[0].mask, generate_sample(spec, 2).mask)
    assert np.array_equal(test[0].mask, generate_sample(spec, 3).mask)
    img_path, msk_path = sample_paths(root, "train", 7)
    assert img_path.name == "img_00007.ppm" and msk_path.name == "msk_00007.pgm"


def test_dataset_loading_errors(tmp_path):
    spec = CoOccurrenceSpec()
    with pytest.raises(UsageError, match="unknown split"):
        write_dataset(tmp_path / "x", spec, {"training": 1})
    root = tmp_path / "data"
    write_dataset(root, spec, {"train": 1})
    with pytest.raises(DataError, match="split directory not found"):
        load_split(root, "val")
    with pytest.raises(DataError, match="missing dataset spec"):
        load_spec(tmp_path / "nowhere")

    img_path, msk_path = sample_paths(root, "train", 0)
    msk_path.unlink()
    with pytest.raises(DataError, match="mask missing"):
        load_split(root, "train")
    write_pgm(msk_path, np.zeros((32, 64), dtype=np.uint8))
    with pytest.raises(DataError, match="does not match"):
        load_split(root, "train")
    msk_path.unlink()
    img_path.unlink()
    with pytest.raises(DataError, match="no samples"):
        load_split(root, "train")
