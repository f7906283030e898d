import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from histoclean.data import (
    DOMAIN_A,
    DOMAIN_B,
    AugmentConfig,
    Manifest,
    ManifestError,
    TileRecord,
    UnpairedBatches,
    augment,
    center_crop_offset,
    denormalize,
    eval_transform,
    load_manifest,
    make_batches,
    normalize,
    resize_bilinear,
    save_manifest,
    split_manifest,
    write_image,
)


def _rec(i, domain=DOMAIN_B, label=None, source=None, split="train", paired=None, path="x.png"):
    return {
        "id": f"t{i}",
        "image_path": path,
        "domain": domain,
        "label": label,
        "magnification": "x40",
        "source_id": source or f"s{i}",
        "split": split,
        "paired_clean_id": paired,
    }


def _write_manifest(tmp_path, rows, header=True):
    write_image(tmp_path / "x.png", np.zeros((8, 8, 3), np.uint8))
    lines = []
    if header:
        lines.append(json.dumps({"tile_size": 8}))
    lines += [json.dumps(r) for r in rows]
    p = tmp_path / "manifest.txt"
    p.write_text("\n".join(lines) + "\n")
    return p


def test_load_six_records(tmp_path):
    rows = [_rec(i) for i in range(3)] + [_rec(i, DOMAIN_A, label=i) for i in range(3, 6)]
    m = load_manifest(_write_manifest(tmp_path, rows))
    assert len(m) == 6
    assert m.records[3].label == 3
    assert m.records[0].image_path == tmp_path / "x.png"


def test_label_on_clean_tile_rejected(tmp_path):
    p = _write_manifest(tmp_path, [_rec(0, DOMAIN_B, label=3)])
    with pytest.raises(ManifestError, match="label on clean tile"):
        load_manifest(p)


@pytest.mark.parametrize(
    "rows, msg",
    [
        ([_rec(0), _rec(0)], "duplicate id"),
        ([_rec(0, DOMAIN_A, label=7)], r"outside \[0,6\]"),
        ([_rec(0, DOMAIN_A, label=1, paired="nope")], "dangling paired_clean_id"),
        ([_rec(0, DOMAIN_A, label=None)], "without label"),
    ],
)
def test_manifest_errors(tmp_path, rows, msg):
    with pytest.raises(ManifestError, match=msg):
        load_manifest(_write_manifest(tmp_path, rows))


def test_parse_error_reports_line(tmp_path):
    p = _write_manifest(tmp_path, [_rec(0)])
    p.write_text(p.read_text() + "{not json\n")
    with pytest.raises(ManifestError, match="line 3"):
        load_manifest(p)


def test_missing_image_file(tmp_path):
    p = _write_manifest(tmp_path, [_rec(0, path="missing.png")])
    with pytest.raises(ManifestError, match="not found"):
        load_manifest(p)


def test_reference_clean_counts_roundtrip(tmp_path):
    # 3275 clean tiles split 80-20 -> 2620 / 655
    write_image(tmp_path / "x.png", np.zeros((8, 8, 3), np.uint8))
    recs = [TileRecord(f"c{i}", tmp_path / "x.png", DOMAIN_B, None, "x40", f"s{i}", "train") for i in range(3275)]
    m = split_manifest(Manifest(recs, tile_size=8), 0.8, seed=3)
    back = load_manifest(save_manifest(m, tmp_path / "m.txt"))
    counts = back.counts()
    assert counts[(DOMAIN_B, "train")] == 2620
    assert counts[(DOMAIN_B, "test")] == 655


def _class_manifest(per_class=10, classes=range(7)):
    recs = []
    for c in classes:
        for i in range(per_class):
            recs.append(TileRecord(f"a{c}_{i}", "x.png", DOMAIN_A, c, "x10", f"src{c}_{i}", "train"))
    return Manifest(recs)


def test_split_per_class_arithmetic():
    m = split_manifest(_class_manifest(), 0.8, seed=1)
    for c in range(7):
        splits = [r.split for r in m.records if r.label == c]
        assert splits.count("train") == 8 and splits.count("test") == 2


def test_split_deterministic():
    m = _class_manifest()
    a = [r.split for r in split_manifest(m, 0.8, 5).records]
    b = [r.split for r in split_manifest(m, 0.8, 5).records]
    assert a == b


def test_split_small_stratum_named():
    recs = [TileRecord("a", "x.png", DOMAIN_A, 4, "x40", "s0", "train")]
    recs += [TileRecord(f"b{i}", "x.png", DOMAIN_B, None, "x40", f"t{i}", "train") for i in range(4)]
    with pytest.raises(ManifestError, match="tissue_fold"):
        split_manifest(Manifest(recs), 0.8, 0)


def test_split_keeps_pairs_together(tiny_corpus):
    _, m = tiny_corpus
    by_id = m.by_id()
    for r in m.records:
        if r.paired_clean_id:
            assert by_id[r.paired_clean_id].split == r.split


@settings(max_examples=40, deadline=None)
@given(
    sizes=st.lists(st.integers(2, 30), min_size=1, max_size=7),
    frac=st.floats(0.05, 0.95),
    seed=st.integers(0, 2**32 - 1),
)
def test_split_is_stratified_partition(sizes, frac, seed):
    recs = []
    for c, n in enumerate(sizes):
        recs += [TileRecord(f"a{c}_{i}", "x.png", DOMAIN_A, c, "x40", f"s{c}_{i}", "train") for i in range(n)]
    m = split_manifest(Manifest(recs), frac, seed)
    assert sorted(r.id for r in m.records) == sorted(r.id for r in recs)
    for c, n in enumerate(sizes):
        n_train = sum(1 for r in m.records if r.label == c and r.split == "train")
        assert 1 <= n_train <= n - 1
        assert abs(n_train - frac * n) <= 1.0


def test_normalize_roundtrip_exact():
    vals = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, 2)
    x = normalize(vals)
    assert x.min() >= -1 and x.max() <= 1
    np.testing.assert_array_equal(denormalize(x), vals)


def _bilinear_oracle(img, size):
    # half-pixel centres, edge clamped
    h, w = img.shape[:2]
    out = np.zeros((size, size, img.shape[2]))
    for i in range(size):
        y = max((i + 0.5) * h / size - 0.5, 0.0)
        y0 = min(int(math.floor(y)), h - 1)
        y1 = min(y0 + 1, h - 1)
        fy = y - y0
        for j in range(size):
            x = max((j + 0.5) * w / size - 0.5, 0.0)
            x0 = min(int(math.floor(x)), w - 1)
            x1 = min(x0 + 1, w - 1)
            fx = x - x0
            out[i, j] = (
                img[y0, x0] * (1 - fy) * (1 - fx) + img[y0, x1] * (1 - fy) * fx
                + img[y1, x0] * fy * (1 - fx) + img[y1, x1] * fy * fx
            )
    return out


def test_resize_matches_half_pixel_bilinear_oracle():
    img = np.random.default_rng(0).uniform(-1, 1, (20, 20, 3)).astype(np.float32)
    np.testing.assert_allclose(resize_bilinear(img, 8), _bilinear_oracle(img.astype(np.float64), 8), atol=1e-5)


def test_augment_default_shape():
    img = np.random.default_rng(0).uniform(-1, 1, (300, 300, 3)).astype(np.float32)
    out = augment(img, AugmentConfig(), np.random.default_rng(1))
    assert out.shape == (128, 128, 3)
    assert out.min() >= -1 and out.max() <= 1


def test_augment_without_randomness_is_deterministic():
    img = np.random.default_rng(0).uniform(-1, 1, (300, 300, 3)).astype(np.float32)
    cfg = AugmentConfig(0.0, 0.0, crop_size=300, out_size=128)
    a = augment(img, cfg, np.random.default_rng(1))
    b = augment(img, cfg, np.random.default_rng(2))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, resize_bilinear(img, 128))


def test_augment_preserves_constants():
    img = np.full((300, 300, 3), 0.25, np.float32)
    out = augment(img, AugmentConfig(), np.random.default_rng(3))
    np.testing.assert_allclose(out, 0.25, atol=1e-6)


def test_augment_rejects_small_image():
    with pytest.raises(ValueError, match="smaller than crop_size"):
        augment(np.zeros((200, 200, 3), np.float32), AugmentConfig(), np.random.default_rng(0))


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), ph=st.floats(0, 1), pv=st.floats(0, 1))
def test_augment_shape_invariant(seed, ph, pv):
    img = np.zeros((64, 64, 3), np.float32)
    out = augment(img, AugmentConfig(ph, pv, crop_size=48, out_size=32), np.random.default_rng(seed))
    assert out.shape == (32, 32, 3)


def test_eval_transform_offsets():
    assert center_crop_offset(300, 300, 256) == (22, 22)
    assert center_crop_offset(256, 256, 256) == (0, 0)
    img = np.random.default_rng(0).uniform(-1, 1, (300, 300, 3)).astype(np.float32)
    out = eval_transform(img)
    np.testing.assert_array_equal(out, resize_bilinear(img[22:278, 22:278], 128))
    np.testing.assert_array_equal(out, eval_transform(img))
    exact = img[:256, :256]
    np.testing.assert_array_equal(eval_transform(exact), resize_bilinear(exact, 128))


def test_eval_transform_undersized():
    with pytest.raises(ValueError):
        eval_transform(np.zeros((100, 100, 3), np.float32))


def test_augment_config_invariants():
    with pytest.raises(ValueError):
        AugmentConfig(crop_size=64, out_size=128)
    with pytest.raises(ValueError):
        AugmentConfig().check_tile(200)


# --- batches -------------------------------------------------------------------


def _unpaired_manifest(tmp_path, n_a, n_b, size=16):
    rng = np.random.default_rng(0)
    recs = []
    for i in range(n_a):
        p = tmp_path / f"a{i}.png"
        write_image(p, rng.integers(0, 256, (size, size, 3), dtype=np.uint8))
        recs.append(TileRecord(f"a{i}", p, DOMAIN_A, i % 7, "x40", f"sa{i}", "train"))
    for i in range(n_b):
        p = tmp_path / f"b{i}.png"
        write_image(p, rng.integers(0, 256, (size, size, 3), dtype=np.uint8))
        recs.append(TileRecord(f"b{i}", p, DOMAIN_B, None, "x40", f"sb{i}", "train"))
    return Manifest(recs, tile_size=size)


def test_steps_per_epoch(tmp_path):
    m = _unpaired_manifest(tmp_path, 32, 48)
    cfg = AugmentConfig.for_tile_size(16)
    batches = list(make_batches(m, 16, cfg, seed=0))
    assert len(batches) == 3
    ids_b = [i for b in batches for i in b.ids_b]
    assert sorted(ids_b) == sorted(f"b{i}" for i in range(48))
    ids_a = [i for b in batches for i in b.ids_a]
    # the smaller domain cycles: every A tile appears, 16 of them twice
    assert set(ids_a) == {f"a{i}" for i in range(32)} and len(ids_a) == 48


def test_batch_labels_and_range(tmp_path):
    m = _unpaired_manifest(tmp_path, 10, 6)
    by_id = m.by_id()
    for b in make_batches(m, 4, AugmentConfig.for_tile_size(16), seed=1):
        assert [by_id[i].label for i in b.ids_a] == b.labels_a.tolist()
        assert b.images_a.shape[1:] == (3, 16, 16)
        for t in (b.images_a, b.images_b):
            assert t.min() >= -1 and t.max() <= 1


def test_batches_deterministic_and_worker_independent(tmp_path):
    m = _unpaired_manifest(tmp_path, 12, 9)
    cfg = AugmentConfig(crop_size=12, out_size=8)
    runs = []
    for workers in (0, 0, 2):
        it = UnpairedBatches(m, 4, cfg, seed=9, workers=workers)
        runs.append([b for e in range(2) for b in it.epoch(e)])
    for other in runs[1:]:
        for x, y in zip(runs[0], other):
            assert x.ids_a == y.ids_a and x.ids_b == y.ids_b
            assert (x.images_a == y.images_a).all() and (x.images_b == y.images_b).all()
    e0 = [b.ids_b for b in runs[0][:3]]
    e1 = [b.ids_b for b in runs[0][3:]]
    assert e0 != e1


def test_paired_targets_follow_augmentation(tiny_corpus):
    _, m = tiny_corpus
    train = m.subset(split="train")
    cfg = AugmentConfig(crop_size=48, out_size=32)
    b = next(make_batches(train, 8, cfg, seed=0))
    assert b.clean_targets_a is not None
    # unmasked pixels agree between artifact and its clean target
    same = (b.images_a == b.clean_targets_a).float().mean()
    assert same > 0.3


def test_empty_domain_rejected(tmp_path):
    m = _unpaired_manifest(tmp_path, 4, 0)
    with pytest.raises(ValueError, match="nonempty"):
        list(make_batches(m, 2, AugmentConfig.for_tile_size(16), 0))
