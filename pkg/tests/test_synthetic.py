import numpy as np
import pytest

from histoclean.data import CLASS_NAMES, DOMAIN_A, DOMAIN_B, load_manifest, read_image
from histoclean.synthetic import SyntheticSpec, render_artifact, render_clean, synthesize_corpus


def test_counts_and_pairing(tmp_path):
    m = synthesize_corpus(SyntheticSpec(100, (0, 2, 5), tile_size=32, seed=1), tmp_path)
    clean = [r for r in m.records if r.domain == DOMAIN_B]
    art = [r for r in m.records if r.domain == DOMAIN_A]
    assert len(clean) == 100 and len(art) == 300
    assert all(r.paired_clean_id for r in art)
    assert (tmp_path / "masks" / "scene00000_5.png").is_file()
    loaded = load_manifest(tmp_path / "manifest.txt")
    assert len(loaded) == 400 and loaded.tile_size == 32
    assert read_image(loaded.records[0].image_path).shape == (32, 32, 3)


def test_same_seed_same_bytes(tmp_path):
    spec = SyntheticSpec(3, (1, 6), tile_size=32, seed=4)
    synthesize_corpus(spec, tmp_path / "a")
    synthesize_corpus(spec, tmp_path / "b")
    synthesize_corpus(SyntheticSpec(3, (1, 6), tile_size=32, seed=5), tmp_path / "c")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert files
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert any((tmp_path / "a" / f).read_bytes() != (tmp_path / "c" / f).read_bytes() for f in files)


@pytest.mark.parametrize("label", [c for c, n in enumerate(CLASS_NAMES) if n != "blur"])
def test_difference_confined_to_stored_mask(tmp_path, label):
    synthesize_corpus(SyntheticSpec(4, (label,), tile_size=48, seed=label), tmp_path)
    for i in range(4):
        clean = read_image(tmp_path / "clean" / f"scene{i:05d}.png").astype(int)
        art = read_image(tmp_path / "artifact" / f"scene{i:05d}_{label}.png").astype(int)
        mask = read_image(tmp_path / "masks" / f"scene{i:05d}_{label}.png")[..., 0] > 0
        changed = np.abs(art - clean).sum(-1) > 0
        assert not (changed & ~mask).any()
        assert changed.any()


def test_blur_changes_tile():
    clean = render_clean(np.random.default_rng(0), 64)
    art, mask = render_artifact(clean, 2, np.random.default_rng(1))
    assert mask.all() and np.abs(art.astype(int) - clean).mean() > 1


def test_spec_validation(tmp_path):
    with pytest.raises(ValueError):
        SyntheticSpec(0)
    with pytest.raises(ValueError):
        SyntheticSpec(2, ())
    with pytest.raises(ValueError, match="unknown class"):
        SyntheticSpec(2, (9,))


def test_classes_are_separable_by_colour_statistics():
    # crude check that the corruption families differ: mean colour shift per class
    rng = np.random.default_rng(0)
    shifts = {}
    for c in range(7):
        d = []
        for k in range(6):
            clean = render_clean(np.random.default_rng([k]), 64)
            art, _ = render_artifact(clean, c, np.random.default_rng([k, c]))
            d.append((art.astype(float) - clean).mean((0, 1)))
        shifts[c] = np.mean(d, 0)
    assert len({tuple(np.round(v, 0)) for v in shifts.values()}) == 7
    del rng
