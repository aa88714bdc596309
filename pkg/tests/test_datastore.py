import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hyperkd import datastore as ds
from hyperkd.banddef import synthetic_source_table
from hyperkd.saliency import score_patches

from oracles import variance_scores


def random_store(n=3, seed=0, bands=5, size=4):
    table = synthetic_source_table(bands)
    rng = np.random.default_rng(seed)
    tiles = [ds.HyperCube(rng.uniform(size=(bands, size, size)).astype(np.float32), table,
                          tile_id=f"t{k}", split="train" if k else "eval") for k in range(n)]
    return ds.TileStore(tiles, table, ds.compute_stats(tiles))


# -- store -------------------------------------------------------------------

def test_roundtrip_bit_exact(tmp_path):
    src = random_store()
    src.labels["t1"] = np.arange(16).reshape(4, 4)
    back = ds.read_store(ds.write_store(src, tmp_path))
    assert [t.tile_id for t in back.tiles] == ["t0", "t1", "t2"]
    assert [t.split for t in back.tiles] == ["eval", "train", "train"]
    for a, b in zip(src.tiles, back.tiles):
        assert a.data.tobytes() == b.data.tobytes()
    assert back.band_table.to_rows() == src.band_table.to_rows()
    assert back.stats.mean.tobytes() == src.stats.mean.tobytes()
    assert back.stats.std.tobytes() == src.stats.std.tobytes()
    np.testing.assert_array_equal(back.labels["t1"], src.labels["t1"])


def test_manifest_self_describing(tmp_path):
    ds.write_store(random_store(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text(encoding="utf-8"))
    assert m["tile_count"] == 3 and m["dims"] == [5, 4, 4] and m["dtype"] == "f32"
    assert len(m["band_table"]["rows"]) == 5
    raw = (tmp_path / "tile_t0.bin").read_bytes()
    assert len(raw) == 5 * 4 * 4 * 4
    first = np.frombuffer(raw[:4], "<f4")[0]
    assert first == np.float32(random_store().tiles[0].data[0, 0, 0])
    assert not (tmp_path / "store.lock").exists()


def test_missing_tile_file_names_the_tile(tmp_path):
    ds.write_store(random_store(), tmp_path)
    (tmp_path / "tile_t2.bin").unlink()
    with pytest.raises(ds.StoreError, match="tile t2"):
        ds.read_store(tmp_path)


def test_truncated_tile(tmp_path):
    ds.write_store(random_store(), tmp_path)
    p = tmp_path / "tile_t1.bin"
    p.write_bytes(p.read_bytes()[:-4])
    with pytest.raises(ds.StoreError, match="tile t1"):
        ds.read_store(tmp_path)


def test_corrupt_manifest_and_dtype(tmp_path):
    ds.write_store(random_store(), tmp_path)
    m = json.loads((tmp_path / "manifest.json").read_text())
    m["dtype"] = "f64"
    (tmp_path / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ds.StoreError, match="dtype"):
        ds.read_store(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ds.StoreError, match="corrupt"):
        ds.read_store(tmp_path)
    with pytest.raises(ds.StoreError):
        ds.read_store(tmp_path / "nowhere")


def test_lock_blocks_second_writer(tmp_path):
    (tmp_path / "store.lock").write_text("1")
    with pytest.raises(ds.StoreError, match="locked"):
        ds.write_store(random_store(), tmp_path)


def test_normalized_tiles_not_stored(tmp_path):
    st_ = random_store()
    st_.tiles[0] = ds.normalize(st_.tiles[0], st_.stats)
    with pytest.raises(ds.StoreError):
        ds.write_store(st_, tmp_path)


# -- stats -------------------------------------------------------------------

def test_stats_use_training_split_only():
    st_ = random_store(n=4)
    train = np.concatenate([t.data.reshape(5, -1) for t in st_.split("train")], axis=1)
    np.testing.assert_array_equal(st_.stats.mean, train.mean(axis=1))
    everything = np.concatenate([t.data.reshape(5, -1) for t in st_.tiles], axis=1)
    assert not np.allclose(st_.stats.mean, everything.mean(axis=1))


def test_normalized_training_set_moments():
    st_ = random_store(n=6)
    z = np.concatenate([ds.normalize(t, st_.stats).data.reshape(5, -1)
                        for t in st_.split("train")], axis=1)
    assert np.all(np.abs(z.mean(axis=1)) < 1e-6)
    np.testing.assert_allclose(z.std(axis=1), 1.0, atol=1e-6)


def test_constant_band_floored_to_zero():
    table = synthetic_source_table(2)
    data = np.stack([np.full((3, 3), 0.7), np.random.default_rng(0).uniform(size=(3, 3))])
    cube = ds.HyperCube(data, table)
    stats = ds.compute_stats([cube])
    assert stats.std[0] == ds.STD_FLOOR
    np.testing.assert_allclose(ds.normalize(cube, stats).data[0], 0.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_denormalize_inverts_normalize(seed):
    st_ = random_store(seed=seed)
    c = st_.tiles[1]
    back = ds.denormalize(ds.normalize(c, st_.stats))
    np.testing.assert_allclose(back.data, c.data, rtol=0, atol=1e-10)


def test_stats_band_mismatch():
    st_ = random_store()
    with pytest.raises(ValueError):
        ds.normalize(st_.tiles[0], ds.BandStats(np.zeros(3), np.ones(3)))


def test_cube_invariants():
    table = synthetic_source_table(3)
    with pytest.raises(ValueError):
        ds.HyperCube(np.zeros((2, 4, 4)), table)
    with pytest.raises(ValueError):
        ds.HyperCube(np.full((3, 2, 2), np.nan), table)


# -- generator ---------------------------------------------------------------

def mcg_oracle(seed, n):
    """The same recurrence in Python integers."""
    mask = (1 << 64) - 1
    z = (seed + 0x9E3779B97F4A7C15) & mask
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & mask
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & mask
    x = (z ^ (z >> 31)) | 1
    out = []
    for _ in range(n):
        x = (x * 0xF1357AEA2E62A9C5) & mask
        out.append(((x >> 11) + 0.5) / 2.0 ** 53)
    return out


@pytest.mark.parametrize("seed", [0, 1, 12345, 2 ** 40 + 7])
def test_mcg64_matches_integer_oracle(seed):
    g = ds.Mcg64(seed)
    a = np.concatenate([g.uniform(5), g.uniform(11)])
    assert a.tolist() == mcg_oracle(seed, 16)


def test_mcg64_uniform_and_normal_moments():
    u = ds.Mcg64(3).uniform(100_000)
    assert 0.0 < u.min() and u.max() < 1.0 and abs(u.mean() - 0.5) < 0.005
    z = ds.Mcg64(4).normal(100_001)
    assert z.size == 100_001 and abs(z.mean()) < 0.01 and abs(z.std() - 1) < 0.01


def test_mcg64_choice_distinct():
    c = ds.Mcg64(5).choice(16, 6)
    assert len(set(c.tolist())) == 6 and c.max() < 16


def test_scene_deterministic():
    a, b = ds.gen_scene(ds.SceneSpec(seed=9)), ds.gen_scene(ds.SceneSpec(seed=9))
    assert a.cube.data.tobytes() == b.cube.data.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)
    assert ds.gen_scene(ds.SceneSpec(seed=10)).cube.data.tobytes() != a.cube.data.tobytes()


def test_scene_spec_validation():
    with pytest.raises(ValueError):
        ds.SceneSpec(planted=(99,))
    with pytest.raises(ValueError):
        ds.SceneSpec(amplitude=-1.0)
    with pytest.raises(ValueError):
        ds.SceneSpec(height=30)


def test_explicit_planted_layout():
    sc = ds.gen_scene(ds.SceneSpec(seed=1, planted=(0, 5)))
    assert np.flatnonzero(sc.salient.ravel()).tolist() == [0, 5]


def test_zero_amplitude_has_no_saliency_and_flat_scores():
    for seed in range(3):
        flat = ds.gen_scene(ds.SceneSpec(seed=seed, amplitude=0.0))
        textured = ds.gen_scene(ds.SceneSpec(seed=seed))
        assert not flat.salient.any()
        for m in ("gabor", "wavelet"):
            a = score_patches(flat.cube, m, 8).scores
            b = score_patches(textured.cube, m, 8).scores
            assert np.ptp(a) < 0.1 * np.ptp(b)


def test_planted_variance_at_least_5x_background_over_100_seeds():
    for seed in range(100):
        sc = ds.gen_scene(ds.SceneSpec(seed=seed))
        m = sc.salient.ravel()
        v = np.mean([variance_scores(b, 8) for b in sc.cube.data], axis=0)
        assert v[m].mean() >= 5.0 * v[~m].mean(), seed


def test_labels_follow_patch_cells():
    sc = ds.gen_scene(ds.SceneSpec(seed=2))
    assert sc.labels.shape == (32, 32) and sc.labels.max() < 4
    cells = sc.labels.reshape(4, 8, 4, 8)
    assert (cells == cells[:, :1, :, :1]).all()


def test_class_signatures_shared_across_scenes():
    sig = ds.class_signatures(4, 32)
    assert sig.shape == (4, 32)
    np.testing.assert_array_equal(sig, ds.class_signatures(4, 32))


def test_generate_store_layout(tmp_path):
    st_ = ds.generate_store(tmp_path, seed=3, n_train=3, n_eval=2, bands=8, size=16)
    assert len(st_.split("train")) == 3 and len(st_.split("eval")) == 2
    back = ds.read_store(tmp_path)
    assert set(back.labels) == set(back.targets) == {t.tile_id for t in back.tiles}
    assert back.meta["seed"] == 3
    np.testing.assert_array_equal(back.stats.mean, ds.compute_stats(back.tiles).mean)
