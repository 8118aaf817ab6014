import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from steerkit.corpus import ActivationDataset
from steerkit.errors import FormatError, IndexOutOfRange, TooManyPlants
from steerkit.saekit import (
    SaeDictionary,
    latent_aurocs,
    latent_value,
    load_sae,
    plant_sae,
    sae_clamp_intervene,
    sae_detect,
    sae_min_clamp_intervene,
    save_sae,
    select_feature_auroc,
)


def random_sae(seed, d=6, z=10):
    r = np.random.default_rng(seed)
    return SaeDictionary(
        r.standard_normal((d, z)),
        r.standard_normal((z, d)),
        r.standard_normal(z) * 0.1,
        np.abs(r.standard_normal(z)) * 0.1,
        np.abs(r.standard_normal(z)) + 1,
    )


def one_hot_sae(d=3):
    return SaeDictionary(np.eye(d), np.eye(d), np.zeros(d), np.full(d, 1.0), np.ones(d))


class TestDetect:
    def test_below_threshold(self):
        assert sae_detect(one_hot_sae(), 0, np.array([0.5, 9, 9])) == 0.0

    def test_pass_through(self):
        assert sae_detect(one_hot_sae(), 0, np.array([2.5, 0, 0])) == 2.5

    def test_batched(self):
        out = sae_detect(one_hot_sae(), 1, np.array([[0, 2.0, 0], [0, 0.2, 0]]))
        np.testing.assert_array_equal(out, [2.0, 0.0])

    def test_bad_index(self):
        with pytest.raises(IndexOutOfRange):
            sae_detect(one_hot_sae(), 3, np.zeros(3))


class TestClamp:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.integers(0, 9))
    def test_target_zf_is_identity(self, seed, f):
        sae = random_sae(seed)
        h = np.random.default_rng(seed + 1).standard_normal(6)
        out = sae_clamp_intervene(sae, f, h, latent_value(sae, f, h))
        assert np.abs(out - h).max() < 1e-9

    def test_zero_latent_reduces_to_addition(self):
        sae = one_hot_sae()
        h = np.array([0.0, 1.0, 2.0])
        np.testing.assert_allclose(sae_clamp_intervene(sae, 0, h, 4.0), h + 4.0 * sae.W_dec[0])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-5, 5))
    def test_full_equals_simplified(self, seed, t):
        sae = random_sae(seed)
        h = np.random.default_rng(seed + 1).standard_normal((3, 6))
        a = sae_clamp_intervene(sae, 2, h, t)
        b = sae_clamp_intervene(sae, 2, h, t, simplified=True)
        assert np.abs(a - b).max() < 1e-9

    def test_min_clamp_identity_above_target(self):
        sae = random_sae(0)
        h = np.random.default_rng(1).standard_normal(6)
        zf = latent_value(sae, 4, h)
        np.testing.assert_array_equal(sae_min_clamp_intervene(sae, 4, h, zf - 1.0, simplified=True), h)
        assert np.abs(sae_min_clamp_intervene(sae, 4, h, zf - 1.0) - h).max() < 1e-9

    def test_min_clamp_below_target(self):
        sae = random_sae(0)
        h = np.random.default_rng(1).standard_normal(6)
        t = latent_value(sae, 4, h) + 2.0
        np.testing.assert_array_equal(sae_min_clamp_intervene(sae, 4, h, t), sae_clamp_intervene(sae, 4, h, t))

    def test_min_clamp_piecewise_and_continuous(self):
        sae = random_sae(3)
        h = np.random.default_rng(4).standard_normal(6)
        zf = latent_value(sae, 1, h)
        grid = np.linspace(zf - 2, zf + 2, 41)
        outs = [sae_min_clamp_intervene(sae, 1, h, t, simplified=True) for t in grid]
        for t, o in zip(grid, outs):
            ref = h if t <= zf else sae_clamp_intervene(sae, 1, h, t, simplified=True)
            np.testing.assert_allclose(o, ref, atol=1e-12)
        steps = [np.linalg.norm(b - a) for a, b in zip(outs, outs[1:])]
        assert max(steps) <= 0.1 * np.linalg.norm(sae.W_dec[1]) + 1e-12


def planted_dataset(seed, d, direction, n=20):
    """Positives carry a spike along `direction`; negatives spike along random directions."""
    r = np.random.default_rng(seed)
    blocks, labels = [], []
    for i in range(2 * n):
        b = 0.3 * r.standard_normal((5, d))
        if i < n:
            b[r.integers(5)] += 3.0 * direction
        else:
            u = r.standard_normal(d)
            b[r.integers(5)] += 3.0 * u / np.linalg.norm(u)
        blocks.append(b)
        labels.append("positive" if i < n else "negative")
    return ActivationDataset.from_blocks(blocks, labels)


class TestSelection:
    def test_planted_index_recovered(self):
        d = 8
        v = np.eye(d)[2]
        sae, index = plant_sae(0, d, 32, {"c": v})
        assert select_feature_auroc(sae, planted_dataset(1, d, v)) == index["c"]

    def test_zero_encoder_ties_to_zero(self):
        sae = SaeDictionary(np.zeros((4, 5)), np.zeros((5, 4)), np.zeros(5), np.zeros(5), np.ones(5))
        ds = planted_dataset(0, 4, np.eye(4)[0])
        assert (latent_aurocs(sae, ds) == 0.5).all()
        assert select_feature_auroc(sae, ds) == 0

    def test_permutation_equivariance(self):
        d = 8
        sae = random_sae(2, d, 16)
        ds = planted_dataset(3, d, np.eye(d)[5])
        perm = np.random.default_rng(0).permutation(16)
        shuffled = SaeDictionary(sae.W_enc[:, perm], sae.W_dec[perm], sae.b_enc[perm], sae.threshold[perm], sae.max_activations[perm])
        scores = latent_aurocs(sae, ds)
        np.testing.assert_array_equal(latent_aurocs(shuffled, ds), scores[perm])
        assert (scores == scores.max()).sum() == 1
        assert perm[select_feature_auroc(shuffled, ds)] == select_feature_auroc(sae, ds)

    def test_positive_scores_exceed_negative(self):
        d = 8
        v = np.eye(d)[0]
        sae, index = plant_sae(0, d, 8, {"c": v})
        ds = planted_dataset(5, d, v)
        s = sae_detect(sae, index["c"], ds.rows)
        pooled = np.array([s[o : o + c].mean() for o, c in zip(ds.offsets, ds.counts)])
        assert pooled[ds.y == 1].mean() > pooled[ds.y == 0].mean()


class TestPlant:
    def test_own_direction(self):
        v = np.ones(4) / 2
        sae, index = plant_sae(0, 4, 6, {"c": v})
        assert abs(sae_detect(sae, index["c"], 2.5 * v) - 2.5) < 1e-12

    def test_deterministic(self):
        planted = {"a": np.eye(4)[0], "b": np.eye(4)[1]}
        a, ia = plant_sae(7, 4, 6, planted)
        b, ib = plant_sae(7, 4, 6, planted)
        assert ia == ib and np.array_equal(a.W_enc, b.W_enc)

    def test_too_many(self):
        with pytest.raises(TooManyPlants):
            plant_sae(0, 4, 1, {"a": np.eye(4)[0], "b": np.eye(4)[1]})

    def test_reference_sets_max(self):
        sae, index = plant_sae(0, 3, 4, {"a": np.eye(3)[0]}, reference=np.array([[2.0, 0, 0], [1.0, 0, 0]]))
        assert sae.max_activations[index["a"]] == 2.0


def test_shape_validation():
    with pytest.raises(FormatError):
        SaeDictionary(np.zeros((3, 4)), np.zeros((3, 4)), np.zeros(4), np.zeros(4), np.zeros(4))
    with pytest.raises(FormatError):
        SaeDictionary(np.zeros((3, 4)), np.zeros((4, 3)), np.zeros(4), -np.ones(4), np.zeros(4))


def test_file_roundtrip(tmp_path):
    sae = random_sae(9)
    save_sae(sae, tmp_path, {"c0": 3})
    back, index = load_sae(tmp_path)
    assert index == {"c0": 3}
    for name in ("W_enc", "W_dec", "b_enc", "threshold", "max_activations"):
        np.testing.assert_array_equal(getattr(back, name), getattr(sae, name).astype(np.float32))
    (tmp_path / "sae.f32").write_bytes((tmp_path / "sae.f32").read_bytes()[:-4])
    with pytest.raises(FormatError):
        load_sae(tmp_path)
