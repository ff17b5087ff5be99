import math

import numpy as np
import pytest

from lm4lv import ablations, corpus
from lm4lv.ablations import (ExpertModel, LayerProbe, LinearFeatureMap,
                             ParameterParityError, VitLlmModel, blockiness,
                             cauchy_abs_mean, cauchy_expectation,
                             expected_l_random, identity_metrics,
                             scaled_identity_metrics)
from lm4lv.backbone import TextBackbone
from lm4lv.mae import MaskedAutoencoderCodec


@pytest.fixture(scope="module")
def small():
    images = corpus.generate_images(48, size=16, seed=3)
    codec = MaskedAutoencoderCodec(image_size=16, patch_size=4, d_v=16, enc_layers=1,
                                   dec_layers=1, heads=2, pretrain_epochs=2,
                                   pretrain_batch=16, pretrain_warmup=2, seed=0).fit(images)
    backbone = TextBackbone(d_l=32, n_layers=2, n_heads=2, max_seq_len=64, seed=0)
    backbone._ensure_built()
    return codec, backbone, images


# ---------------------------------------------------------------------------
# identity-mapping math
# ---------------------------------------------------------------------------

def test_identity_matrix_metrics():
    m = scaled_identity_metrics(np.eye(32))
    assert m.l_value == 0.0
    assert m.d_value == math.inf
    assert m.alpha_star == 1.0
    assert m.zero_denominators == 32 * 31


def test_scaled_identity_is_exact_zero():
    m = scaled_identity_metrics(3.7 * np.eye(16))
    assert m.l_value == 0.0
    assert m.alpha_star == pytest.approx(3.7)


def test_zero_matrix_l_zero():
    # the nearest scaled identity to 0 is alpha=0, so L=0 but D is undefined->inf
    m = scaled_identity_metrics(np.zeros((8, 8)))
    assert m.l_value == 0.0 and m.d_value == math.inf


def test_expected_l_law_128():
    rng = np.random.default_rng(0)
    values = [scaled_identity_metrics(rng.standard_normal((128, 128))).l_value
              for _ in range(50)]
    mean = np.mean(values)
    se = np.std(values, ddof=1) / np.sqrt(len(values))
    assert abs(mean - expected_l_random(128)) <= 3 * se


def test_alpha_star_minimizes():
    rng = np.random.default_rng(1)
    for _ in range(20):
        a = rng.standard_normal((12, 12))
        m = scaled_identity_metrics(a)
        n = a.shape[0]

        def objective(alpha):
            return float(((a - alpha * np.eye(n)) ** 2).sum()) / (n * n)

        base = objective(m.alpha_star)
        assert m.l_value == pytest.approx(base, rel=1e-12)
        for eps in (1e-3, -1e-3):
            assert objective(m.alpha_star + eps) > base


def test_identity_metrics_orientation():
    w_in = np.random.default_rng(2).standard_normal((8, 20))
    w_out = np.random.default_rng(3).standard_normal((20, 8))
    m = identity_metrics(w_in, w_out)
    assert m.n == 8
    with pytest.raises(ValueError, match="square"):
        identity_metrics(w_in, np.zeros((20, 9)))


# ---------------------------------------------------------------------------
# heavy-tailed ratio experiment
# ---------------------------------------------------------------------------

def test_cauchy_seed_determinism():
    assert cauchy_abs_mean(10_000, seed=5) == cauchy_abs_mean(10_000, seed=5)
    assert cauchy_abs_mean(10_000, seed=5) != cauchy_abs_mean(10_000, seed=6)


def test_cauchy_signed_symmetry():
    rng = np.random.default_rng((7, 1616))
    x = rng.standard_normal(200_000)
    y = rng.standard_normal(200_000)
    keep = (y != 0) & (np.abs(x / np.where(y == 0, 1, y)) < 50)
    ratios = (x / y)[keep]
    se = ratios.std(ddof=1) / np.sqrt(len(ratios))
    assert abs(ratios.mean()) <= 3 * se


def test_cauchy_expectation_structure():
    result = cauchy_expectation(10_000, seeds=range(3))
    assert len(result["means"]) == 3
    assert result["mean"] > 0


# ---------------------------------------------------------------------------
# ablation models
# ---------------------------------------------------------------------------

def test_linear_identity_init_converges_instantly_on_repetition(small):
    codec, _, images = small
    model = LinearFeatureMap(codec, identity_init=True, task="repeat",
                             epochs=2, batch_size=8, warmup=2, seed=0)
    model.fit(images)
    assert len(model.history_) <= 100
    assert model.history_[-1]["loss"] < 1e-3


def test_expert_parity_enforced(small):
    codec, backbone, _ = small
    reference = 2 * codec.d_v * backbone.d_l + codec.d_v + backbone.d_l + 4 * backbone.d_l
    for kind in ("mlp2", "transformer1"):
        expert = ExpertModel(codec, kind, reference, heads=2, seed=0)
        drift = abs(expert.trainable_param_count() - reference) / reference
        assert drift <= 0.05
    with pytest.raises(ParameterParityError):
        ExpertModel(codec, "mlp2", 40, seed=0)


def test_expert_unknown_kind(small):
    codec, _, _ = small
    with pytest.raises(ValueError, match="unknown expert"):
        ExpertModel(codec, "cnn", 1000)


def test_layer_probe_middles(small):
    codec, backbone, images = small
    rng = np.random.default_rng(0)
    feats = codec.transform(images[:2])
    import lm4lv.ndgrad as ng
    for middle in ("layer", "mlp", "identity"):
        probe = LayerProbe(codec, backbone, middle=middle, layer_index=1,
                           task="repeat", epochs=1, batch_size=8, warmup=2, seed=0)
        out = probe.apply_features(ng.Tensor(feats))
        assert out.shape == feats.shape
        assert probe.trainable_param_count() == (
            codec.d_v * backbone.d_l + backbone.d_l
            + backbone.d_l * codec.d_v + codec.d_v)
    with pytest.raises(ValueError, match="unknown middle"):
        LayerProbe(codec, backbone, middle="conv")


def test_layer_probe_identity_is_affine_map(small):
    codec, backbone, images = small
    probe = LayerProbe(codec, backbone, middle="identity", task="repeat",
                       epochs=1, batch_size=8, warmup=2, seed=0)
    import lm4lv.ndgrad as ng
    feats = codec.transform(images[:1])
    out = probe.apply_features(ng.Tensor(feats)).data
    a = probe.w_in.w.data @ probe.w_out.w.data
    bias = probe.w_in.b.data @ probe.w_out.w.data + probe.w_out.b.data
    np.testing.assert_allclose(out, feats @ a + bias, atol=1e-5)


def test_vit_llm_trains_and_keeps_backbone_frozen(small):
    codec, backbone, images = small
    digest = backbone.params_digest()
    model = VitLlmModel(codec, backbone, task="repeat", epochs=2, batch_size=8,
                        warmup=2, lr=1e-3, seed=0)
    model.fit(images)
    assert backbone.params_digest() == digest
    losses = [h["loss"] for h in model.history_]
    assert losses[-1] < losses[0]
    out = model.predict(images[:2])
    assert out.shape == images[:2].shape


def test_vit_llm_permutation_equivariance(small):
    codec, backbone, images = small
    model = VitLlmModel(codec, backbone, task="repeat", seed=0)
    import lm4lv.ndgrad as ng
    feats = codec.transform(images[:1])
    perm = np.random.default_rng(4).permutation(feats.shape[1])
    out = model.apply_features(ng.Tensor(feats)).data
    out_perm = model.apply_features(ng.Tensor(feats[:, perm])).data
    np.testing.assert_allclose(out_perm, out[:, perm], atol=1e-5)


# ---------------------------------------------------------------------------
# blockiness
# ---------------------------------------------------------------------------

def test_blockiness_flags_patch_seams():
    rng = np.random.default_rng(0)
    blocks = rng.random((4, 4, 3)).astype(np.float32)
    seamy = np.kron(blocks, np.ones((4, 4, 1), np.float32))
    assert blockiness(seamy, 4) > 0.05
    assert blockiness(np.full((16, 16, 3), 0.5, np.float32), 4) == 0.0


def test_mean_blockiness(small):
    _, _, images = small
    value = ablations.mean_blockiness(images[:4], 4)
    assert isinstance(value, float)
