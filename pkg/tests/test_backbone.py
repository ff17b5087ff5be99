import numpy as np
import pytest

from lm4lv import corpus
from lm4lv import ndgrad as ng
from lm4lv.backbone import SPECIALS, TextBackbone


def tiny_backbone(**kw):
    params = dict(d_l=32, n_layers=2, n_heads=2, max_seq_len=64, epochs=1,
                  batch_size=8, seq_len=32, warmup=5, seed=0)
    params.update(kw)
    return TextBackbone(**params)


@pytest.fixture(scope="module")
def built():
    bb = tiny_backbone()
    bb._ensure_built()
    return bb


def test_special_ids_disjoint_from_text():
    ids = [SPECIALS.img_start, SPECIALS.img_end, SPECIALS.human,
           SPECIALS.assistant, SPECIALS.end_of_text]
    assert len(set(ids)) == 5
    assert all(i >= 256 for i in ids)
    assert SPECIALS.vocab_size == 261


def test_rotary_pair_constraint():
    with pytest.raises(ValueError, match="rotary"):
        TextBackbone(d_l=20, n_heads=3)._ensure_built()


def test_overlength_rejected(built):
    emb = ng.Tensor(np.zeros((1, 65, 32), np.float32))
    with pytest.raises(ValueError, match="max_seq_len"):
        built.forward(emb)


def test_causality_under_perturbation(built):
    rng = np.random.default_rng(3)
    base = rng.standard_normal((1, 12, 32)).astype(np.float32)
    h_base = built.forward(ng.Tensor(base), mode="causal").data
    for trial in range(10):
        t = int(rng.integers(1, 11))
        perturbed = base.copy()
        perturbed[0, t + 1:] += rng.standard_normal((11 - t, 32)).astype(np.float32)
        h = built.forward(ng.Tensor(perturbed), mode="causal").data
        np.testing.assert_allclose(h[0, :t + 1], h_base[0, :t + 1], atol=1e-5)
        if t + 1 < 12:
            assert not np.allclose(h[0, t + 1:], h_base[0, t + 1:], atol=1e-5)


def test_vit_mode_permutation_equivariance(built):
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1, 9, 32)).astype(np.float32)
    perm = rng.permutation(9)
    h = built.forward(ng.Tensor(x), mode="vit").data
    h_perm = built.forward(ng.Tensor(x[:, perm]), mode="vit").data
    np.testing.assert_allclose(h_perm, h[:, perm], atol=1e-5)


def test_causal_mode_is_position_sensitive(built):
    rng = np.random.default_rng(5)
    x = rng.standard_normal((1, 9, 32)).astype(np.float32)
    perm = np.roll(np.arange(9), 1)
    h = built.forward(ng.Tensor(x), mode="causal").data
    h_perm = built.forward(ng.Tensor(x[:, perm]), mode="causal").data
    assert not np.allclose(h_perm, h[:, perm], atol=1e-4)


def test_rope_table_position_zero_identity(built):
    cos, sin = built.rope_
    np.testing.assert_allclose(cos[0], np.ones_like(cos[0]))
    np.testing.assert_allclose(sin[0], np.zeros_like(sin[0]))


def test_extract_layer_matches_tap(built):
    rng = np.random.default_rng(6)
    x = ng.Tensor(rng.standard_normal((2, 7, 32)).astype(np.float32))
    _, taps = built.forward(x, mode="vit", return_layers=True)
    for i in range(built.n_layers):
        inp = x if i == 0 else taps[i - 1]
        out = built.extract_layer(i)(inp)
        np.testing.assert_allclose(out.data, taps[i].data, atol=1e-6)


def test_extract_layer_composition_reproduces_forward(built):
    rng = np.random.default_rng(7)
    x = ng.Tensor(rng.standard_normal((1, 5, 32)).astype(np.float32))
    h = built.forward(x, mode="vit").data
    y = x
    for i in range(built.n_layers):
        y = built.extract_layer(i)(y)
    composed = built.final_norm_(y).data
    np.testing.assert_allclose(composed, h, atol=1e-6)


def test_extract_layer_bounds(built):
    with pytest.raises(ValueError, match="out of range"):
        built.extract_layer(built.n_layers)


def test_extract_layer_does_not_modify_weights(built):
    digest = built.params_digest()
    layer = built.extract_layer(0)
    layer(ng.Tensor(np.zeros((1, 3, 32), np.float32)))
    assert built.params_digest() == digest


def test_structure_digest_same_for_random_and_pretrained():
    a = tiny_backbone(init="pretrained")
    b = tiny_backbone(init="random", seed=99)
    assert a.structure_digest() == b.structure_digest()
    assert a.params_digest() != b.params_digest()


def test_fit_reduces_perplexity_and_is_deterministic():
    text = corpus.generate_text(60_000, seed=1)
    a = tiny_backbone().fit(text)
    steps, ppls = zip(*a.perplexity_history_)
    assert ppls[-1] < 0.6 * ppls[0]
    b = tiny_backbone().fit(text)
    assert a.params_digest() == b.params_digest()
    assert a.perplexity_history_ == b.perplexity_history_


def test_corpus_too_small():
    with pytest.raises(ValueError, match="corpus too small"):
        tiny_backbone().fit("tiny")
