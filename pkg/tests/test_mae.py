import numpy as np
import pytest

from lm4lv import corpus
from lm4lv.mae import CrippledCodec, MaskedAutoencoderCodec, patchify, unpatchify


def tiny_codec(**kw):
    params = dict(image_size=16, patch_size=4, d_v=16, enc_layers=1, dec_layers=1,
                  heads=2, pretrain_epochs=2, pretrain_batch=16, pretrain_warmup=2,
                  finetune_epochs=2, finetune_batch=16, finetune_warmup=2, seed=0)
    params.update(kw)
    return MaskedAutoencoderCodec(**params)


@pytest.fixture(scope="module")
def images():
    return corpus.generate_images(48, size=16, seed=7)


# ---------------------------------------------------------------------------
# patch grid
# ---------------------------------------------------------------------------

def test_patchify_roundtrip_exact(images):
    patches = patchify(images, 4)
    back = unpatchify(patches, 4, 16)
    np.testing.assert_array_equal(back, images)


def test_patch_count(images):
    assert patchify(images, 4).shape == (len(images), 16, 48)


def test_patchify_raster_order():
    img = np.arange(8 * 8, dtype=np.float32).reshape(1, 8, 8, 1) / 64.0
    patches = patchify(img, 4)
    assert patches.shape == (1, 4, 16)
    # first patch is the top-left 4x4 block in row-major order
    np.testing.assert_array_equal(patches[0, 0], img[0, :4, :4, 0].reshape(-1))
    # second patch is the top-right block
    np.testing.assert_array_equal(patches[0, 1], img[0, :4, 4:, 0].reshape(-1))


def test_patchify_indivisible():
    with pytest.raises(ValueError, match="divisible"):
        patchify(np.zeros((1, 10, 10, 3), np.float32), 4)


# ---------------------------------------------------------------------------
# training contracts
# ---------------------------------------------------------------------------

def test_mask_ratio_zero_rejected(images):
    with pytest.raises(ValueError, match="mask_ratio"):
        tiny_codec(mask_ratio=0.0).fit(images)


def test_pretrain_loss_decreases_and_is_deterministic(images):
    first = tiny_codec().fit(images)
    second = tiny_codec().fit(images)
    losses = [h["loss"] for h in first.history_]
    assert losses[-1] < losses[0]
    assert [h["loss"] for h in second.history_] == losses
    assert first.encoder_digest() == second.encoder_digest()


def test_finetune_freezes_encoder(images):
    codec = tiny_codec().fit(images)
    digest = codec.encoder_digest()
    dec_digest_before = codec.state_arrays()["dec.head.w"].copy()
    codec.finetune(images)
    assert codec.encoder_digest() == digest
    assert not np.array_equal(codec.state_arrays()["dec.head.w"], dec_digest_before)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

def test_encode_shape_and_determinism(images):
    codec = tiny_codec().fit(images)
    feats = codec.transform(images[:4])
    assert feats.shape == (4, codec.n_tokens, codec.d_v)
    np.testing.assert_array_equal(feats, codec.transform(images[:4]))


def test_no_feature_collisions(images):
    codec = tiny_codec().fit(images)
    feats = codec.transform(images).reshape(len(images), -1)
    assert len({f.tobytes() for f in feats}) == len(images)


def test_decode_clamped_and_shaped(images):
    codec = tiny_codec().fit(images)
    out = codec.inverse_transform(codec.transform(images[:3]))
    assert out.shape == (3, 16, 16, 3)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_cls_flag_changes_token_count(images):
    with_cls = tiny_codec()
    without = tiny_codec(use_cls=False)
    assert with_cls.n_tokens == without.n_tokens + 1
    without.fit(images)
    assert without.transform(images[:2]).shape == (2, 16, without.d_v)


def test_masked_probe_empty_mask_is_plain_reconstruction(images):
    codec = tiny_codec().fit(images)
    plain = codec.reconstruct(images[:1])[0]
    probed = codec.masked_probe(images[0], np.zeros(codec.n_patches, bool))
    np.testing.assert_array_equal(probed, plain)


def test_masked_probe_changes_masked_regions(images):
    codec = tiny_codec().fit(images)
    mask = np.zeros(codec.n_patches, bool)
    mask[::3] = True
    probed = codec.masked_probe(images[0], mask)
    plain = codec.reconstruct(images[:1])[0]
    assert not np.array_equal(probed, plain)


# ---------------------------------------------------------------------------
# crippled codec
# ---------------------------------------------------------------------------

def test_crippled_quantize_idempotent(images):
    base = tiny_codec().fit(images)
    crippled = CrippledCodec(base, codebook_size=8, seed=0).calibrate(images)
    feats = crippled.transform(images[:4])
    np.testing.assert_array_equal(crippled.quantize(feats), feats)


def test_crippled_features_come_from_codebook(images):
    base = tiny_codec().fit(images)
    crippled = CrippledCodec(base, codebook_size=8, seed=0).calibrate(images)
    feats = crippled.transform(images[:4]).reshape(-1, base.d_v)
    book = {row.tobytes() for row in crippled.codebook_}
    assert all(row.tobytes() in book for row in feats)
