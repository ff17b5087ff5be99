"""Masked-autoencoder vision codec: frozen ViT encoder, lightweight decoder.

The codec is the bridge between pixel space and the feature sequences the
language backbone consumes. It is trained in two stages: masked pretraining
(L1 on masked patches only), then decoder-only fine-tuning with a full-image
L1 loss while the encoder stays frozen. After fine-tuning, ``transform``
yields the feature sequence and ``inverse_transform`` maps features back to
pixels.
"""

import numpy as np
from sklearn.base import BaseEstimator

from . import ndgrad as ng
from . import nn
from .validation import check_image, check_image_batch


def patchify(images, patch_size):
    """(N, H, W, C) -> (N, n_patches, patch_size**2 * C), raster order."""
    x = check_image_batch(images)
    n, h, w, c = x.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}x{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    x = x.reshape(n, gh, patch_size, gw, patch_size, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(n, gh * gw, patch_size * patch_size * c))


def unpatchify(patches, patch_size, image_size, channels=3):
    """Exact inverse of :func:`patchify`."""
    n, n_patches, dim = patches.shape
    grid = image_size // patch_size
    if n_patches != grid * grid or dim != patch_size * patch_size * channels:
        raise ValueError(f"patch grid {patches.shape} does not match image size {image_size}")
    x = patches.reshape(n, grid, grid, patch_size, patch_size, channels)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return np.ascontiguousarray(x.reshape(n, image_size, image_size, channels))


def gather_tokens(x, index_2d):
    """Per-sample gather: x (B, L, D), index (B, K) -> (B, K, D)."""
    b, length, d = x.shape
    flat = ng.reshape(x, (b * length, d))
    offsets = (np.arange(b)[:, None] * length + index_2d).reshape(-1)
    return ng.reshape(ng.index_select(flat, offsets, axis=0), (b, index_2d.shape[1], d))


class MaskedAutoencoderCodec(BaseEstimator):
    """Toy MAE codec with a scikit-learn style interface.

    ``fit`` runs masked pretraining, ``finetune`` adapts the decoder for
    full-image reconstruction (encoder frozen), ``transform`` encodes images
    to (L_vis, d_v) feature sequences and ``inverse_transform`` decodes them.
    """

    def __init__(self, image_size=32, patch_size=4, channels=3, d_v=64,
                 enc_layers=3, dec_layers=2, heads=4, mask_ratio=0.75, use_cls=True,
                 pretrain_epochs=12, pretrain_batch=128, pretrain_lr=1.5e-3,
                 pretrain_warmup=100, finetune_epochs=8, finetune_batch=128,
                 finetune_lr=1e-4 * (128 / 256), finetune_warmup=100, seed=0):
        self.image_size = image_size
        self.patch_size = patch_size
        self.channels = channels
        self.d_v = d_v
        self.enc_layers = enc_layers
        self.dec_layers = dec_layers
        self.heads = heads
        self.mask_ratio = mask_ratio
        self.use_cls = use_cls
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_batch = pretrain_batch
        self.pretrain_lr = pretrain_lr
        self.pretrain_warmup = pretrain_warmup
        self.finetune_epochs = finetune_epochs
        self.finetune_batch = finetune_batch
        self.finetune_lr = finetune_lr
        self.finetune_warmup = finetune_warmup
        self.seed = seed

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def n_patches(self):
        return self.grid * self.grid

    @property
    def n_tokens(self):
        """Feature sequence length L_vis."""
        return self.n_patches + (1 if self.use_cls else 0)

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    def _ensure_built(self):
        if hasattr(self, "enc_blocks_"):
            return
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by "
                             f"patch_size {self.patch_size}")
        rng = np.random.default_rng((self.seed, 101))
        d = self.d_v
        self.patch_embed_ = nn.Linear(rng, self.patch_dim, d)
        self.cls_token_ = ng.Tensor(rng.normal(0, 0.02, (1, 1, d)), requires_grad=True,
                                    dtype=np.float32)
        self.enc_blocks_ = [nn.Block(rng, d, self.heads) for _ in range(self.enc_layers)]
        self.enc_norm_ = nn.LayerNorm(d)
        self.dec_embed_ = nn.Linear(rng, d, d)
        self.mask_token_ = ng.Tensor(rng.normal(0, 0.02, (1, 1, d)), requires_grad=True,
                                     dtype=np.float32)
        self.dec_blocks_ = [nn.Block(rng, d, self.heads) for _ in range(self.dec_layers)]
        self.dec_norm_ = nn.LayerNorm(d)
        self.dec_head_ = nn.Linear(rng, d, self.patch_dim)
        grid_pos = nn.sincos_2d(self.grid, d)
        self.enc_pos_ = np.concatenate([np.zeros((1, d), np.float32), grid_pos]) \
            if self.use_cls else grid_pos
        self.dec_pos_ = self.enc_pos_.copy()
        self.history_ = []

    def encoder_named_params(self):
        self._ensure_built()
        out = self.patch_embed_.named_params("enc.patch")
        if self.use_cls:
            out.append(("enc.cls", self.cls_token_))
        for i, blk in enumerate(self.enc_blocks_):
            out += blk.named_params(f"enc.block{i}")
        out += self.enc_norm_.named_params("enc.norm")
        return out

    def decoder_named_params(self):
        self._ensure_built()
        out = self.dec_embed_.named_params("dec.embed")
        out.append(("dec.mask_token", self.mask_token_))
        for i, blk in enumerate(self.dec_blocks_):
            out += blk.named_params(f"dec.block{i}")
        out += self.dec_norm_.named_params("dec.norm")
        out += self.dec_head_.named_params("dec.head")
        return out

    def named_params(self):
        return self.encoder_named_params() + self.decoder_named_params()

    def encoder_digest(self):
        return nn.params_digest(self.encoder_named_params())

    # ------------------------------------------------------------------
    # forward pieces
    # ------------------------------------------------------------------

    def _embed_patches(self, images):
        patches = patchify(images, self.patch_size)
        x = self.patch_embed_(ng.Tensor(patches))
        pos = self.enc_pos_[1:] if self.use_cls else self.enc_pos_
        return ng.add(x, ng.Tensor(pos)), patches

    def _encode_tokens(self, x):
        """Run encoder blocks over (B, K, d_v) tokens (cls already attached)."""
        for blk in self.enc_blocks_:
            x = blk(x)
        return self.enc_norm_(x)

    def _attach_cls(self, x):
        if not self.use_cls:
            return x
        b = x.shape[0]
        cls = ng.broadcast_to(self.cls_token_, (b, 1, self.d_v))
        return ng.cat([cls, x], axis=1)

    def _decode_tokens(self, tokens):
        """tokens: (B, L_vis, d_v) decoder-space sequence, pre position add."""
        x = ng.add(tokens, ng.Tensor(self.dec_pos_))
        for blk in self.dec_blocks_:
            x = blk(x)
        x = self.dec_norm_(x)
        if self.use_cls:
            x = ng.index_select(x, np.arange(1, self.n_tokens), axis=1)
        return self.dec_head_(x)

    # ------------------------------------------------------------------
    # training stages
    # ------------------------------------------------------------------

    def fit(self, X, y=None, log=None):
        """Masked pretraining of encoder+decoder (L1 on masked patches only)."""
        self._ensure_built()
        if not (0.0 < self.mask_ratio < 1.0):
            raise ValueError(f"mask_ratio must be in (0, 1), got {self.mask_ratio} "
                             "(0 would leave the masked-only loss undefined)")
        X = check_image_batch(X)
        keep = max(1, int(round(self.n_patches * (1.0 - self.mask_ratio))))
        rng = np.random.default_rng((self.seed, 202))
        opt = ng.AdamW(self.named_params())
        steps_total = nn.total_steps(len(X), self.pretrain_batch, self.pretrain_epochs)
        for epoch, step, idx in nn.iter_batches(len(X), self.pretrain_batch,
                                                self.pretrain_epochs, rng):
            x, patches = self._embed_patches(X[idx])
            perms = np.stack([rng.permutation(self.n_patches) for _ in idx])
            kept = ng.reshape(gather_tokens(x, perms[:, :keep]), (len(idx), keep, self.d_v))
            enc_out = self._encode_tokens(self._attach_cls(kept))
            dec_in = self.dec_embed_(enc_out)
            if self.use_cls:
                cls_dec = ng.index_select(dec_in, [0], axis=1)
                dec_in = ng.index_select(dec_in, np.arange(1, keep + 1), axis=1)
            masks = ng.broadcast_to(self.mask_token_,
                                    (len(idx), self.n_patches - keep, self.d_v))
            shuffled = ng.cat([dec_in, masks], axis=1)
            restored = gather_tokens(shuffled, np.argsort(perms, axis=1))
            if self.use_cls:
                restored = ng.cat([cls_dec, restored], axis=1)
            pred = self._decode_tokens(restored)
            loss_mask = np.ones((len(idx), self.n_patches), np.float32)
            np.put_along_axis(loss_mask, perms[:, :keep], 0.0, axis=1)
            loss = ng.l1_masked(pred, ng.Tensor(patches), loss_mask)
            self._step(opt, loss, step, steps_total, self.pretrain_lr,
                       self.pretrain_warmup, "pretrain", epoch, log)
        return self

    def finetune(self, X, log=None):
        """Decoder-only fine-tuning with full-image L1; encoder stays frozen."""
        self._ensure_built()
        X = check_image_batch(X)
        enc_digest = self.encoder_digest()
        nn.set_requires_grad(self.encoder_named_params(), False)
        rng = np.random.default_rng((self.seed, 303))
        opt = ng.AdamW(self.decoder_named_params())
        steps_total = nn.total_steps(len(X), self.finetune_batch, self.finetune_epochs)
        for epoch, step, idx in nn.iter_batches(len(X), self.finetune_batch,
                                                self.finetune_epochs, rng):
            x, patches = self._embed_patches(X[idx])
            enc_out = self._encode_tokens(self._attach_cls(x))
            pred = self._decode_tokens(self.dec_embed_(enc_out))
            loss = ng.l1_masked(pred, ng.Tensor(patches),
                                np.ones((len(idx), self.n_patches), np.float32))
            self._step(opt, loss, step, steps_total, self.finetune_lr,
                       self.finetune_warmup, "finetune", epoch, log)
        nn.set_requires_grad(self.encoder_named_params(), True)
        if self.encoder_digest() != enc_digest:
            raise AssertionError("encoder parameters changed during decoder fine-tuning")
        return self

    def _step(self, opt, loss, step, steps_total, base_lr, warmup, stage, epoch, log):
        value = float(loss.data)
        if not np.isfinite(value):
            raise nn.DivergenceError(f"{stage}: loss diverged at step {step}")
        loss.backward()
        lr = ng.warmup_cosine_lr(step, warmup, steps_total, base_lr)
        opt.step(lr)
        opt.zero_grad()
        record = {"stage": stage, "epoch": epoch, "step": step, "loss": value, "lr": lr}
        self.history_.append(record)
        if log is not None:
            log(record)

    # ------------------------------------------------------------------
    # inference
    # ------------------------------------------------------------------

    def transform(self, X, batch=256):
        """Encode images to feature sequences, (N, L_vis, d_v)."""
        self._ensure_built()
        X = check_image_batch(X)
        out = np.empty((len(X), self.n_tokens, self.d_v), np.float32)
        with ng.no_grad():
            for lo in range(0, len(X), batch):
                x, _ = self._embed_patches(X[lo:lo + batch])
                out[lo:lo + batch] = self._encode_tokens(self._attach_cls(x)).data
        return out

    def inverse_transform(self, features, batch=256):
        """Decode feature sequences to images clamped to [0, 1]."""
        self._ensure_built()
        features = np.asarray(features, np.float32)
        if features.ndim == 2:
            features = features[None]
        if features.shape[1:] != (self.n_tokens, self.d_v):
            raise ValueError(f"expected features (*, {self.n_tokens}, {self.d_v}), "
                             f"got {features.shape}")
        images = np.empty((len(features), self.image_size, self.image_size,
                           self.channels), np.float32)
        with ng.no_grad():
            for lo in range(0, len(features), batch):
                pred = self._decode_tokens(self.dec_embed_(ng.Tensor(features[lo:lo + batch])))
                images[lo:lo + batch] = unpatchify(np.clip(pred.data, 0.0, 1.0),
                                                   self.patch_size, self.image_size,
                                                   self.channels)
        return images

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def masked_probe(self, image, patch_mask):
        """Decode with selected patch tokens replaced by the mask embedding.

        ``patch_mask`` is a boolean (n_patches,) array; True positions are
        replaced after the decoder embedding, mirroring pretraining.
        """
        self._ensure_built()
        image = check_image(image)
        patch_mask = np.asarray(patch_mask, bool)
        features = self.transform(image[None])
        with ng.no_grad():
            dec_in = self.dec_embed_(ng.Tensor(features)).data.copy()
        offset = 1 if self.use_cls else 0
        dec_in[0, offset:][patch_mask] = self.mask_token_.data[0, 0]
        with ng.no_grad():
            pred = self._decode_tokens(ng.Tensor(dec_in))
        return unpatchify(np.clip(pred.data, 0.0, 1.0), self.patch_size,
                          self.image_size, self.channels)[0]

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_arrays(self, arrays):
        self._ensure_built()
        from .checkpoint import load_params
        load_params(self.named_params(), arrays)
        return self


class CrippledCodec:
    """Vision codec whose features are quantized to a small random codebook.

    Stands in for codecs that are poor visual-sequence learners: repetition
    stays learnable but spatial reasoning over the features degrades. Only
    ``transform`` differs from the wrapped codec.
    """

    def __init__(self, base, codebook_size=24, seed=0):
        self.base = base
        self.codebook_size = codebook_size
        self.seed = seed

    @property
    def n_tokens(self):
        return self.base.n_tokens

    @property
    def d_v(self):
        return self.base.d_v

    @property
    def image_size(self):
        return self.base.image_size

    @property
    def patch_size(self):
        return self.base.patch_size

    def calibrate(self, X):
        """Draw the random codebook in the statistics of real features."""
        feats = self.base.transform(X).reshape(-1, self.base.d_v)
        rng = np.random.default_rng((self.seed, 404))
        noise = rng.standard_normal((self.codebook_size, self.base.d_v)).astype(np.float32)
        self.codebook_ = feats.mean(0) + noise * feats.std(0)
        return self

    def quantize(self, features):
        flat = features.reshape(-1, self.base.d_v)
        d2 = ((flat[:, None, :] - self.codebook_[None]) ** 2).sum(-1)
        return self.codebook_[np.argmin(d2, axis=1)].reshape(features.shape)

    def transform(self, X, batch=256):
        return self.quantize(self.base.transform(X, batch=batch))

    def inverse_transform(self, features, batch=256):
        return self.base.inverse_transform(features, batch=batch)

    def reconstruct(self, X):
        return self.inverse_transform(self.transform(X))

    def encoder_digest(self):
        return self.base.encoder_digest()
