"""Core framework: linear adapters, task tokens, mixed-sequence assembly,
next-element-prediction training, and autoregressive generation.

A task is learned by optimizing only two linear adapters (feature space <->
backbone space) and a short trainable task-token sequence, while the vision
codec encoder and the text backbone stay frozen. Training unifies text and
visual positions: cross-entropy for the discrete marker tokens, l2 regression
for continuous visual features, summed with unit weights. Generation is
autoregressive: text tokens by argmax until the image-start marker appears,
then exactly L_vis visual steps whose outputs are fed back through the input
adapter, then the image-end marker is forced.
"""

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import imaging
from . import ndgrad as ng
from . import nn
from .backbone import SPECIALS
from .mae import patchify, unpatchify
from .validation import check_image_batch

TASK_KINDS = imaging.ALL_KINDS


class GenerationError(RuntimeError):
    """Raised when the image-start marker is not emitted within the guard."""


class FrozenContractError(AssertionError):
    """A component documented as frozen changed during training."""


def task_pair(clean, spec, index):
    """(model input, target) for one clean image under a task spec.

    Restoration tasks map degraded -> clean; spatial tasks map the original
    to the operated image; repetition maps the image to itself.
    """
    if spec.kind in imaging.RESTORATION_KINDS:
        return spec.apply(clean, index), clean
    return clean, spec.apply(clean, index)


def degraded_reference(clean, spec, index):
    """The 'degraded' image of the report: the model input for restoration
    tasks, and the operated image itself (= the target) for spatial tasks,
    which makes the encode-decode baseline the upper bound there."""
    return spec.apply(clean, index)


class AdapterParams:
    """The two trainable linear maps: d_v -> d_l in, d_l -> d_v out."""

    def __init__(self, d_v, d_l, seed=0):
        rng = np.random.default_rng((seed, 808))
        self.w_in = nn.Linear(rng, d_v, d_l)
        self.w_out = nn.Linear(rng, d_l, d_v)

    def named_params(self):
        return self.w_in.named_params("adapter.in") + self.w_out.named_params("adapter.out")

    def composed_matrix(self):
        """The square d_v x d_v feature-to-feature map of the two adapters."""
        return self.w_in.w.data @ self.w_out.w.data


@dataclass
class SequenceTemplate:
    """Index layout of one conversation and its per-position loss spec.

    Entry t of the masks/targets describes predicting element t+1 from the
    hidden state at position t (next-element prediction); the final position
    predicts nothing.
    """

    n_vis: int
    n_task: int
    length: int = field(init=False)
    lq_slice: slice = field(init=False)
    hq_slice: slice = field(init=False)
    prompt_len: int = field(init=False)

    def __post_init__(self):
        L, k = self.n_vis, self.n_task
        self.length = 2 * L + k + 6
        self.lq_slice = slice(2, 2 + L)
        self.hq_slice = slice(5 + L + k, 5 + 2 * L + k)
        # prompt = everything up to and including the assistant marker
        self.prompt_len = 4 + L + k

    def ce_targets_and_mask(self):
        tgt = np.zeros(self.length, dtype=np.intp)
        mask = np.zeros(self.length, dtype=np.float32)
        assistant_pos = 3 + self.n_vis + self.n_task
        tgt[assistant_pos] = SPECIALS.img_start
        mask[assistant_pos] = 1.0
        last_hq = self.hq_slice.stop - 1
        tgt[last_hq] = SPECIALS.img_end
        mask[last_hq] = 1.0
        return tgt, mask

    def l2_mask(self):
        mask = np.zeros(self.length, dtype=np.float32)
        # predictors of hq features: the assistant <Img> and all hq positions
        # except the last (which predicts </Img>)
        mask[self.hq_slice.start - 1:self.hq_slice.stop - 1] = 1.0
        return mask

    def masked_positions(self):
        """Number of loss-carrying predictor positions (= L_vis + 2)."""
        ce_mask = self.ce_targets_and_mask()[1]
        return int(ce_mask.sum() + self.l2_mask().sum())


def assemble(lq_feats, hq_feats, adapters, task_tokens, backbone):
    """Build (B, T, d_l) conversation embeddings from feature sequences.

    Layout: human, <Img>, LQ visual run, </Img>, task tokens, assistant,
    <Img>, HQ visual run, </Img>. Visual features pass through the input
    adapter; marker tokens come from the frozen embedding table; task tokens
    are inserted verbatim.
    """
    lq = ng.Tensor(lq_feats) if not isinstance(lq_feats, ng.Tensor) else lq_feats
    hq = ng.Tensor(hq_feats) if not isinstance(hq_feats, ng.Tensor) else hq_feats
    if lq.shape != hq.shape:
        raise ValueError(f"lq/hq feature shapes differ: {lq.shape} vs {hq.shape}")
    b, n_vis, _ = lq.shape
    k, d_l = task_tokens.shape
    s = SPECIALS

    def text(ids):
        return ng.broadcast_to(backbone.embed_ids(np.asarray([ids])), (b, len(ids), d_l))

    tokens = ng.broadcast_to(ng.reshape(task_tokens, (1, k, d_l)), (b, k, d_l))
    return ng.cat([
        text([s.human, s.img_start]),
        adapters.w_in(lq),
        text([s.img_end]),
        tokens,
        text([s.assistant, s.img_start]),
        adapters.w_in(hq),
        text([s.img_end]),
    ], axis=1)


def sequence_loss(backbone, adapters, embeddings, ce_targets, ce_mask,
                  l2_targets, l2_mask):
    """CE over masked text positions plus L2 over masked visual positions.

    Targets/masks are per position, tiled across the batch; visual targets
    are raw (pre-adapter) feature vectors. Either mask may be all zero, in
    which case that term contributes exactly 0.
    """
    b, t, _ = embeddings.shape
    hidden = backbone.forward(embeddings, mode="causal")
    logits = ng.reshape(backbone.logits(hidden), (b * t, backbone.vocab_size))
    ce = ng.cross_entropy(logits, np.tile(ce_targets, b), np.tile(ce_mask, b))
    pred = adapters.w_out(hidden)
    l2 = ng.mse_l2(pred, ng.Tensor(l2_targets), np.tile(l2_mask[None], (b, 1)))
    return ng.add(ce, l2), float(ce.data), float(l2.data)


class Lm4lvRestorer(BaseEstimator):
    """Frozen codec + frozen backbone + trainable adapters and task tokens.

    ``fit`` consumes clean images and trains one task; ``predict`` maps task
    inputs (degraded images for restoration, originals for spatial ops) to
    generated images.
    """

    def __init__(self, codec=None, backbone=None, task="noise", n_task_tokens=10,
                 epochs=2, batch_size=16, lr=3e-4, warmup=200,
                 degradation_seed=100, force_img_token=False, text_guard=8, seed=0):
        self.codec = codec
        self.backbone = backbone
        self.task = task
        self.n_task_tokens = n_task_tokens
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.degradation_seed = degradation_seed
        self.force_img_token = force_img_token
        self.text_guard = text_guard
        self.seed = seed

    # ------------------------------------------------------------------

    def degradation(self):
        return imaging.DegradationSpec(self.task, seed=self.degradation_seed)

    def _ensure_built(self):
        if hasattr(self, "adapters_"):
            return
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task {self.task!r} (expected one of {TASK_KINDS})")
        self.backbone._ensure_built()
        rng = np.random.default_rng((self.seed, 909))
        self.adapters_ = AdapterParams(self.codec.d_v, self.backbone.d_l, seed=self.seed)
        self.task_tokens_ = ng.Tensor(rng.normal(0, 0.02, (self.n_task_tokens, self.backbone.d_l)),
                                      requires_grad=True, dtype=np.float32)
        self.template_ = SequenceTemplate(self.codec.n_tokens, self.n_task_tokens)
        self.history_ = []

    def named_params(self):
        self._ensure_built()
        return self.adapters_.named_params() + [("task_tokens", self.task_tokens_)]

    def trainable_param_count(self):
        return sum(p.size for _, p in self.named_params())

    # ------------------------------------------------------------------
    # training
    # ------------------------------------------------------------------

    def fit(self, X, y=None, log=None):
        """Train adapters + task tokens on clean images (pairs built per task)."""
        self._ensure_built()
        X = check_image_batch(X)
        spec = self.degradation()
        inputs, targets = zip(*(task_pair(img, spec, i) for i, img in enumerate(X)))
        lq_feats = self.codec.transform(np.stack(inputs))
        hq_feats = self.codec.transform(np.stack(targets))

        backbone_digest = self.backbone.params_digest()
        encoder_digest = self.codec.encoder_digest()
        nn.set_requires_grad(self.backbone.named_params(), False)
        nn.set_requires_grad(self.codec.named_params(), False)

        tpl = self.template_
        ce_targets, ce_mask = tpl.ce_targets_and_mask()
        l2_mask = tpl.l2_mask()
        opt = ng.AdamW(self.named_params())
        rng = np.random.default_rng((self.seed, 1010))
        steps_total = nn.total_steps(len(X), self.batch_size, self.epochs)
        for epoch, step, idx in nn.iter_batches(len(X), self.batch_size, self.epochs, rng):
            emb = assemble(lq_feats[idx], hq_feats[idx], self.adapters_,
                           self.task_tokens_, self.backbone)
            l2_targets = np.zeros((len(idx), tpl.length, self.codec.d_v), np.float32)
            # position t regresses the raw next feature: hq_j sits at t+1
            l2_targets[:, tpl.hq_slice.start - 1:tpl.hq_slice.stop - 1] = hq_feats[idx]
            loss, ce_val, l2_val = sequence_loss(
                self.backbone, self.adapters_, emb, ce_targets, ce_mask,
                l2_targets, l2_mask)
            value = float(loss.data)
            if not np.isfinite(value):
                raise nn.DivergenceError(f"task training diverged at step {step}")
            loss.backward()
            lr = ng.warmup_cosine_lr(step, self.warmup, steps_total, self.lr)
            opt.step(lr)
            opt.zero_grad()
            record = {"stage": f"train[{self.task}]", "epoch": epoch, "step": step,
                      "loss": value, "ce": ce_val, "l2": l2_val, "lr": lr}
            self.history_.append(record)
            if log is not None:
                log(record)

        if self.backbone.params_digest() != backbone_digest:
            raise FrozenContractError("backbone parameters changed during task training")
        if self.codec.encoder_digest() != encoder_digest:
            raise FrozenContractError("codec encoder changed during task training")
        return self

    # ------------------------------------------------------------------
    # generation
    # ------------------------------------------------------------------

    def _prompt_embeddings(self, lq_feats):
        b = lq_feats.shape[0]
        d_l = self.backbone.d_l
        s = SPECIALS

        def text(ids):
            return ng.broadcast_to(self.backbone.embed_ids(np.asarray([ids])),
                                   (b, len(ids), d_l))

        tokens = ng.broadcast_to(ng.reshape(self.task_tokens_, (1, self.n_task_tokens, d_l)),
                                 (b, self.n_task_tokens, d_l))
        return ng.cat([
            text([s.human, s.img_start]),
            self.adapters_.w_in(ng.Tensor(lq_feats)),
            text([s.img_end]),
            tokens,
            text([s.assistant]),
        ], axis=1)

    def _argmax_next(self, emb_data):
        hidden = self.backbone.forward(ng.Tensor(emb_data), mode="causal")
        logits = self.backbone.logits(hidden).data[:, -1]
        return np.argmax(logits, axis=-1), hidden.data[:, -1]

    def _append_token_rows(self, emb_data, ids):
        rows = self.backbone.tok_emb_.data[np.asarray(ids)]
        return np.concatenate([emb_data, rows[:, None, :]], axis=1)

    def generate_features(self, lq_feats):
        """Autoregressive feature generation for a batch of LQ sequences.

        Returns (B, L_vis, d_v) raw features plus the number of text steps
        taken before the image-start marker appeared.
        """
        self._ensure_built()
        with ng.no_grad():
            emb = self._prompt_embeddings(lq_feats).data.copy()
            b = emb.shape[0]
            steps = 0
            if self.force_img_token:
                emb = self._append_token_rows(emb, [SPECIALS.img_start] * b)
            else:
                while True:
                    next_ids, _ = self._argmax_next(emb)
                    steps += 1
                    if np.all(next_ids == SPECIALS.img_start):
                        emb = self._append_token_rows(emb, [SPECIALS.img_start] * b)
                        break
                    if steps >= self.text_guard:
                        raise GenerationError(
                            f"image-start marker not emitted within {self.text_guard} steps")
                    emb = self._append_token_rows(emb, next_ids)
            feats = np.empty((b, self.codec.n_tokens, self.codec.d_v), np.float32)
            w_in, w_out = self.adapters_.w_in, self.adapters_.w_out
            for j in range(self.codec.n_tokens):
                hidden = self.backbone.forward(ng.Tensor(emb), mode="causal")
                last = hidden.data[:, -1:]
                f = w_out(ng.Tensor(last)).data
                feats[:, j] = f[:, 0]
                nxt = w_in(ng.Tensor(f)).data
                emb = np.concatenate([emb, nxt], axis=1)
            # image-end marker is forced here; it carries no pixels
        return feats, steps

    def predict(self, X, batch=32):
        """Generate output images for task inputs."""
        self._ensure_built()
        X = check_image_batch(X)
        out = np.empty_like(X)
        failures = []
        for lo in range(0, len(X), batch):
            lq = self.codec.transform(X[lo:lo + batch])
            try:
                feats, _ = self.generate_features(lq)
            except GenerationError:
                # retry one-by-one so a single stuck row fails alone
                feats = np.zeros((len(lq), self.codec.n_tokens, self.codec.d_v), np.float32)
                for i in range(len(lq)):
                    try:
                        feats[i:i + 1], _ = self.generate_features(lq[i:i + 1])
                    except GenerationError:
                        failures.append(lo + i)
            out[lo:lo + batch] = self.codec.inverse_transform(feats)
        self.generation_failures_ = failures
        return out


def mae_r_baseline(images, codec):
    """Encode-decode with no model in between: decode(encode(x))."""
    return codec.reconstruct(check_image_batch(images))


def misalignment_rate(outputs, targets, patch_size, threshold_db=3.0):
    """Fraction of outputs whose best cyclic patch shift beats aligned PSNR
    by more than ``threshold_db`` (order-integrity diagnostic)."""
    flagged = 0
    for out, tgt in zip(outputs, targets):
        aligned = imaging.psnr(out, tgt)
        patches = patchify(out[None], patch_size)
        best = -np.inf
        for shift in range(1, patches.shape[1]):
            rolled = unpatchify(np.roll(patches, shift, axis=1), patch_size,
                                out.shape[0], out.shape[2])[0]
            best = max(best, imaging.psnr(rolled, tgt))
        if best > aligned + threshold_db:
            flagged += 1
    return flagged / max(len(outputs), 1)


def evaluate(restorer, clean_images, compute_misalignment=True, predict_batch=32):
    """Three-column report: degraded / encode-decode baseline / generated.

    For restoration tasks the baseline input is the degraded image; for
    spatial tasks it is the operated image itself, making the baseline the
    reconstruction upper bound (and the degraded column infinite).
    """
    clean_images = check_image_batch(clean_images)
    spec = restorer.degradation()
    inputs, targets, refs = [], [], []
    for i, img in enumerate(clean_images):
        inp, tgt = task_pair(img, spec, i)
        inputs.append(inp)
        targets.append(tgt)
        refs.append(degraded_reference(img, spec, i))
    inputs, targets, refs = np.stack(inputs), np.stack(targets), np.stack(refs)

    generated = restorer.predict(inputs, batch=predict_batch)
    baseline = mae_r_baseline(refs, restorer.codec)

    degraded_rep = imaging.MetricReport.compare(refs, targets)
    maer_rep = imaging.MetricReport.compare(baseline, targets)
    ours_rep = imaging.MetricReport.compare(generated, targets)
    rate = (misalignment_rate(generated, targets, restorer.codec.patch_size)
            if compute_misalignment else 0.0)

    per_image = [{
        "index": i,
        "psnr_degraded": degraded_rep.psnr_values[i],
        "ssim_degraded": degraded_rep.ssim_values[i],
        "psnr_maer": maer_rep.psnr_values[i],
        "ssim_maer": maer_rep.ssim_values[i],
        "psnr_lm4lv": ours_rep.psnr_values[i],
        "ssim_lm4lv": ours_rep.ssim_values[i],
    } for i in range(len(clean_images))]
    summary = {
        "task": restorer.task,
        "n_images": len(clean_images),
        "psnr_degraded": degraded_rep.mean_psnr,
        "ssim_degraded": degraded_rep.mean_ssim,
        "psnr_maer": maer_rep.mean_psnr,
        "ssim_maer": maer_rep.mean_ssim,
        "psnr_lm4lv": ours_rep.mean_psnr,
        "ssim_lm4lv": ours_rep.mean_ssim,
        "delta_psnr": ours_rep.mean_psnr - maer_rep.mean_psnr,
        "delta_ssim": ours_rep.mean_ssim - maer_rep.mean_ssim,
        "misalignment_rate": rate,
        "generation_failures": len(getattr(restorer, "generation_failures_", [])),
    }
    return summary, per_image
