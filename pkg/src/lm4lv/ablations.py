"""Control experiments attributing capability to the frozen backbone, plus
the scaled-identity diagnostics of the trained adapters.

All ablation models share one trainer shape: map LQ feature sequences to HQ
feature sequences directly (single forward, l2 loss), so comparisons against
the autoregressive framework are ceteris paribus given the same corpus,
codec, and evaluation protocol.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import imaging
from . import ndgrad as ng
from . import nn
from .core import task_pair
from .validation import check_image_batch


class ParameterParityError(RuntimeError):
    """Expert trainable-parameter count strays beyond the allowed 5%."""


# ---------------------------------------------------------------------------
# direct feature-to-feature models
# ---------------------------------------------------------------------------

class _DirectFeatureModel:
    """Shared trainer: lq features -> hq features with an l2 objective."""

    def __init__(self, codec, task="noise", epochs=2, batch_size=16, lr=3e-4,
                 warmup=200, degradation_seed=100, seed=0):
        self.codec = codec
        self.task = task
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.warmup = warmup
        self.degradation_seed = degradation_seed
        self.seed = seed
        self.history_ = []

    def degradation(self):
        return imaging.DegradationSpec(self.task, seed=self.degradation_seed)

    def apply_features(self, x):
        raise NotImplementedError

    def named_params(self):
        raise NotImplementedError

    def trainable_param_count(self):
        return sum(p.size for _, p in self.named_params() if p.requires_grad)

    def fit(self, X, y=None, log=None):
        X = check_image_batch(X)
        spec = self.degradation()
        inputs, targets = zip(*(task_pair(img, spec, i) for i, img in enumerate(X)))
        lq = self.codec.transform(np.stack(inputs))
        hq = self.codec.transform(np.stack(targets))
        trainable = [(n, p) for n, p in self.named_params() if p.requires_grad]
        opt = ng.AdamW(trainable)
        rng = np.random.default_rng((self.seed, 1111))
        steps_total = nn.total_steps(len(X), self.batch_size, self.epochs)
        ones = None
        for epoch, step, idx in nn.iter_batches(len(X), self.batch_size, self.epochs, rng):
            pred = self.apply_features(ng.Tensor(lq[idx]))
            if ones is None or ones.shape[0] != len(idx):
                ones = np.ones((len(idx), lq.shape[1]), np.float32)
            loss = ng.mse_l2(pred, ng.Tensor(hq[idx]), ones)
            value = float(loss.data)
            if not np.isfinite(value):
                raise nn.DivergenceError(f"{type(self).__name__} diverged at step {step}")
            loss.backward()
            lr = ng.warmup_cosine_lr(step, self.warmup, steps_total, self.lr)
            opt.step(lr)
            opt.zero_grad()
            record = {"stage": type(self).__name__, "epoch": epoch, "step": step,
                      "loss": value, "lr": lr}
            self.history_.append(record)
            if log is not None:
                log(record)
        return self

    def predict(self, X, batch=256):
        X = check_image_batch(X)
        out = np.empty_like(X)
        with ng.no_grad():
            for lo in range(0, len(X), batch):
                feats = self.codec.transform(X[lo:lo + batch])
                pred = self.apply_features(ng.Tensor(feats)).data
                out[lo:lo + batch] = self.codec.inverse_transform(pred)
        return out


class LinearFeatureMap(_DirectFeatureModel):
    """A single d_v -> d_v linear map shared across visual positions."""

    def __init__(self, codec, identity_init=False, **kw):
        super().__init__(codec, **kw)
        rng = np.random.default_rng((self.seed, 1212))
        self.w = nn.Linear(rng, codec.d_v, codec.d_v)
        if identity_init:
            self.w.w.data[...] = np.eye(codec.d_v, dtype=np.float32)

    def apply_features(self, x):
        return self.w(x)

    def named_params(self):
        return self.w.named_params("linear")


class ExpertModel(_DirectFeatureModel):
    """Expert replacing the backbone: 2-layer MLP or 1-layer transformer.

    The hidden width is solved so the trainable parameter count matches a
    reference count (the framework's adapters + task tokens) within 5%;
    construction aborts when parity cannot be met.
    """

    def __init__(self, codec, kind, reference_param_count, heads=4, **kw):
        super().__init__(codec, **kw)
        if kind not in ("mlp2", "transformer1"):
            raise ValueError(f"unknown expert kind {kind!r}")
        self.kind = kind
        self.reference_param_count = reference_param_count
        rng = np.random.default_rng((self.seed, 1313))
        d = codec.d_v
        if kind == "mlp2":
            hidden = max(1, round((reference_param_count - d) / (2 * d + 1)))
            self.fc1 = nn.Linear(rng, d, hidden)
            self.fc2 = nn.Linear(rng, hidden, d)
        else:
            fixed = 4 * d * d + 9 * d  # attention qkvo with biases + two norms
            hidden = max(1, round((reference_param_count - fixed) / (2 * d + 1)))
            self.block = nn.Block(rng, d, heads)
            self.block.mlp = nn.Mlp(rng, d, hidden=hidden)
        count = self.trainable_param_count()
        drift = abs(count - reference_param_count) / reference_param_count
        if drift > 0.05:
            raise ParameterParityError(
                f"{kind}: {count} trainable params vs reference "
                f"{reference_param_count} ({drift:.1%} off)")

    def apply_features(self, x):
        if self.kind == "mlp2":
            return self.fc2(ng.gelu(self.fc1(x)))
        return self.block(x, causal=False, rope=None)

    def named_params(self):
        if self.kind == "mlp2":
            return self.fc1.named_params("expert.fc1") + self.fc2.named_params("expert.fc2")
        return self.block.named_params("expert.block")


class LayerProbe(_DirectFeatureModel):
    """Trainable linear in/out around one frozen middle: a single backbone
    layer (no mask, no positions), a frozen random MLP, or identity."""

    def __init__(self, codec, backbone, middle="layer", layer_index=0, **kw):
        super().__init__(codec, **kw)
        rng = np.random.default_rng((self.seed, 1414))
        self.w_in = nn.Linear(rng, codec.d_v, backbone.d_l)
        self.w_out = nn.Linear(rng, backbone.d_l, codec.d_v)
        self.middle = middle
        self.layer_index = layer_index
        if middle == "layer":
            self._mid = backbone.extract_layer(layer_index)
        elif middle == "mlp":
            ln = nn.LayerNorm(backbone.d_l)
            mlp = nn.Mlp(rng, backbone.d_l)
            nn.set_requires_grad(ln.named_params("x") + mlp.named_params("x"), False)
            self._mid = lambda x: ng.add(x, mlp(ln(x)))
        elif middle == "identity":
            self._mid = lambda x: x
        else:
            raise ValueError(f"unknown middle {middle!r}")

    def apply_features(self, x):
        return self.w_out(self._mid(self.w_in(x)))

    def named_params(self):
        return self.w_in.named_params("probe.in") + self.w_out.named_params("probe.out")


class VitLlmModel(_DirectFeatureModel):
    """Single-forward use of the frozen backbone: causal mask and rotary
    embedding canceled, adapters trained, every LQ position mapped to the
    HQ position directly (no autoregression, no task tokens)."""

    def __init__(self, codec, backbone, **kw):
        super().__init__(codec, **kw)
        rng = np.random.default_rng((self.seed, 1515))
        self.backbone = backbone
        self.w_in = nn.Linear(rng, codec.d_v, backbone.d_l)
        self.w_out = nn.Linear(rng, backbone.d_l, codec.d_v)
        nn.set_requires_grad(backbone.named_params(), False)

    def apply_features(self, x):
        hidden = self.backbone.forward(self.w_in(x), mode="vit")
        return self.w_out(hidden)

    def named_params(self):
        return (self.w_in.named_params("vit.in") + self.w_out.named_params("vit.out")
                + self.backbone.named_params())


# ---------------------------------------------------------------------------
# identity-mapping diagnostics
# ---------------------------------------------------------------------------

@dataclass
class IdentityMetrics:
    """Distance of a square map to the nearest scaled identity.

    ``l_value`` is the 1/n^2-normalized minimal squared distance to alpha*I
    (the minimizing alpha is the diagonal mean); ``d_value`` is the mean
    |diagonal / off-diagonal| ratio with exact-zero denominators excluded
    and counted (all-zero off-diagonals give +infinity).
    """

    l_value: float
    d_value: float
    alpha_star: float
    n: int
    zero_denominators: int


def scaled_identity_metrics(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"expected a square matrix, got {a.shape}")
    n = a.shape[0]
    diag = np.diag(a)
    alpha = float(diag.mean())
    off_mask = ~np.eye(n, dtype=bool)
    l_value = float((a[off_mask] ** 2).sum() + ((diag - alpha) ** 2).sum()) / (n * n)
    denom = a[off_mask]
    numer = np.repeat(diag, n - 1)
    nonzero = denom != 0.0
    zero_count = int((~nonzero).sum())
    if nonzero.sum() == 0:
        d_value = math.inf
    else:
        d_value = float(np.abs(numer[nonzero] / denom[nonzero]).mean())
    return IdentityMetrics(l_value, d_value, alpha, n, zero_count)


def identity_metrics(w_in, w_out):
    """Metrics of the composed feature-space map of the two adapter matrices.

    ``w_in`` is (d_v, d_l) and ``w_out`` is (d_l, d_v) in row-vector
    convention, so the composition acting on features is w_in @ w_out.
    """
    w_in = np.asarray(w_in)
    w_out = np.asarray(w_out)
    a = w_in @ w_out
    if a.shape[0] != a.shape[1]:
        raise ValueError(f"composed map is not square: {a.shape}")
    return scaled_identity_metrics(a)


def expected_l_random(n):
    """E[L] for an n x n standard-normal matrix: 1 - 1/n^2."""
    return 1.0 - 1.0 / (n * n)


def cauchy_abs_mean(n_samples, seed):
    """Mean |x/y| over n iid standard-normal pairs, exact-zero y excluded."""
    rng = np.random.default_rng((seed, 1616))
    x = rng.standard_normal(n_samples)
    y = rng.standard_normal(n_samples)
    keep = y != 0.0
    return float(np.abs(x[keep] / y[keep]).mean())


def cauchy_expectation(n_samples, seeds=range(10)):
    """Empirical mean of the half-Cauchy sample mean across seeds.

    The underlying expectation diverges, so the per-seed values spread
    widely; both the per-seed means and their dispersion are reported.
    """
    means = [cauchy_abs_mean(n_samples, s) for s in seeds]
    return {"means": means, "mean": float(np.mean(means)), "std": float(np.std(means))}


# ---------------------------------------------------------------------------
# output texture diagnostic
# ---------------------------------------------------------------------------

def blockiness(img, patch_size):
    """Mean absolute jump across patch boundaries minus within patches.

    Large positive values indicate visible patch seams."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    col_jumps = np.abs(np.diff(img, axis=1)).mean(axis=(0, 2))
    row_jumps = np.abs(np.diff(img, axis=0)).mean(axis=(1, 2))
    col_boundary = np.arange(w - 1) % patch_size == patch_size - 1
    row_boundary = np.arange(h - 1) % patch_size == patch_size - 1
    boundary = np.concatenate([col_jumps[col_boundary], row_jumps[row_boundary]]).mean()
    within = np.concatenate([col_jumps[~col_boundary], row_jumps[~row_boundary]]).mean()
    return float(boundary - within)


def mean_blockiness(images, patch_size):
    return float(np.mean([blockiness(img, patch_size) for img in images]))
