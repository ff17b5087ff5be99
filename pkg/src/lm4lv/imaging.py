"""Image degradations, spatial operations, quality metrics, and PPM/PGM io.

Images are (H, W, C) float arrays with intensities in [0, 1], C in {1, 3}.
Degradations sample their severity per image from fixed uniform ranges; the
random stream is derived from (seed, image index) so corpora regenerate
bit-identically, serially or in parallel.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .validation import check_image, check_same_shape

NOISE_SIGMA_MAX = 50.0 / 255.0
BLUR_WINDOWS = (1, 3, 5, 7)
RAIN_COUNT_MAX = 20
RAIN_ALPHA = 0.8
RAIN_ANGLE_DEG = 45.0
RAIN_MIN_LENGTH = 8.0
PEPPER_MAX = 0.1
MASK_BLOCK = 4
MASK_RATE = 0.1

RESTORATION_KINDS = ("noise", "blur", "rain", "pepper", "mask")
SPATIAL_KINDS = ("rotate", "flip")
ALL_KINDS = RESTORATION_KINDS + SPATIAL_KINDS + ("repeat",)


# ---------------------------------------------------------------------------
# degradations
# ---------------------------------------------------------------------------

def degrade_noise(img, rng, sigma_range=(0.0, NOISE_SIGMA_MAX)):
    """Additive zero-mean Gaussian noise, sigma ~ U[sigma_range], clamped."""
    img = check_image(img)
    sigma = rng.uniform(*sigma_range)
    if sigma == 0.0:
        return img.copy()
    noisy = img + rng.normal(0.0, sigma, img.shape)
    return np.clip(noisy, 0.0, 1.0).astype(img.dtype)


def gaussian_kernel(window):
    """Normalized 2-d Gaussian, sigma = 0.3*((window-1)/2 - 1) + 0.8."""
    if window == 1:
        return np.ones((1, 1))
    sigma = 0.3 * ((window - 1) / 2.0 - 1.0) + 0.8
    ax = np.arange(window) - (window - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def degrade_blur(img, rng, windows=BLUR_WINDOWS):
    """Gaussian blur with window size drawn uniformly from ``windows``."""
    img = check_image(img)
    window = int(rng.choice(windows))
    if window == 1:
        return img.copy()
    kernel = gaussian_kernel(window)
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.convolve(img[:, :, c], kernel, mode="reflect")
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def _streak_pixels(height, width, cy, cx, angle_deg, length):
    """Pixels of a 1px-wide line segment centered at (cy, cx)."""
    theta = math.radians(angle_deg)
    dy, dx = math.cos(theta), math.sin(theta)
    pixels = set()
    t = -length / 2.0
    while t <= length / 2.0:
        y, x = int(round(cy + t * dy)), int(round(cx + t * dx))
        if 0 <= y < height and 0 <= x < width:
            pixels.add((y, x))
        t += 0.5
    return pixels


def degrade_rain(img, rng, count_range=(0, RAIN_COUNT_MAX), alpha=RAIN_ALPHA,
                 angle_range=(-RAIN_ANGLE_DEG, RAIN_ANGLE_DEG), length_range=None):
    """Alpha-blend N ~ U{count_range} white streaks at random angles/positions."""
    img = check_image(img)
    h, w = img.shape[:2]
    if length_range is None:
        length_range = (RAIN_MIN_LENGTH, h / 2.0)
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    out = img.copy()
    for _ in range(n):
        cy = rng.uniform(0, h)
        cx = rng.uniform(0, w)
        angle = rng.uniform(*angle_range)
        length = rng.uniform(*length_range)
        for y, x in _streak_pixels(h, w, cy, cx, angle, length):
            out[y, x] = (1.0 - alpha) * out[y, x] + alpha
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def degrade_pepper(img, rng, p_range=(0.0, PEPPER_MAX)):
    """Each pixel (all channels together) set to black with probability p."""
    img = check_image(img)
    p = rng.uniform(*p_range)
    drop = rng.random(img.shape[:2]) < p
    out = img.copy()
    out[drop] = 0.0
    return out


def degrade_mask(img, rng, rate=MASK_RATE, block=MASK_BLOCK):
    """Black out ``block`` x ``block`` pixel blocks independently at ``rate``."""
    img = check_image(img)
    h, w = img.shape[:2]
    if h % block or w % block:
        raise ValueError(f"image {h}x{w} not divisible by block size {block}")
    drop = rng.random((h // block, w // block)) < rate
    full = np.kron(drop, np.ones((block, block), dtype=bool))
    out = img.copy()
    out[full] = 0.0
    return out


def op_rotate(img):
    """Rotate a square image 90 degrees clockwise."""
    img = check_image(img)
    if img.shape[0] != img.shape[1]:
        raise ValueError(f"rotation requires a square image, got {img.shape[:2]}")
    return np.ascontiguousarray(np.rot90(img, k=-1, axes=(0, 1)))


def op_flip(img):
    """Mirror horizontally."""
    img = check_image(img)
    return np.ascontiguousarray(img[:, ::-1])


_DEGRADE_FNS = {
    "noise": degrade_noise,
    "blur": degrade_blur,
    "rain": degrade_rain,
    "pepper": degrade_pepper,
    "mask": degrade_mask,
}


@dataclass
class DegradationSpec:
    """One task's corruption: kind, per-kind parameter overrides, seed.

    Severity parameters are sampled per image from the stream derived from
    (seed, image index); forcing a range to a point pins the severity.
    """

    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown degradation kind {self.kind!r} (expected one of {ALL_KINDS})")

    def rng_for(self, index):
        return np.random.default_rng((self.seed, int(index)))

    def apply(self, img, index):
        """Produce the degraded/operated image for position ``index``."""
        if self.kind == "rotate":
            return op_rotate(img)
        if self.kind == "flip":
            return op_flip(img)
        if self.kind == "repeat":
            return check_image(img).copy()
        return _DEGRADE_FNS[self.kind](img, self.rng_for(index), **self.params)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def psnr(a, b):
    """10*log10(1/MSE) against MAX=1.0; +infinity when the images are equal."""
    a, b = check_image(a), check_image(b)
    check_same_shape(a, b, "psnr")
    mse = float(np.mean((a.astype(np.float64) - b.astype(np.float64)) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def luminance(img):
    img = check_image(img)
    if img.shape[2] == 1:
        return img[:, :, 0].astype(np.float64)
    weights = np.array([0.299, 0.587, 0.114])
    return img.astype(np.float64) @ weights


def _ssim_window(sigma=1.5, size=11):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Mean local SSIM on luminance, Gaussian 11x11 window, valid region only."""
    a, b = check_image(a), check_image(b)
    check_same_shape(a, b, "ssim")
    x, y = luminance(a), luminance(b)
    h, w = x.shape
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than SSIM window {size}")
    kernel = _ssim_window(sigma, size)

    def filt(z):
        wins = np.lib.stride_tricks.sliding_window_view(z, (size, size))
        return np.tensordot(wins, kernel, axes=([2, 3], [0, 1]))

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x * mu_x
    var_y = filt(y * y) - mu_y * mu_y
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM values plus their means."""

    psnr_values: list
    ssim_values: list

    @property
    def mean_psnr(self):
        return float(np.mean(self.psnr_values))

    @property
    def mean_ssim(self):
        return float(np.mean(self.ssim_values))

    @classmethod
    def compare(cls, outputs, targets):
        pairs = list(zip(outputs, targets))
        return cls([psnr(o, t) for o, t in pairs], [ssim(o, t) for o, t in pairs])


# ---------------------------------------------------------------------------
# 8-bit binary PPM (P6) / PGM (P5)
# ---------------------------------------------------------------------------

def write_image(path, img):
    """Write as binary PGM (1 channel) or PPM (3 channels), maxval 255."""
    img = check_image(img)
    magic = b"P5" if img.shape[2] == 1 else b"P6"
    data = np.rint(img * 255.0).astype(np.uint8)
    if img.shape[2] == 1:
        data = data[:, :, 0]
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (img.shape[1], img.shape[0]))
        f.write(data.tobytes())


def _read_header_tokens(f, count):
    """Read whitespace-separated header tokens, skipping # comments."""
    tokens = []
    while len(tokens) < count:
        ch = f.read(1)
        if not ch:
            raise ValueError("truncated PPM/PGM header")
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        if ch.isspace():
            continue
        token = ch
        while True:
            ch = f.read(1)
            if not ch or ch.isspace():
                break
            token += ch
        tokens.append(token)
    return tokens


def read_image(path):
    """Read binary PGM/PPM; intensities map linearly to [0, 1] float32."""
    with open(path, "rb") as f:
        magic = f.read(2)
        if magic not in (b"P5", b"P6"):
            raise ValueError(f"{path}: not a binary PGM/PPM file (magic {magic!r})")
        channels = 1 if magic == b"P5" else 3
        width, height, maxval = (int(t) for t in _read_header_tokens(f, 3))
        if maxval != 255:
            raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
        raw = f.read(width * height * channels)
        if len(raw) != width * height * channels:
            raise ValueError(f"{path}: truncated pixel data")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(height, width, channels)
    return (arr.astype(np.float32) / 255.0)
