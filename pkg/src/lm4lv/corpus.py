"""Self-contained corpora: procedural toy images and synthetic text.

Both generators are deterministic per (seed, index) so corpora can be built
in parallel or regenerated piecewise without changing a single byte.
"""

import json
import os

import numpy as np

from . import imaging

# ---------------------------------------------------------------------------
# toy images: colored gradients, geometric shapes, periodic textures
# ---------------------------------------------------------------------------


def _gradient(rng, size):
    ys, xs = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size), indexing="ij")
    angle = rng.uniform(0, 2 * np.pi)
    t = np.cos(angle) * xs + np.sin(angle) * ys
    t = (t - t.min()) / max(t.max() - t.min(), 1e-9)
    c0, c1 = rng.random(3), rng.random(3)
    return c0[None, None, :] + (c1 - c0)[None, None, :] * t[:, :, None]


def _shape_mask(rng, size):
    ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    kind = rng.integers(0, 3)
    if kind == 0:  # rectangle
        y0, x0 = rng.integers(0, size - 4, 2)
        y1 = rng.integers(y0 + 3, min(y0 + size // 2 + 3, size))
        x1 = rng.integers(x0 + 3, min(x0 + size // 2 + 3, size))
        return (ys >= y0) & (ys < y1) & (xs >= x0) & (xs < x1)
    if kind == 1:  # disk
        cy, cx = rng.uniform(4, size - 4, 2)
        r = rng.uniform(3, size / 3)
        return (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
    # diagonal stripes
    period = rng.integers(3, 9)
    direction = rng.integers(0, 3)
    coord = (ys, xs, ys + xs)[direction]
    return (coord // period) % 2 == 0


def generate_image(rng, size=32):
    """One toy image: gradient background, 1-3 blended shapes, mild texture."""
    img = _gradient(rng, size)
    for _ in range(rng.integers(1, 4)):
        mask = _shape_mask(rng, size)
        color = rng.random(3)
        alpha = rng.uniform(0.6, 1.0)
        img[mask] = (1 - alpha) * img[mask] + alpha * color
    if rng.random() < 0.5:
        freq = rng.uniform(0.2, 0.9)
        phase = rng.uniform(0, 2 * np.pi)
        ys, xs = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
        ripple = 0.06 * np.sin(freq * (xs + 0.6 * ys) + phase)
        img = img + ripple[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def generate_images(count, size=32, seed=0, offset=0):
    """(count, size, size, 3) batch; image i uses stream (seed, offset + i)."""
    out = np.empty((count, size, size, 3), dtype=np.float32)
    for i in range(count):
        out[i] = generate_image(np.random.default_rng((seed, offset + i)), size)
    return out


def write_image_corpus(directory, images, seed, kind="clean", degradation=None):
    """Write PPM files plus a manifest describing how they were produced."""
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i, img in enumerate(images):
        name = f"{kind}_{i:05d}.ppm"
        imaging.write_image(os.path.join(directory, name), img)
        entries.append({"file": name, "index": i})
    manifest = {
        "kind": kind,
        "count": len(images),
        "image_size": int(images.shape[1]),
        "seed": seed,
    }
    if degradation is not None:
        manifest["degradation"] = {
            "kind": degradation.kind,
            "params": degradation.params,
            "seed": degradation.seed,
        }
    manifest["files"] = entries
    with open(os.path.join(directory, f"{kind}_manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def read_image_corpus(directory, kind="clean"):
    with open(os.path.join(directory, f"{kind}_manifest.json")) as f:
        manifest = json.load(f)
    images = np.stack([
        imaging.read_image(os.path.join(directory, entry["file"]))
        for entry in manifest["files"]
    ])
    return images, manifest


# ---------------------------------------------------------------------------
# synthetic text: arithmetic, order-3 Markov prose, bracket nesting
# ---------------------------------------------------------------------------

_SEED_PROSE = (
    "the small model reads a long stream of plain words and learns which "
    "letter tends to follow the last few letters. a line of text repeats "
    "common patterns: the quick brown fox jumps over the lazy dog while the "
    "dog watches the fox and the fox watches the dog. numbers and names "
    "return again and again, so the reader can guess what comes next after "
    "seeing what came before. simple stories work best: a cat sat on a mat, "
    "then the cat left the mat and the mat stayed where the cat had sat. "
    "water flows down the hill and the hill keeps its shape while the water "
    "finds a new path every day. when the wind turns, the leaves turn with "
    "the wind and settle near the same old wall. "
)


def _markov_table(order=3):
    table = {}
    text = _SEED_PROSE
    for i in range(len(text) - order):
        key = text[i:i + order]
        table.setdefault(key, []).append(text[i + order])
    return {k: "".join(v) for k, v in table.items()}


_MARKOV = _markov_table()


def _markov_chunk(rng, length):
    keys = sorted(_MARKOV)
    state = keys[rng.integers(0, len(keys))]
    out = [state]
    for _ in range(length - len(state)):
        options = _MARKOV.get(state)
        if not options:
            state = keys[rng.integers(0, len(keys))]
            out.append(" " + state)
            continue
        ch = options[rng.integers(0, len(options))]
        out.append(ch)
        state = state[1:] + ch
    return "".join(out)[:length]


def _arithmetic_chunk(rng, lines):
    out = []
    for _ in range(lines):
        a = int(rng.integers(0, 100))
        b = int(rng.integers(0, 100))
        if rng.random() < 0.5:
            out.append(f"{a}+{b}={a + b}")
        else:
            out.append(f"{a}*{b}={a * b}")
    return "\n".join(out) + "\n"


def _bracket_chunk(rng, lines, max_depth=6):
    pairs = ["()", "[]", "{}"]
    out = []
    for _ in range(lines):
        stack, chars = [], []
        for _ in range(int(rng.integers(8, 40))):
            if stack and (len(stack) >= max_depth or rng.random() < 0.45):
                chars.append(stack.pop())
            else:
                p = pairs[rng.integers(0, 3)]
                chars.append(p[0])
                stack.append(p[1])
        while stack:
            chars.append(stack.pop())
        out.append("".join(chars))
    return "\n".join(out) + "\n"


def generate_text(n_chars, seed=0):
    """Deterministic ascii training text mixing the three chunk families."""
    rng = np.random.default_rng((seed, 777))
    parts = []
    total = 0
    while total < n_chars:
        kind = rng.integers(0, 3)
        if kind == 0:
            chunk = _arithmetic_chunk(rng, 8)
        elif kind == 1:
            chunk = _markov_chunk(rng, 256) + "\n"
        else:
            chunk = _bracket_chunk(rng, 6)
        parts.append(chunk)
        total += len(chunk)
    return "".join(parts)[:n_chars]


def _chunk_tokens(rng):
    kind = rng.integers(0, 3)
    if kind == 0:
        text = _arithmetic_chunk(rng, 4)
    elif kind == 1:
        text = _markov_chunk(rng, int(rng.integers(64, 224)))
    else:
        text = _bracket_chunk(rng, 3)
    return np.frombuffer(text.encode("ascii", "replace"), dtype=np.uint8).astype(np.intp)


def generate_token_stream(n_tokens, seed=0, marker_shells=True):
    """Byte-level pretraining tokens, optionally shaped by marker shells.

    With ``marker_shells`` (the default) a share of documents is wrapped in
    the special-token conversation structure (human/assistant markers,
    image-span brackets, end-of-text separators) so those ids have trained
    embeddings and head columns. The spans between the image brackets are
    ordinary bytes; no visual data is involved.
    """
    from .backbone import SPECIALS as s

    rng = np.random.default_rng((seed, 778))
    parts = []
    total = 0

    def span():
        length = int(rng.integers(16, 81))
        body = _chunk_tokens(rng)[:length]
        return np.concatenate([[s.img_start], body, [s.img_end]])

    while total < n_tokens:
        if marker_shells and rng.random() < 0.5:
            doc = [np.asarray([s.human], dtype=np.intp)]
            doc.append(_chunk_tokens(rng))
            if rng.random() < 0.5:
                doc.append(span())
            doc.append(np.asarray([s.assistant], dtype=np.intp))
            if rng.random() < 0.7:
                doc.append(span())
            else:
                doc.append(_chunk_tokens(rng))
            doc.append(np.asarray([s.end_of_text], dtype=np.intp))
        else:
            doc = [_chunk_tokens(rng), np.asarray([s.end_of_text], dtype=np.intp)]
        flat = np.concatenate(doc)
        parts.append(flat)
        total += len(flat)
    return np.concatenate(parts)[:n_tokens]
