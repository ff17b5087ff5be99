"""Decoder-only autoregressive transformer, text-pretrained then frozen.

The backbone is the stand-in for a frozen language model: byte-level vocab
plus special marker tokens, pre-norm blocks with rotary attention, untied
output head. After ``fit`` on the synthetic text corpus it is never trained
again; downstream code verifies that with parameter digests.

Two forward modes exist: ``causal`` (causal mask + rotary embedding, the
autoregressive mode) and ``vit`` (no mask, no positions, single-forward
mode used by the non-autoregressive ablations).
"""

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import ndgrad as ng
from . import nn

TEXT_VOCAB = 256


@dataclass(frozen=True)
class SpecialTokens:
    """Marker ids living above the byte vocabulary."""

    img_start: int = TEXT_VOCAB
    img_end: int = TEXT_VOCAB + 1
    human: int = TEXT_VOCAB + 2
    assistant: int = TEXT_VOCAB + 3
    end_of_text: int = TEXT_VOCAB + 4

    @property
    def vocab_size(self):
        return TEXT_VOCAB + 5


SPECIALS = SpecialTokens()


class TextBackbone(BaseEstimator):
    """Small frozen-after-pretraining causal transformer."""

    def __init__(self, d_l=128, n_layers=4, n_heads=4, max_seq_len=256,
                 rope_base=10000.0, init="pretrained", epochs=1, batch_size=16,
                 seq_len=128, lr=3e-4, warmup=200, holdout_frac=0.02, seed=0):
        self.d_l = d_l
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.max_seq_len = max_seq_len
        self.rope_base = rope_base
        self.init = init
        self.epochs = epochs
        self.batch_size = batch_size
        self.seq_len = seq_len
        self.lr = lr
        self.warmup = warmup
        self.holdout_frac = holdout_frac
        self.seed = seed

    @property
    def vocab_size(self):
        return SPECIALS.vocab_size

    def _ensure_built(self):
        if hasattr(self, "blocks_"):
            return
        if self.d_l % (2 * self.n_heads):
            raise ValueError(f"d_l {self.d_l} must be divisible by 2*heads "
                             f"({2 * self.n_heads}) for rotary pairs")
        rng = np.random.default_rng((self.seed, 505))
        self.tok_emb_ = ng.Tensor(rng.normal(0, 0.02, (self.vocab_size, self.d_l)),
                                  requires_grad=True, dtype=np.float32)
        self.blocks_ = [nn.Block(rng, self.d_l, self.n_heads) for _ in range(self.n_layers)]
        self.final_norm_ = nn.LayerNorm(self.d_l)
        self.head_ = nn.Linear(rng, self.d_l, self.vocab_size)
        cos, sin = nn.rope_tables(self.max_seq_len, self.d_l // self.n_heads,
                                  base=self.rope_base)
        self.rope_ = (cos, sin)
        self.pretrained_ = False
        self.history_ = []
        self.perplexity_history_ = []

    def named_params(self):
        self._ensure_built()
        out = [("emb.tok", self.tok_emb_)]
        for i, blk in enumerate(self.blocks_):
            out += blk.named_params(f"block{i}")
        out += self.final_norm_.named_params("final_norm")
        out += self.head_.named_params("head")
        return out

    def params_digest(self):
        return nn.params_digest(self.named_params())

    def structure_digest(self):
        """Hash of names/shapes/dtypes only; equal for pretrained vs random."""
        import hashlib
        h = hashlib.sha256()
        for name, p in sorted(self.named_params(), key=lambda kv: kv[0]):
            h.update(f"{name}:{p.shape}:{p.dtype}".encode())
        return h.hexdigest()

    # ------------------------------------------------------------------
    # forward
    # ------------------------------------------------------------------

    def embed_ids(self, ids):
        """Token ids (B, L) -> embeddings (B, L, d_l)."""
        ids = np.asarray(ids, dtype=np.intp)
        flat = ng.index_select(self.tok_emb_, ids.reshape(-1), axis=0)
        return ng.reshape(flat, (*ids.shape, self.d_l))

    def forward(self, embeddings, mode="causal", return_layers=False):
        """Run the block stack over (B, L, d_l) embeddings.

        ``causal`` applies the causal mask and rotary embedding; ``vit``
        applies neither. Returns the final-norm hidden states.
        """
        self._ensure_built()
        if mode not in ("causal", "vit"):
            raise ValueError(f"unknown mode {mode!r}")
        length = embeddings.shape[1]
        if length > self.max_seq_len:
            raise ValueError(f"sequence length {length} exceeds max_seq_len {self.max_seq_len}")
        causal = mode == "causal"
        rope = self.rope_ if causal else None
        taps = []
        x = embeddings
        for blk in self.blocks_:
            x = blk(x, causal=causal, rope=rope)
            if return_layers:
                taps.append(x)
        hidden = self.final_norm_(x)
        if return_layers:
            return hidden, taps
        return hidden

    def logits(self, hidden):
        return self.head_(hidden)

    def extract_layer(self, index):
        """Standalone frozen block ``index`` (no mask, no positions)."""
        self._ensure_built()
        if not 0 <= index < self.n_layers:
            raise ValueError(f"layer index {index} out of range [0, {self.n_layers})")
        block = self.blocks_[index]
        return lambda x: block(x, causal=False, rope=None)

    # ------------------------------------------------------------------
    # pretraining
    # ------------------------------------------------------------------

    @staticmethod
    def tokenize(text):
        return np.frombuffer(text.encode("ascii", "replace"), dtype=np.uint8).astype(np.intp)

    def _blocks_from_text(self, text):
        tokens = self.tokenize(text) if isinstance(text, str) else np.asarray(text, np.intp)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise ValueError(f"token id outside [0, {self.vocab_size})")
        span = self.seq_len + 1
        n_blocks = len(tokens) // span
        if n_blocks < 8:
            raise ValueError(f"corpus too small: {len(tokens)} chars yield {n_blocks} blocks")
        return tokens[:n_blocks * span].reshape(n_blocks, span)

    def fit(self, text, y=None, log=None):
        """Next-token cross-entropy pretraining on a byte-level corpus.

        ``text`` is an ascii string or an array of token ids (byte values
        plus the special marker ids)."""
        self._ensure_built()
        blocks = self._blocks_from_text(text)
        n_hold = max(4, int(len(blocks) * self.holdout_frac))
        held, train = blocks[-n_hold:], blocks[:-n_hold]
        rng = np.random.default_rng((self.seed, 606))
        opt = ng.AdamW(self.named_params())
        steps_total = nn.total_steps(len(train), self.batch_size, self.epochs)
        self.perplexity_history_.append((0, self.perplexity_blocks(held)))
        eval_every = max(1, steps_total // 8)
        for epoch, step, idx in nn.iter_batches(len(train), self.batch_size,
                                                self.epochs, rng):
            batch = train[idx]
            hidden = self.forward(self.embed_ids(batch[:, :-1]), mode="causal")
            logits = ng.reshape(self.logits(hidden), (-1, self.vocab_size))
            targets = batch[:, 1:].reshape(-1)
            loss = ng.cross_entropy(logits, targets, np.ones(len(targets), np.float32))
            value = float(loss.data)
            if not np.isfinite(value):
                raise nn.DivergenceError(f"text pretraining diverged at step {step}")
            loss.backward()
            lr = ng.warmup_cosine_lr(step, self.warmup, steps_total, self.lr)
            opt.step(lr)
            opt.zero_grad()
            record = {"stage": "lm_pretrain", "epoch": epoch, "step": step,
                      "loss": value, "lr": lr}
            self.history_.append(record)
            if log is not None:
                log(record)
            if (step + 1) % eval_every == 0:
                self.perplexity_history_.append((step + 1, self.perplexity_blocks(held)))
        self.perplexity_history_.append((steps_total, self.perplexity_blocks(held)))
        self.pretrained_ = True
        return self

    def perplexity_blocks(self, blocks):
        """exp(mean next-token NLL) over (n, seq_len+1) token blocks."""
        total, count = 0.0, 0
        with ng.no_grad():
            for lo in range(0, len(blocks), 64):
                batch = blocks[lo:lo + 64]
                hidden = self.forward(self.embed_ids(batch[:, :-1]), mode="causal")
                logits = self.logits(hidden).data
                z = logits - logits.max(axis=-1, keepdims=True)
                lse = np.log(np.exp(z).sum(axis=-1))
                tgt = batch[:, 1:]
                rows = np.take_along_axis(z, tgt[:, :, None], axis=2)[:, :, 0]
                total += float((lse - rows).sum())
                count += tgt.size
        return float(np.exp(total / count))

    def perplexity(self, text):
        return self.perplexity_blocks(self._blocks_from_text(text))

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def state_arrays(self):
        return {name: p.data.copy() for name, p in self.named_params()}

    def load_state_arrays(self, arrays):
        self._ensure_built()
        from .checkpoint import load_params
        load_params(self.named_params(), arrays)
        self.pretrained_ = self.init == "pretrained"
        return self
