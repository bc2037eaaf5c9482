"""Causal transformer core over the from-scratch autodiff engine.

Pre-norm blocks: x + attn(ln(x)), then x + ffn(ln(x)), with a final
layer norm. Attention is softmax(QK^T/sqrt(d_k))V with an additive -inf
mask above the diagonal, so masked probabilities are exactly zero and
causality holds bitwise. Positions index a learned table by timestep;
all tokens of one timestep share a positional row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutState, Tensor

INIT_STD = 0.02


@dataclass(frozen=True)
class TransformerConfig:
    d_model: int = 128
    n_layers: int = 3
    n_heads: int = 1
    context_len: int = 20
    dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.n_heads} heads")

    @property
    def d_k(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_f(self) -> int:
        return 4 * self.d_k

    def to_dict(self) -> dict:
        return {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context_len": self.context_len,
            "dropout": self.dropout,
        }


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b with leading axes flattened; 2-D gemm beats batched here."""
    lead = x.shape[:-1]
    flat = ad.reshape(x, (-1, x.shape[-1]))
    out = ad.add(ad.matmul(flat, w), b)
    return ad.reshape(out, lead + (w.shape[1],))


class TransformerCore:
    """Blocks plus per-modality input embeddings for a fixed token layout."""

    def __init__(self, cfg: TransformerConfig, modalities: list[tuple[str, int]], seed: int):
        self.cfg = cfg
        self.modalities = list(modalities)
        self.mod_index = {name: i for i, (name, _) in enumerate(self.modalities)}
        if len(self.mod_index) != len(self.modalities):
            raise ValueError("duplicate modality names")
        rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 0)))
        p: dict[str, Tensor] = {}

        def weight(name, shape):
            p[name] = Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def ones(name, shape):
            p[name] = Tensor(np.ones(shape), requires_grad=True)

        d = cfg.d_model
        for name, raw_dim in self.modalities:
            weight(f"embed.{name}.w", (raw_dim, d))
            zeros(f"embed.{name}.b", (d,))
        weight("pos", (cfg.context_len, d))
        for i in range(cfg.n_layers):
            ones(f"block{i}.ln1.g", (d,))
            zeros(f"block{i}.ln1.b", (d,))
            for proj in ("wq", "wk", "wv"):
                weight(f"block{i}.{proj}", (d, d))
                zeros(f"block{i}.b{proj[1]}", (d,))
            ones(f"block{i}.ln2.g", (d,))
            zeros(f"block{i}.ln2.b", (d,))
            weight(f"block{i}.w1", (d, cfg.d_f))
            zeros(f"block{i}.b1", (cfg.d_f,))
            weight(f"block{i}.w2", (cfg.d_f, d))
            zeros(f"block{i}.b2", (d,))
        ones("ln_f.g", (d,))
        zeros("ln_f.b", (d,))
        self.params = p
        self._mask_cache: dict[int, np.ndarray] = {}

    def param_count(self) -> int:
        return sum(t.size for t in self.params.values())

    @property
    def tokens_per_step(self) -> int:
        return len(self.modalities)

    def _causal_mask(self, n: int) -> np.ndarray:
        m = self._mask_cache.get(n)
        if m is None:
            m = np.triu(np.full((n, n), -np.inf), k=1)
            self._mask_cache[n] = m
        return m

    def embed_steps(self, values: dict[str, np.ndarray], timesteps: np.ndarray) -> Tensor:
        """Embed full timesteps: values[name] is (B, L, raw); out (B, L*M, d).

        Tokens interleave in modality order within each timestep, and every
        token of a timestep gets that timestep's positional row.
        """
        ts = np.asarray(timesteps)
        if ts.size and (ts.min() < 0 or ts.max() >= self.cfg.context_len):
            raise ValueError(f"timestep outside positional table (context {self.cfg.context_len})")
        cols = []
        for name, raw_dim in self.modalities:
            x = values[name]
            if x.shape[-1] != raw_dim:
                raise ValueError(f"{name}: raw dim {x.shape[-1]} != {raw_dim}")
            cols.append(_linear(ad.as_tensor(x), self.params[f"embed.{name}.w"], self.params[f"embed.{name}.b"]))
        B, L = ts.shape
        tok = ad.reshape(ad.stack(cols, axis=2), (B, L * len(cols), self.cfg.d_model))
        pos = ad.embedding(self.params["pos"], np.repeat(ts, len(cols), axis=1))
        return ad.add(tok, pos)

    def embed_tokens(self, tokens: list[tuple[str, np.ndarray, int]]) -> Tensor:
        """Embed an explicit (modality, raw, timestep) list into (1, N, d).

        Used at inference where the newest timestep is still incomplete.
        """
        rows = []
        for name, raw, t in tokens:
            if t < 0 or t >= self.cfg.context_len:
                raise ValueError(f"timestep {t} outside positional table")
            w = self.params[f"embed.{name}.w"]
            b = self.params[f"embed.{name}.b"]
            e = ad.add(ad.matmul(ad.as_tensor(raw.reshape(1, -1)), w), b)
            rows.append(ad.add(e, ad.embedding(self.params["pos"], np.array([t]))))
        return ad.reshape(ad.concat(rows, axis=0), (1, len(rows), self.cfg.d_model))

    def forward(self, x: Tensor, drop: DropoutState | None = None, collect_attn: list | None = None) -> Tensor:
        """(B, N, d) -> (B, N, d) hidden states aligned with input tokens."""
        cfg = self.cfg
        n = x.shape[1]
        if n > cfg.context_len * self.tokens_per_step:
            raise ValueError(f"{n} tokens exceed context window")
        rate = cfg.dropout if drop is not None else 0.0
        if rate > 0.0:
            x = ad.dropout(x, rate, drop.generator(0))
        mask = self._causal_mask(n)
        scale = 1.0 / np.sqrt(cfg.d_k)
        B = x.shape[0]
        for i in range(cfg.n_layers):
            p = self.params
            h = ad.layer_norm(x, p[f"block{i}.ln1.g"], p[f"block{i}.ln1.b"])
            q = _linear(h, p[f"block{i}.wq"], p[f"block{i}.bq"])
            k = _linear(h, p[f"block{i}.wk"], p[f"block{i}.bk"])
            v = _linear(h, p[f"block{i}.wv"], p[f"block{i}.bv"])

            def heads(t):
                t = ad.reshape(t, (B, n, cfg.n_heads, cfg.d_k))
                return ad.transpose(t, (0, 2, 1, 3))

            q, k, v = heads(q), heads(k), heads(v)
            scores = ad.add(ad.mul(ad.matmul(q, ad.swap_last2(k)), scale), mask)
            probs = ad.softmax_rows(scores)
            if collect_attn is not None:
                collect_attn.append(probs.data)
            if rate > 0.0:
                probs = ad.dropout(probs, rate, drop.generator(10 * i + 1))
            attn = ad.matmul(probs, v)
            attn = ad.reshape(ad.transpose(attn, (0, 2, 1, 3)), (B, n, cfg.d_model))
            if rate > 0.0:
                attn = ad.dropout(attn, rate, drop.generator(10 * i + 2))
            x = ad.add(x, attn)
            h2 = ad.layer_norm(x, p[f"block{i}.ln2.g"], p[f"block{i}.ln2.b"])
            ff = _linear(ad.relu(_linear(h2, p[f"block{i}.w1"], p[f"block{i}.b1"])), p[f"block{i}.w2"], p[f"block{i}.b2"])
            if rate > 0.0:
                ff = ad.dropout(ff, rate, drop.generator(10 * i + 3))
            x = ad.add(x, ff)
        return ad.layer_norm(x, self.params["ln_f.g"], self.params["ln_f.b"])
