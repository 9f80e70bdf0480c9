"""A deterministic seeded epsilon predictor with attention-control hooks.

The network is intentionally tiny: patch embedding of the latent, two
self-attention blocks, one cross-attention block over prompt tokens, and an
output projection back to latent shape. Weights are drawn once from a
seeded generator and never trained; the point is to host every attention
mechanism at realistic sites so their behavior can be asserted exactly.

Hook sites per forward pass:
  * both self-attention blocks: query injection (from a cached source
    pass) and keyframe K/V propagation / reference over frame contexts;
  * the cross-attention block: per-token attention-map replacement.

With all hooks disabled the forward pass is a plain per-frame transformer;
hook configurations that degenerate (identical branches, identical frames)
reproduce that plain pass bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import (
    ContextPartition,
    CrossAttnAlignment,
    attention,
    cross_attn_control,
    kv_propagate,
    kv_reference,
    softmax_rows,
)
from .scores import Condition


@dataclass
class VcacHooks:
    """Hook configuration consumed by TinyDenoiser.eps_frames."""

    partition: ContextPartition | None = None
    kv_consistency: bool = False
    query_injection: bool = False
    step: int = 0          # 1-based editing step counter
    t_q: int = 0           # injection active while step <= t_q
    cross_replace: CrossAttnAlignment | None = None

    def injection_active(self) -> bool:
        return self.query_injection and self.step <= self.t_q


class TinyDenoiser:
    """Fixed-weight epsilon predictor over (frames, C, H, W) latents."""

    N_SELF_BLOCKS = 2

    def __init__(self, shape, patch: int = 4, dim: int = 32, vocab: int = 64, seed: int = 0):
        c, h, w = shape
        if h % patch or w % patch:
            raise ValueError(f"patch {patch} does not divide {h}x{w}")
        self.shape = (c, h, w)
        self.patch = patch
        self.dim = dim
        self.vocab = vocab
        self.seed = seed
        self.n_tokens = (h // patch) * (w // patch)
        tok_dim = c * patch * patch
        rng = np.random.default_rng(seed)

        def mat(rows, cols, scale):
            return rng.normal(0.0, scale, size=(rows, cols))

        d = dim
        self.w_embed = mat(tok_dim, d, 1.0 / np.sqrt(tok_dim))
        self.pos = 0.3 * mat(self.n_tokens, d, 1.0)
        self.self_blocks = [
            {name: mat(d, d, 1.0 / np.sqrt(d)) for name in ("wq", "wk", "wv", "wo")}
            for _ in range(self.N_SELF_BLOCKS)
        ]
        self.prompt_table = mat(vocab, d, 1.0)
        self.cross = {name: mat(d, d, 1.0 / np.sqrt(d)) for name in ("wq", "wk", "wv", "wo")}
        self.w_out = mat(d, tok_dim, 1.0 / np.sqrt(d))
        self.t_freqs = 2.0 ** np.arange(d // 2)

    # latent <-> token plumbing -------------------------------------------------

    def _patchify(self, z: np.ndarray) -> np.ndarray:
        c, h, w = self.shape
        p = self.patch
        f = z.shape[0]
        t = z.reshape(f, c, h // p, p, w // p, p)
        return t.transpose(0, 2, 4, 1, 3, 5).reshape(f, self.n_tokens, c * p * p)

    def _unpatchify(self, tokens: np.ndarray) -> np.ndarray:
        c, h, w = self.shape
        p = self.patch
        f = tokens.shape[0]
        t = tokens.reshape(f, h // p, w // p, c, p, p)
        return t.transpose(0, 3, 1, 4, 2, 5).reshape(f, c, h, w)

    def _time_features(self, t: int) -> np.ndarray:
        phases = t / self.t_freqs
        feats = np.concatenate([np.sin(phases), np.cos(phases)])
        return 0.1 * feats[: self.dim]

    def _prompt_embedding(self, y: Condition) -> np.ndarray:
        if not y.tokens:
            raise ValueError(f"condition {y.id!r} has no tokens for the denoiser")
        idx = np.asarray(y.tokens, dtype=np.int64) % self.vocab
        return self.prompt_table[idx]

    # hooked attention sites ----------------------------------------------------

    def _self_attention(self, x, block, layer, hooks, source_cache, cache):
        q = x @ block["wq"]
        k = x @ block["wk"]
        v = x @ block["wv"]
        if cache is not None:
            cache[f"self{layer}_q"] = q.copy()
        q_used = q
        if hooks is not None and hooks.injection_active():
            key = f"self{layer}_q"
            if source_cache is None or key not in source_cache:
                raise ValueError(f"query injection enabled but source cache lacks {key!r}")
            q_used = source_cache[key]
            if q_used.shape != q.shape:
                raise ValueError("cached source queries do not match target shape")
        if hooks is not None and hooks.kv_consistency and hooks.partition is not None:
            part = hooks.partition
            if part.n_frames != x.shape[0]:
                raise ValueError(
                    f"partition covers {part.n_frames} frames, batch has {x.shape[0]}"
                )
            out = np.empty_like(v)
            keys = list(part.keyframes)
            if part.use_reference:
                out[keys] = kv_reference(q_used[keys], k[keys], v[keys])
            else:
                out[keys] = kv_propagate(q_used[keys], k[keys[0]], v[keys[0]])
            for ctx in part.contexts:
                rest = list(ctx[1:])
                if rest:
                    out[rest] = kv_propagate(q_used[rest], k[ctx[0]], v[ctx[0]])
        else:
            out = attention(q_used, k, v)
        return x + out @ block["wo"]

    def _cross_attention(self, x, y, hooks, source_cache, cache):
        prompt = self._prompt_embedding(y)
        q = x @ self.cross["wq"]
        kp = prompt @ self.cross["wk"]
        vp = prompt @ self.cross["wv"]
        maps = softmax_rows(q @ kp.T / np.sqrt(self.dim))  # (F, spatial, prompt)
        if cache is not None:
            cache["cross_maps"] = maps.copy()
        if hooks is not None and hooks.cross_replace is not None:
            if source_cache is None or "cross_maps" not in source_cache:
                raise ValueError("cross-attention control enabled but source cache lacks maps")
            src_maps = source_cache["cross_maps"]
            edited = np.empty_like(maps)
            for f in range(maps.shape[0]):
                # contract orientation is (prompt tokens, spatial tokens)
                edited[f] = cross_attn_control(
                    src_maps[f].T, maps[f].T, hooks.cross_replace
                ).T
            maps = edited
        out = maps @ vp
        return np.tanh(x + out @ self.cross["wo"])

    # public API ----------------------------------------------------------------

    def eps_frames(
        self,
        z_frames: np.ndarray,
        t: int,
        y: Condition,
        hooks: VcacHooks | None = None,
        source_cache: dict | None = None,
        record: bool = False,
    ):
        """Predict epsilon for a stack of frames, applying configured hooks.

        With record=True, returns (eps, cache) where the cache holds the
        per-layer queries and cross-attention maps a later target pass can
        consume.
        """
        z_frames = np.asarray(z_frames, dtype=np.float64)
        if z_frames.ndim == 3:
            z_frames = z_frames[None]
        if z_frames.shape[1:] != self.shape:
            raise ValueError(f"frame shape {z_frames.shape[1:]} != model shape {self.shape}")
        cache: dict | None = {} if record else None
        x = self._patchify(z_frames) @ self.w_embed
        x = x + self.pos[None] + self._time_features(int(t))[None, None, :]
        for layer, block in enumerate(self.self_blocks):
            x = self._self_attention(x, block, layer, hooks, source_cache, cache)
        x = self._cross_attention(x, y, hooks, source_cache, cache)
        eps = self._unpatchify(x @ self.w_out)
        if not np.all(np.isfinite(eps)):
            raise FloatingPointError("non-finite epsilon prediction")
        return (eps, cache) if record else eps

    def eps(self, z, t, y):
        """Single-latent noise-predictor interface."""
        return self.eps_frames(np.asarray(z)[None], t, y)[0]
