"""View-consistent attention control primitives.

Scaled-dot-product attention plus the mechanisms that keep multi-view edits
aligned: query injection from a source branch, key/value propagation from
per-context keyframes, cross-context key/value reference, per-token
cross-attention map replacement, and mask-gated local blending.

Frame sequences are split into equal contexts of ctx_len frames; the first
frame of each context is its keyframe. Keyframes whose view directions all
stay within an angle threshold may share the first keyframe's K/V
(propagation); otherwise they jointly attend over the concatenated K/V of
every keyframe (reference).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from difflib import SequenceMatcher

import numpy as np


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    """Row-stochastic softmax over the last axis, stabilized by max subtraction."""
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> np.ndarray:
    """softmax(Q K^T / sqrt(d)) V over the trailing (tokens, dim) axes."""
    Q, K, V = (np.asarray(x, dtype=np.float64) for x in (Q, K, V))
    d = Q.shape[-1]
    if K.shape[-1] != d:
        raise ValueError(f"query dim {d} != key dim {K.shape[-1]}")
    if V.shape[-2] != K.shape[-2]:
        raise ValueError(f"value count {V.shape[-2]} != key count {K.shape[-2]}")
    logits = Q @ np.swapaxes(K, -1, -2) / np.sqrt(d)
    return softmax_rows(logits) @ V


def query_inject(Q_src, Q_tgt, K_tgt, V_tgt, t: int, t_q: int) -> np.ndarray:
    """Use source-branch queries for the first steps: t <= t_q (inclusive)."""
    if np.asarray(Q_src).shape != np.asarray(Q_tgt).shape:
        raise ValueError("source/target query shape mismatch")
    return attention(Q_src if t <= t_q else Q_tgt, K_tgt, V_tgt)


def angle_between_deg(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise ValueError("view directions must be nonzero")
    c = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


@dataclass(frozen=True)
class ContextPartition:
    """Equal frame contexts with first-frame keyframes and a KV pairing plan."""

    contexts: tuple[tuple[int, ...], ...]
    keyframes: tuple[int, ...]
    pairwise_angles_deg: np.ndarray   # (L, L) between keyframe view directions
    angle_threshold_deg: float

    @property
    def ctx_len(self) -> int:
        return len(self.contexts[0])

    @property
    def n_frames(self) -> int:
        return sum(len(c) for c in self.contexts)

    @property
    def use_reference(self) -> bool:
        """True when any keyframe pair exceeds the angle threshold."""
        a = self.pairwise_angles_deg
        return bool(np.any(a[np.triu_indices_from(a, k=1)] > self.angle_threshold_deg))

    def pair_plan(self) -> dict[tuple[int, int], str]:
        plan = {}
        n = len(self.keyframes)
        for i in range(n):
            for j in range(i + 1, n):
                big = self.pairwise_angles_deg[i, j] > self.angle_threshold_deg
                plan[(i, j)] = "reference" if big else "propagate"
        return plan


def partition_contexts(
    N: int, ctx_len: int, view_dirs, angle_threshold_deg: float = 25.0
) -> ContextPartition:
    """Split frames 0..N-1 into N/ctx_len contexts and plan keyframe sharing."""
    N, ctx_len = int(N), int(ctx_len)
    if ctx_len < 1 or N < 1:
        raise ValueError("N and ctx_len must be >= 1")
    if N % ctx_len:
        raise ValueError(f"ctx_len {ctx_len} does not divide frame count {N}")
    dirs = [np.asarray(d, dtype=np.float64) for d in view_dirs]
    if len(dirs) != N:
        raise ValueError(f"need {N} view directions, got {len(dirs)}")
    contexts = tuple(
        tuple(range(i, i + ctx_len)) for i in range(0, N, ctx_len)
    )
    keyframes = tuple(c[0] for c in contexts)
    L = len(keyframes)
    angles = np.zeros((L, L))
    for i in range(L):
        for j in range(i + 1, L):
            angles[i, j] = angles[j, i] = angle_between_deg(dirs[keyframes[i]], dirs[keyframes[j]])
    return ContextPartition(contexts, keyframes, angles, float(angle_threshold_deg))


def kv_propagate(Q_frames: np.ndarray, K_key: np.ndarray, V_key: np.ndarray) -> np.ndarray:
    """Every frame attends to the keyframe's K/V only."""
    Q_frames = np.asarray(Q_frames, dtype=np.float64)
    return attention(Q_frames, K_key, V_key)


def kv_reference(Q_keyframes, K_keyframes, V_keyframes) -> np.ndarray:
    """Keyframes attend over the concatenation of all keyframe K/V pairs."""
    Q = np.asarray(Q_keyframes, dtype=np.float64)
    K = np.asarray(K_keyframes, dtype=np.float64)
    V = np.asarray(V_keyframes, dtype=np.float64)
    if Q.ndim != 3 or K.ndim != 3 or V.ndim != 3:
        raise ValueError("expected (keyframes, tokens, dim) tensors")
    K_cat = K.reshape(-1, K.shape[-1])
    V_cat = V.reshape(-1, V.shape[-1])
    return attention(Q, K_cat, V_cat)


@dataclass(frozen=True)
class CrossAttnAlignment:
    """Target-token -> source-token position map; unmapped targets are edited."""

    mapping: dict[int, int] = field(default_factory=dict)

    def validate(self, n_src: int, n_tgt: int) -> None:
        for tgt, src in self.mapping.items():
            if not 0 <= tgt < n_tgt:
                raise ValueError(f"target token position {tgt} outside 0..{n_tgt - 1}")
            if not 0 <= src < n_src:
                raise ValueError(f"source token position {src} outside 0..{n_src - 1}")

    def edited_positions(self, n_tgt: int) -> tuple[int, ...]:
        return tuple(p for p in range(n_tgt) if p not in self.mapping)


def build_alignment(src_tokens, tgt_tokens) -> CrossAttnAlignment:
    """Align identical token runs between prompts; everything else is edited."""
    sm = SequenceMatcher(a=list(src_tokens), b=list(tgt_tokens), autojunk=False)
    mapping = {}
    for block in sm.get_matching_blocks():
        for k in range(block.size):
            mapping[block.b + k] = block.a + k
    return CrossAttnAlignment(mapping)


def cross_attn_control(
    maps_src: np.ndarray, maps_tgt: np.ndarray, align: CrossAttnAlignment
) -> np.ndarray:
    """Replace non-edited target attention maps with aligned source maps.

    Maps are (prompt tokens, spatial tokens): entry [p, :] is prompt token
    p's spatial attention map. Mapped target tokens take the source map of
    their aligned position; edited (unmapped) tokens keep the target map.
    """
    maps_src = np.asarray(maps_src, dtype=np.float64)
    maps_tgt = np.asarray(maps_tgt, dtype=np.float64)
    if maps_src.ndim != 2 or maps_tgt.ndim != 2:
        raise ValueError("attention maps must be 2-d (prompt tokens, spatial tokens)")
    if maps_src.shape[1] != maps_tgt.shape[1]:
        raise ValueError("source/target spatial token counts differ")
    align.validate(maps_src.shape[0], maps_tgt.shape[0])
    out = maps_tgt.copy()
    for tgt, src in align.mapping.items():
        out[tgt, :] = maps_src[src, :]
    return out


def local_blend(z_tgt: np.ndarray, z_src: np.ndarray, M: np.ndarray) -> np.ndarray:
    """M * z_tgt + (1 - M) * z_src with the mask broadcast over channels."""
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    z_src = np.asarray(z_src, dtype=np.float64)
    M = np.asarray(M, dtype=np.float64)
    if z_tgt.shape != z_src.shape:
        raise ValueError(f"latent shape mismatch: {z_tgt.shape} vs {z_src.shape}")
    if np.any(M < 0.0) or np.any(M > 1.0):
        raise ValueError("blend mask entries must lie in [0, 1]")
    if M.shape != z_tgt.shape:
        if M.shape != z_tgt.shape[-M.ndim:]:
            raise ValueError(f"mask shape {M.shape} does not broadcast over {z_tgt.shape}")
    return M * z_tgt + (1.0 - M) * z_src
