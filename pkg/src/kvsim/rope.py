"""Rotary-embedding attention kernel for cache-truncation validity checks.

Keys and values are cached *without* rotary position encoding; positions are
rotated in when the cache is loaded.  Because rotary scores depend only on
relative offsets, a truncated cache re-embedded at fresh positions produces
bit-for-bit the attention a full recomputation would -- which is what makes
KV-cache truncation sound.  The module also implements the deliberately
broken variant (truncating a cache with rotations baked in) to demonstrate
the divergence, and a slow loop-based reference implementation used as the
independent oracle by the verification suite.

All math is float64; vectors of head dimension d are treated as d/2
rotation pairs (x[2i], x[2i+1]).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_THETA_BASE = 10000.0


@dataclass
class KvRecord:
    """Cached keys/values for one sequence, stored pre-rotation."""

    keys: np.ndarray    # (seq_len, head_dim)
    values: np.ndarray  # (seq_len, head_dim)

    def __post_init__(self):
        self.keys = np.asarray(self.keys, dtype=np.float64)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.keys.ndim != 2 or self.values.shape != self.keys.shape:
            raise ValueError("keys and values must be matching 2-D arrays")
        if self.keys.shape[1] % 2 != 0:
            raise ValueError("head_dim must be even")

    @property
    def seq_len(self) -> int:
        return self.keys.shape[0]

    @property
    def head_dim(self) -> int:
        return self.keys.shape[1]

    def truncated(self, start: int, end: int) -> "KvRecord":
        """Keep rows [start:end); valid because nothing positional is baked in."""
        if not 0 <= start <= end <= self.seq_len:
            raise ValueError("bad keep range")
        return KvRecord(self.keys[start:end].copy(), self.values[start:end].copy())


def _pair_angles(head_dim: int, positions: np.ndarray, theta_base: float) -> np.ndarray:
    """Rotation angles, shape (len(positions), head_dim/2)."""
    if head_dim % 2 != 0:
        raise ValueError("head_dim must be even")
    inv_freq = theta_base ** (-np.arange(head_dim // 2) * 2.0 / head_dim)
    return np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]


def rotate_matrix(x: np.ndarray, positions: np.ndarray,
                  theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Rotate each row of x by its position's per-pair angles."""
    x = np.asarray(x, dtype=np.float64)
    angles = _pair_angles(x.shape[-1], positions, theta_base)
    cos, sin = np.cos(angles), np.sin(angles)
    pairs = x.reshape(*x.shape[:-1], -1, 2)
    even, odd = pairs[..., 0], pairs[..., 1]
    out = np.empty_like(pairs)
    out[..., 0] = even * cos - odd * sin
    out[..., 1] = even * sin + odd * cos
    return out.reshape(x.shape)


def rope_rotate(vec: np.ndarray, position: int,
                theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Rotate a single head vector to `position`; norm-preserving."""
    if position < 0:
        raise ValueError("position must be >= 0")
    vec = np.asarray(vec, dtype=np.float64)
    if vec.ndim != 1:
        raise ValueError("expected a 1-D head vector")
    return rotate_matrix(vec[None, :], np.array([position]), theta_base)[0]


def _softmax_rows(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    return weights / weights.sum(axis=-1, keepdims=True)


def _causal_attention(q_rot: np.ndarray, k_rot: np.ndarray, v: np.ndarray,
                      n_cached: int) -> np.ndarray:
    """softmax(QK^T/sqrt(d))V where query i sees cache + new tokens 0..i."""
    d = q_rot.shape[-1]
    scores = q_rot @ k_rot.T / np.sqrt(d)
    n_new = q_rot.shape[0]
    total = k_rot.shape[0]
    cols = np.arange(total)[None, :]
    rows = np.arange(n_new)[:, None]
    mask = cols > (n_cached + rows)
    scores = np.where(mask, -np.inf, scores)
    return _softmax_rows(scores) @ v


def attention_weights(q_rot: np.ndarray, k_rot: np.ndarray, n_cached: int) -> np.ndarray:
    """Softmax attention weights for already-rotated queries/keys (for checks)."""
    d = q_rot.shape[-1]
    scores = q_rot @ k_rot.T / np.sqrt(d)
    cols = np.arange(k_rot.shape[0])[None, :]
    rows = np.arange(q_rot.shape[0])[:, None]
    scores = np.where(cols > (n_cached + rows), -np.inf, scores)
    return _softmax_rows(scores)


def attention_with_decoupled_cache(record: KvRecord, new_q: np.ndarray,
                                   new_k: np.ndarray, new_v: np.ndarray,
                                   positions: np.ndarray,
                                   theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Attention for new tokens over a cache whose rotation happens at load.

    `positions` assigns each cached key its current (post-truncation) index;
    new tokens occupy the indices that follow.  Returns one output row per
    new token.
    """
    new_q = np.asarray(new_q, dtype=np.float64)
    new_k = np.asarray(new_k, dtype=np.float64)
    new_v = np.asarray(new_v, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.int64)
    if positions.shape[0] != record.seq_len:
        raise ValueError(
            f"positions length {positions.shape[0]} != cached length {record.seq_len}")
    next_pos = int(positions[-1]) + 1 if record.seq_len else 0
    new_positions = next_pos + np.arange(new_q.shape[0])

    k_cache = rotate_matrix(record.keys, positions, theta_base)
    k_new = rotate_matrix(new_k, new_positions, theta_base)
    q_rot = rotate_matrix(new_q, new_positions, theta_base)

    k_all = np.concatenate([k_cache, k_new], axis=0)
    v_all = np.concatenate([record.values, new_v], axis=0)
    return _causal_attention(q_rot, k_all, v_all, record.seq_len)


def bake_positions(record: KvRecord, positions: np.ndarray,
                   theta_base: float = DEFAULT_THETA_BASE) -> KvRecord:
    """Produce a coupled-cache record with rotations burned into the keys."""
    return KvRecord(rotate_matrix(record.keys, positions, theta_base),
                    record.values.copy())


def naive_truncate_coupled(baked: KvRecord, keep_start: int, keep_end: int,
                           new_q: np.ndarray, new_k: np.ndarray, new_v: np.ndarray,
                           theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """Truncate a cache with baked-in rotations and attend over it anyway.

    The kept keys retain their stale original-position rotations while the
    queries assume compacted indices, so the relative offsets are wrong.
    This exists to demonstrate the failure mode, not to be used.
    """
    if not 0 <= keep_start <= keep_end <= baked.seq_len:
        raise ValueError("bad keep range")
    kept_k = baked.keys[keep_start:keep_end]
    kept_v = baked.values[keep_start:keep_end]
    n_kept = keep_end - keep_start
    new_positions = n_kept + np.arange(new_q.shape[0])
    q_rot = rotate_matrix(np.asarray(new_q, dtype=np.float64), new_positions, theta_base)
    k_new = rotate_matrix(np.asarray(new_k, dtype=np.float64), new_positions, theta_base)
    k_all = np.concatenate([kept_k, k_new], axis=0)
    v_all = np.concatenate([kept_v, np.asarray(new_v, dtype=np.float64)], axis=0)
    return _causal_attention(q_rot, k_all, v_all, n_kept)


# ---------------------------------------------------------------------------
# Slow reference implementation (the independent oracle)
# ---------------------------------------------------------------------------


def _reference_rotate_one(vec, position, theta_base):
    d = len(vec)
    out = [0.0] * d
    for i in range(d // 2):
        angle = position * theta_base ** (-2.0 * i / d)
        c, s = np.cos(angle), np.sin(angle)
        out[2 * i] = c * vec[2 * i] - s * vec[2 * i + 1]
        out[2 * i + 1] = s * vec[2 * i] + c * vec[2 * i + 1]
    return out


def reference_attention(raw_q, raw_k, raw_v, q_positions, k_positions,
                        n_cached: int, theta_base: float = DEFAULT_THETA_BASE) -> np.ndarray:
    """From-scratch attention computed with explicit per-pair loops.

    Rotates every key/query at its stated position and evaluates the softmax
    row by row.  Deliberately unvectorized and structurally independent of
    the production path so it can serve as a verification oracle.
    """
    raw_q = np.asarray(raw_q, dtype=np.float64)
    raw_k = np.asarray(raw_k, dtype=np.float64)
    raw_v = np.asarray(raw_v, dtype=np.float64)
    d = raw_q.shape[1]
    k_rot = [_reference_rotate_one(row, pos, theta_base)
             for row, pos in zip(raw_k, k_positions)]
    outputs = []
    for i, (qrow, qpos) in enumerate(zip(raw_q, q_positions)):
        q_rot = _reference_rotate_one(qrow, qpos, theta_base)
        visible = n_cached + i + 1
        scores = []
        for j in range(visible):
            dot = sum(a * b for a, b in zip(q_rot, k_rot[j]))
            scores.append(dot / d ** 0.5)
        m = max(scores)
        exps = [np.exp(x - m) for x in scores]
        z = sum(exps)
        out = [0.0] * d
        for j in range(visible):
            weight = exps[j] / z
            for c in range(d):
                out[c] += weight * raw_v[j][c]
        outputs.append(out)
    return np.asarray(outputs)


# ---------------------------------------------------------------------------
# Verification suite
# ---------------------------------------------------------------------------


def _rel_err(got: np.ndarray, want: np.ndarray) -> float:
    denom = np.linalg.norm(want)
    return float(np.linalg.norm(got - want) / (denom if denom else 1.0))


def random_instance(rng: np.random.Generator, *, min_seq: int = 8,
                    max_seq: int = 64, max_dim: int = 32):
    seq_len = int(rng.integers(min_seq, max_seq + 1))
    head_dim = 2 * int(rng.integers(2, max_dim // 2 + 1))
    n_new = int(rng.integers(1, 5))
    make = lambda n: rng.standard_normal((n, head_dim))
    record = KvRecord(make(seq_len), make(seq_len))
    return record, make(n_new), make(n_new), make(n_new)


def equivalence_report(n_instances: int = 100, seed: int = 2024) -> dict:
    """Run the full/truncated/naive comparison suite on random instances."""
    rng = np.random.default_rng(seed)
    full_errs, trunc_errs, naive_devs = [], [], []
    for _ in range(n_instances):
        record, new_q, new_k, new_v = random_instance(rng)
        seq = record.seq_len
        positions = np.arange(seq)

        oracle_full = reference_attention(
            new_q, np.concatenate([record.keys, new_k]),
            np.concatenate([record.values, new_v]),
            seq + np.arange(new_q.shape[0]),
            np.arange(seq + new_k.shape[0]), seq)
        got_full = attention_with_decoupled_cache(record, new_q, new_k, new_v, positions)
        full_errs.append(_rel_err(got_full, oracle_full))

        cut = seq // 2
        kept = record.truncated(cut, seq)
        kept_positions = np.arange(seq - cut)
        got_trunc = attention_with_decoupled_cache(kept, new_q, new_k, new_v, kept_positions)
        oracle_trunc = reference_attention(
            new_q, np.concatenate([kept.keys, new_k]),
            np.concatenate([kept.values, new_v]),
            (seq - cut) + np.arange(new_q.shape[0]),
            np.arange(seq - cut + new_k.shape[0]), seq - cut)
        trunc_errs.append(_rel_err(got_trunc, oracle_trunc))

        baked = bake_positions(record, positions)
        got_naive = naive_truncate_coupled(baked, cut, seq, new_q, new_k, new_v)
        naive_devs.append(float(np.max(np.abs(got_naive - oracle_trunc))))

    return {
        "instances": n_instances,
        "seed": seed,
        "full_max_rel_err": max(full_errs),
        "truncated_max_rel_err": max(trunc_errs),
        "naive_min_deviation": min(naive_devs),
        "naive_median_deviation": float(np.median(naive_devs)),
        "naive_diverging": sum(1 for d in naive_devs if d > 0.01),
    }
