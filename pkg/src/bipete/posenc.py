"""Visit-order sinusoidal embeddings and days-ago rotary rotations."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from . import numerics as nx
from .numerics import Tensor

MAX_VISIT_POS = 512


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=16)
def _spe_array(max_pos: int, d_model: int, base: float) -> np.ndarray:
    pos = np.arange(max_pos, dtype=np.float64)[:, None]
    i2 = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / base ** (i2 / d_model)
    table = np.empty((max_pos, d_model), dtype=np.float64)
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle)
    table.flags.writeable = False
    return table


def spe_table(max_pos: int, d_model: int, base: float = 10000.0) -> Tensor:
    """Sinusoidal table: row p holds sin/cos of p / base^(2i/d_model) at dims 2i / 2i+1."""
    if d_model % 2:
        raise ConfigError(f"d_model must be even for sinusoidal encoding, got {d_model}")
    return Tensor(_spe_array(int(max_pos), int(d_model), float(base)))


def add_visit_embedding(tok_emb, visits, max_pos: int = MAX_VISIT_POS, base: float = 10000.0) -> Tensor:
    """Add the sinusoidal row for each token's visit index.

    ``visits`` has the shape of ``tok_emb`` minus the feature axis; tokens
    that share a visit receive the same added vector.
    """
    tok_emb = nx.as_tensor(tok_emb)
    visits = np.asarray(visits)
    if visits.shape != tok_emb.shape[:-1]:
        raise nx.ShapeError(f"visit indices {visits.shape} do not match embeddings {tok_emb.shape}")
    if visits.size and (visits.min() < 0 or visits.max() >= max_pos):
        raise IndexError(f"visit index out of range [0, {max_pos})")
    d = tok_emb.shape[-1]
    if d % 2:
        raise ConfigError(f"d_model must be even for sinusoidal encoding, got {d}")
    rows = _spe_array(max_pos, d, float(base))[visits].astype(tok_emb.dtype)
    return nx.add(tok_emb, Tensor(rows, dtype=tok_emb.dtype))


def rope_angles(positions, d_head: int, base: float = 10000.0) -> np.ndarray:
    """Rotation angles m * theta_i, shape positions.shape + (d_head // 2,)."""
    if d_head % 2:
        raise ConfigError(f"d_head must be even for rotary encoding, got {d_head}")
    theta = base ** (-np.arange(0, d_head, 2, dtype=np.float64) / d_head)
    return np.asarray(positions, dtype=np.float64)[..., None] * theta


def rope_rotate(qk, positions, base: float = 10000.0) -> Tensor:
    """Rotate consecutive feature pairs (2i, 2i+1) of ``qk`` by positions * theta_i.

    ``positions`` must broadcast against ``qk.shape[:-1]`` (for multi-head
    input [B, H, L, dh] pass positions shaped [B, 1, L]).
    """
    qk = nx.as_tensor(qk)
    d_head = qk.shape[-1]
    ang = rope_angles(positions, d_head, base)
    try:
        ok = np.broadcast_shapes(ang.shape[:-1], qk.shape[:-1]) == qk.shape[:-1]
    except ValueError:
        ok = False
    if not ok:
        raise nx.ShapeError(f"positions {np.shape(positions)} do not broadcast into qk {qk.shape}")
    cos = np.cos(ang).astype(qk.dtype)
    sin = np.sin(ang).astype(qk.dtype)
    x0 = qk.data[..., 0::2]
    x1 = qk.data[..., 1::2]
    out = np.empty_like(qk.data)
    out[..., 0::2] = x0 * cos - x1 * sin
    out[..., 1::2] = x0 * sin + x1 * cos

    def bw(g):
        g0 = g[..., 0::2]
        g1 = g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = g0 * cos + g1 * sin
        gx[..., 1::2] = -g0 * sin + g1 * cos
        return (gx,)

    return nx.record("rope", out, (qk,), bw)
