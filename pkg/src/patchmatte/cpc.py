"""Cross-patch context: key/value embeddings, context scoring and trimap-guided attention.

Feature maps are channels-first tensors ``(C, h, w)``. Trimaps attached to a
``KeyedPatch`` are uint8 label arrays already at feature resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .tiling import PatchSpec
from .trimap import B, F, U

REGION_ORDER = (U, F, B)


class Embeddings(nn.Module):
    """1x1 convolutions theta (keys, shared), delta (query values), phi (context values)."""

    def __init__(self, in_channels: int, key_channels: int | None = None, value_channels: int | None = None):
        super().__init__()
        key_channels = key_channels or max(in_channels // 2, 1)
        value_channels = value_channels or max(in_channels // 2, 1)
        self.in_channels = in_channels
        self.key_channels = key_channels
        self.value_channels = value_channels
        self.theta = nn.Conv2d(in_channels, key_channels, 1)
        self.phi = nn.Conv2d(in_channels, value_channels, 1)
        self.delta = nn.Conv2d(in_channels, value_channels, 1)

    def forward(self, features: torch.Tensor, role: str = "query"):
        if features.shape[-3] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} feature channels, got {features.shape[-3]}")
        batched = features.dim() == 4
        x = features if batched else features.unsqueeze(0)
        if role == "query":
            value = self.delta(x)
        elif role == "context":
            value = self.phi(x)
        else:
            raise ValueError(f"role must be 'query' or 'context', got {role!r}")
        key = self.theta(x)
        if not batched:
            key, value = key[0], value[0]
        return key, value


@dataclass
class KeyedPatch:
    key: torch.Tensor
    value: torch.Tensor
    trimap: np.ndarray
    spec: PatchSpec | None = None

    def __post_init__(self):
        if not (self.key.shape[1:] == self.value.shape[1:] == self.trimap.shape):
            raise ValueError(
                f"key {tuple(self.key.shape)}, value {tuple(self.value.shape)} and "
                f"trimap {self.trimap.shape} must share spatial size"
            )


@dataclass
class ContextPool:
    candidates: list
    scores: list[float] = field(default_factory=list)


def embed(features: torch.Tensor, role: str, emb: Embeddings, trimap: np.ndarray, spec: PatchSpec | None = None) -> KeyedPatch:
    key, value = emb(features, role)
    return KeyedPatch(key, value, trimap, spec)


def masked_key_sum(key, trimap: np.ndarray | None = None):
    """Sum of key vectors over all positions, or over U positions if a trimap is given."""
    flat = key.reshape(key.shape[0], -1)
    if trimap is None:
        return flat.sum(1)
    idx = np.flatnonzero(trimap.reshape(-1) == U)
    if isinstance(flat, torch.Tensor):
        return flat[:, torch.from_numpy(idx)].sum(1)
    return flat[:, idx].sum(1)


def correlation(query_key_u, context_key) -> float:
    """Sum over all position pairs of the dot product of masked query and context keys.

    The double sum factorizes into the dot product of the two spatial sums.
    """
    if query_key_u.shape[0] != context_key.shape[0]:
        raise ValueError("query and context keys must have the same channel count")
    qs = query_key_u.reshape(query_key_u.shape[0], -1).sum(1)
    cs = context_key.reshape(context_key.shape[0], -1).sum(1)
    if isinstance(qs, torch.Tensor):
        return float(torch.dot(qs.double(), cs.double()))
    return float(np.dot(np.asarray(qs, dtype=np.float64), np.asarray(cs, dtype=np.float64)))


def score_pool(h_values) -> np.ndarray:
    h = np.asarray(h_values, dtype=np.float64)
    if h.size == 0:
        raise ValueError("cannot score an empty context pool")
    e = np.exp(h - h.max())
    return e / e.sum()


def select_topk(pool, k: int) -> list[int]:
    """Indices of the k highest scores, best first; ties go to the smaller index."""
    if k < 1:
        raise ValueError(f"K must be >= 1, got {k}")
    scores = pool.scores if isinstance(pool, ContextPool) else pool
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return order[:k]


def _check_compatible(query: KeyedPatch, contexts):
    ck, cv = query.key.shape[0], query.value.shape[0]
    for i, c in enumerate(contexts):
        if c.key.shape[0] != ck or c.value.shape[0] != cv:
            raise ValueError(f"context {i} channels ({c.key.shape[0]}, {c.value.shape[0]}) != query ({ck}, {cv})")


def fallback(query: KeyedPatch) -> torch.Tensor:
    """CPC output with no usable context: the masked query value in all three branches."""
    mask = torch.from_numpy(query.trimap == U).to(query.value.dtype)
    qv = query.value * mask
    return torch.cat([qv, qv, qv], 0)


def tgnl(query: KeyedPatch, contexts, max_logits: int = 1 << 23) -> torch.Tensor:
    """Trimap-guided non-local attention.

    For each unknown query position and each region R in (U, F, B), attend
    over the context positions labelled R only, add the attended context
    values to the query value, and concatenate the three branches. Regions
    missing from every context fall back to the query value alone. Query
    positions outside U are zero.
    """
    if not contexts:
        raise ValueError("tgnl needs at least one context patch")
    _check_compatible(query, contexts)
    ck, h, w = query.key.shape
    cv = query.value.shape[0]

    u_idx = torch.from_numpy(np.flatnonzero(query.trimap.reshape(-1) == U))
    n_u = len(u_idx)
    q_key = query.key.reshape(ck, -1)[:, u_idx].T
    q_val = query.value.reshape(cv, -1)[:, u_idx].T

    ctx_keys = torch.cat([c.key.reshape(ck, -1) for c in contexts], 1)
    ctx_vals = torch.cat([c.value.reshape(cv, -1) for c in contexts], 1)
    labels = np.concatenate([c.trimap.reshape(-1) for c in contexts])

    branches = []
    for region in REGION_ORDER:
        sel = np.flatnonzero(labels == region)
        if len(sel) == 0 or n_u == 0:
            agg = q_val
        else:
            sel_t = torch.from_numpy(sel)
            k_r = ctx_keys[:, sel_t]
            v_r = ctx_vals[:, sel_t].T
            chunk = max(1, max_logits // len(sel))
            parts = []
            for start in range(0, n_u, chunk):
                logits = q_key[start:start + chunk] @ k_r
                # softmax subtracts the row max internally
                parts.append(torch.softmax(logits, dim=1) @ v_r)
            agg = q_val + torch.cat(parts, 0)
        out = q_val.new_zeros(cv, h * w).index_copy(1, u_idx, agg.T)
        branches.append(out.reshape(cv, h, w))
    return torch.cat(branches, 0)


def cpc_forward(query: KeyedPatch, contexts) -> torch.Tensor:
    return tgnl(query, contexts) if contexts else fallback(query)


def tgnl_reference(query: KeyedPatch, contexts) -> np.ndarray:
    """Loop-by-loop evaluation of ``tgnl``; slow, for small inputs only."""
    if not contexts:
        raise ValueError("tgnl needs at least one context patch")
    _check_compatible(query, contexts)

    def arr(t):
        return t.detach().cpu().double().numpy() if isinstance(t, torch.Tensor) else np.asarray(t, dtype=np.float64)

    qk, qv = arr(query.key), arr(query.value)
    cks = [arr(c.key) for c in contexts]
    cvs = [arr(c.value) for c in contexts]
    ck, h, w = qk.shape
    cv = qv.shape[0]
    out = np.zeros((3 * cv, h, w))
    for r_pos, region in enumerate(REGION_ORDER):
        for y in range(h):
            for x in range(w):
                if query.trimap[y, x] != U:
                    continue
                logits = []
                vals = []
                for i, ctx in enumerate(contexts):
                    ch, cw = ctx.trimap.shape
                    for yy in range(ch):
                        for xx in range(cw):
                            if ctx.trimap[yy, xx] != region:
                                continue
                            dot = 0.0
                            for c in range(ck):
                                dot += qk[c, y, x] * cks[i][c, yy, xx]
                            logits.append(dot)
                            vals.append(cvs[i][:, yy, xx])
                for c in range(cv):
                    acc = qv[c, y, x]
                    if logits:
                        m = max(logits)
                        weights = [np.exp(v - m) for v in logits]
                        total = sum(weights)
                        for wgt, val in zip(weights, vals):
                            acc += wgt / total * val[c]
                    out[r_pos * cv + c, y, x] = acc
    return out


def attention_maps(query: KeyedPatch, contexts, position: tuple[int, int]) -> list[dict[int, np.ndarray]]:
    """Attention weights of one unknown query position over each context, per region.

    Returns one dict per context mapping region label to an ``(h, w)`` weight
    map. For each region present in any context the weights sum to one over
    all contexts together.
    """
    y, x = position
    if query.trimap[y, x] != U:
        raise ValueError(f"query position {position} is not in the unknown region")
    _check_compatible(query, contexts)
    q = query.key[:, y, x].detach().double()
    maps = [{} for _ in contexts]
    for region in REGION_ORDER:
        logits = []
        for ctx in contexts:
            k = ctx.key.detach().double()
            lg = torch.einsum("c,chw->hw", q, k).numpy()
            logits.append(np.where(ctx.trimap == region, lg, -np.inf))
        flat = np.concatenate([lg.reshape(-1) for lg in logits])
        if np.isneginf(flat).all():
            for i, ctx in enumerate(contexts):
                maps[i][region] = np.zeros(ctx.trimap.shape)
            continue
        e = np.exp(flat - flat.max())
        e /= e.sum()
        offset = 0
        for i, ctx in enumerate(contexts):
            n = ctx.trimap.size
            maps[i][region] = e[offset:offset + n].reshape(ctx.trimap.shape)
            offset += n
    return maps
