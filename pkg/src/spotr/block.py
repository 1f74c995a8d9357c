"""Local points attention, the gated SPoTr block, and PointNet++ set
abstraction (the block's zero-temperature limit)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .attention import AttnConfig, CwpaParams, cwpa
from .geometry import Group, ball_query, fps, pad_groups
from .nn import MLP, LayerNorm, Module, param
from .numerics import Tensor
from .spa import SpaLayer, spa_forward

# ablation rows: full model, no SPA (LPA only), FPS-picked SP points, spatial kernel only
VARIANTS = ("full", "no_spa", "fps_sp", "spatial_only")
_SPA_KERNEL = {"full": "full", "fps_sp": "fps", "spatial_only": "spatial"}


@dataclass
class BlockConfig:
    radius: float = 0.2
    cap: int = 16
    n_sp: int = 16
    gamma: float = 16.0
    variant: str = "full"
    attn: AttnConfig = field(default_factory=AttnConfig)
    tied: bool = False
    alpha: float | None = None      # fixed gate value; None means learned
    extra_lpa_layers: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.radius <= 0 or self.cap < 1:
            raise ValueError("radius must be positive and cap >= 1")
        if self.alpha is not None and not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha override must lie in [0, 1]")
        if self.extra_lpa_layers < 0:
            raise ValueError("extra_lpa_layers must be >= 0")


@dataclass
class StagePlan:
    """Index structures for one block over a batch of clouds (positions are
    inputs, never parameters, so these are computed once per cloud)."""
    anchors: np.ndarray       # (B, M)
    group_idx: np.ndarray     # (B, M, K) into the N input points
    group_mask: np.ndarray    # (B, M, K)
    post_idx: np.ndarray      # (B, M, K2) into the M anchors
    post_mask: np.ndarray     # (B, M, K2)
    sp_index: np.ndarray | None = None   # (B, S) FPS picks for the fps_sp variant


def n_anchors(n: int) -> int:
    return math.ceil(n / 4)


def plan_cloud(x: np.ndarray, radius: float, cap: int, n_sp: int | None = None) -> StagePlan:
    """Unbatched plan for one cloud ``x (N, 3)``; see :func:`collate_plans`."""
    m = n_anchors(len(x))
    anchors = fps(x, m)
    gi, gm = pad_groups(ball_query(x, anchors, radius, cap))
    xa = x[anchors]
    pi, pm = pad_groups(ball_query(xa, np.arange(m), radius, cap))
    sp = fps(x, min(n_sp, len(x))) if n_sp else None
    return StagePlan(anchors, gi, gm, pi, pm, sp)


def _stack_padded(idx_list, mask_list):
    k = max(i.shape[1] for i in idx_list)
    idx = np.stack([np.concatenate([i, np.repeat(i[:, :1], k - i.shape[1], axis=1)], axis=1) for i in idx_list])
    mask = np.stack([np.pad(m, ((0, 0), (0, k - m.shape[1]))) for m in mask_list])
    return idx, mask


def collate_plans(plans: list[StagePlan]) -> StagePlan:
    gi, gm = _stack_padded([p.group_idx for p in plans], [p.group_mask for p in plans])
    pi, pm = _stack_padded([p.post_idx for p in plans], [p.post_mask for p in plans])
    sp = None if plans[0].sp_index is None else np.stack([p.sp_index for p in plans])
    return StagePlan(np.stack([p.anchors for p in plans]), gi, gm, pi, pm, sp)


def lpa_forward(X, F, anchors, group_idx, group_mask, params: CwpaParams, cfg: AttnConfig,
                radius: float) -> Tensor:
    """CWPA of each anchor over its ball-query group; offsets scaled by radius."""
    X, F = nx.as_tensor(X), nx.as_tensor(F)
    xq, fq = nx.gather(X, anchors), nx.gather(F, anchors)
    xk, fk = nx.gather(X, group_idx), nx.gather(F, group_idx)
    return cwpa(xq, fq, xk, fk, params, cfg, mask=group_mask, scale=radius)


def lpa_groups(X, F, groups: list[Group], params: CwpaParams, cfg: AttnConfig, radius: float) -> Tensor:
    """Unbatched convenience over a list of :class:`Group`."""
    idx, mask = pad_groups(groups)
    anchors = np.array([g.anchor for g in groups])
    return lpa_forward(X, F, anchors, idx, mask, params, cfg, radius)


def set_abstraction(X, F, anchors, group_idx, mapping: MLP, radius: float) -> Tensor:
    """``f'_i = max_{j in G_i} M([f_j; (x_j - x_i)/r])``.

    Padded slots must repeat a real member of the group.
    """
    X, F = nx.as_tensor(X), nx.as_tensor(F)
    xi = nx.gather(X, anchors)
    xj, fj = nx.gather(X, group_idx), nx.gather(F, group_idx)
    xi = nx.reshape(xi, xi.shape[:-1] + (1, 3))
    phi = nx.div(nx.sub(xj, xi), radius)
    return nx.max(mapping(nx.concat([fj, phi], axis=-1)), axis=-2)


class PostLayer(Module):
    """Same-resolution LPA, MLP, residual and layer normalization."""

    def __init__(self, c: int, rng: np.random.Generator, tied: bool = False):
        self.lpa = CwpaParams(c, c, rng, tied=tied)
        self.mlp = MLP([c, c, c], rng)
        self.norm = LayerNorm(c)

    def __call__(self, X, F, idx, mask, cfg: AttnConfig, radius: float) -> Tensor:
        m = X.shape[-2]
        lead = X.shape[:-2]
        every = np.broadcast_to(np.arange(m), lead + (m,))
        z = lpa_forward(X, F, every, idx, mask, self.lpa, cfg, radius)
        return self.norm(nx.add(F, self.mlp(z)))


class SpotrBlock(Module):
    """Downsample to ceil(N/4) FPS anchors; blend SPA and LPA through the
    gate ``alpha = sigmoid(a)``; then LPA + MLP with a normalized residual."""

    def __init__(self, c_in: int, c_out: int, cfg: BlockConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.c_in, self.c_out = c_in, c_out
        self.lpa = CwpaParams(c_in, c_out, rng, tied=cfg.tied)
        if cfg.variant == "no_spa":
            self.spa = None
        else:
            self.spa = SpaLayer(c_in, c_out, rng, cfg.n_sp, cfg.gamma, _SPA_KERNEL[cfg.variant], tied=cfg.tied)
            self.gate = param(0.0)
        self.post = [PostLayer(c_out, rng, cfg.tied) for _ in range(1 + cfg.extra_lpa_layers)]

    def alpha(self):
        if self.spa is None:
            return 0.0
        if self.cfg.alpha is not None:
            return self.cfg.alpha
        return nx.sigmoid(self.gate)

    def __call__(self, X, F, plan: StagePlan, return_parts: bool = False):
        """Returns ``(anchor positions, features (..., M, C_out))``; with
        ``return_parts`` also a dict holding ``f_lpa``, ``f_spa``, ``f_hat``,
        ``alpha`` and the SPA state."""
        cfg = self.cfg
        X, F = nx.as_tensor(X), nx.as_tensor(F)
        f_lpa = lpa_forward(X, F, plan.anchors, plan.group_idx, plan.group_mask, self.lpa, cfg.attn, cfg.radius)
        parts = {"f_lpa": f_lpa, "f_spa": None, "state": None}
        if self.spa is None:
            f_hat = f_lpa
            alpha = 0.0
        else:
            f_spa, state = spa_forward(X, F, self.spa, cfg.attn, query_index=plan.anchors,
                                       sp_index=plan.sp_index, return_state=True)
            alpha = self.alpha()
            f_hat = nx.add(nx.mul(alpha, f_spa), nx.mul(nx.sub(1.0, alpha), f_lpa))
            parts.update(f_spa=f_spa, state=state)
        parts.update(f_hat=f_hat, alpha=alpha)
        xa = nx.gather(X, plan.anchors)
        y = f_hat
        for layer in self.post:
            y = layer(xa, y, plan.post_idx, plan.post_mask, cfg.attn, cfg.radius)
        return (xa, y, parts) if return_parts else (xa, y)
