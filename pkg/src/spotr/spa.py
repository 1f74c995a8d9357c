"""Self-positioning point-based attention (SPA).

SP points are softmax-convex combinations of the input positions, driven by
learnable latents. Features are aggregated onto them with a spatial RBF
kernel times a semantic softmax kernel, then distributed back to every query
by CWPA with the SP points as keys. Cost is O(N*S*C).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .attention import AttnConfig, CwpaParams, cwpa
from .geometry import fps
from .nn import Module, param
from .numerics import Tensor

KERNELS = ("full", "spatial", "fps")


class SpaLayer(Module):
    """Latents ``Z (S, C_in)`` plus the distribution CWPA (C_in -> C_out).

    ``kernel`` selects the aggregation variant: ``full`` (g*h),
    ``spatial`` (g only, uniform h) or ``fps`` (FPS-chosen input points as
    SP points, g only).
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, n_sp: int = 16,
                 gamma: float = 16.0, kernel: str = "full", hidden: int | None = None,
                 tied: bool = False, renormalize: bool = False):
        if n_sp < 1:
            raise ValueError("need at least one SP point")
        if not gamma > 0:
            raise ValueError("gamma must be positive")
        if kernel not in KERNELS:
            raise ValueError(f"kernel must be one of {KERNELS}")
        self.n_sp, self.gamma, self.kernel, self.renormalize = n_sp, float(gamma), kernel, renormalize
        self.latents = param(rng.normal(0.0, 1.0 / np.sqrt(c_in), size=(n_sp, c_in)))
        self.cwpa = CwpaParams(c_in, c_out, rng, hidden, tied)


@dataclass
class SpState:
    latents: Tensor
    delta: Tensor    # (..., S, 3)
    psi: Tensor      # (..., S, C)
    g: Tensor        # (..., S, N)
    h: Tensor        # (..., S, N)
    gamma: float


def _semantic_weights(F, Z) -> Tensor:
    # (..., N, S), normalized over the N input points
    return nx.softmax(nx.matmul(F, nx.transpose(Z)), axis=-2)


def semantic_kernel(Z, F) -> Tensor:
    """``h[s, i] = softmax_i(f_i . z_s)``, shape ``(..., S, N)``."""
    return nx.transpose(_semantic_weights(F, Z))


def sp_positions(F, X, Z) -> Tensor:
    """``delta_s = sum_i softmax_i(f_i . z_s) x_i``, shape ``(..., S, 3)``."""
    if nx.as_tensor(X).shape[-2] == 0:
        raise ValueError("need at least one input point")
    return nx.matmul(semantic_kernel(Z, F), X)


def spatial_kernel(delta, X, gamma: float) -> Tensor:
    """RBF ``exp(-gamma |delta_s - x_i|^2)`` for every (s, i) pair.

    ``delta (..., S, 3)`` and ``X (..., N, 3)`` give ``(..., S, N)``; two
    plain 3-vectors give a scalar.
    """
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    delta, X = nx.as_tensor(delta), nx.as_tensor(X)
    if delta.ndim == 1 and X.ndim == 1:
        return nx.exp(nx.mul(nx.sum(nx.square(nx.sub(delta, X))), -gamma))
    d = nx.reshape(delta, delta.shape[:-1] + (1, 3))
    x = nx.reshape(X, X.shape[:-2] + (1,) + X.shape[-2:])
    return nx.exp(nx.mul(nx.sum(nx.square(nx.sub(d, x)), axis=-1), -gamma))


def aggregate(F, g, h, renormalize: bool = False) -> Tensor:
    """``psi_s = sum_i g[s,i] h[s,i] f_i``; the product weights are used as is
    unless ``renormalize`` rescales each row to sum to one."""
    w = nx.mul(g, h)
    if renormalize:
        w = nx.div(w, nx.sum(w, axis=-1, keepdims=True))
    return nx.matmul(w, F)


def sp_state(X, F, layer: SpaLayer, sp_index=None) -> SpState:
    """SP positions and aggregated features for one SPA layer.

    ``sp_index (..., S)`` supplies precomputed FPS picks for the ``fps``
    kernel; otherwise they are computed here.
    """
    X, F = nx.as_tensor(X), nx.as_tensor(F)
    n = X.shape[-2]
    if layer.kernel == "fps":
        if sp_index is None:
            sp_index = _batched_fps(X.data, layer.n_sp)
        delta = nx.gather(X, sp_index)
        h = Tensor(np.full(delta.shape[:-1] + (n,), 1.0 / n))
    else:
        h = semantic_kernel(layer.latents, F)
        delta = nx.matmul(h, X)
        if layer.kernel == "spatial":
            h = Tensor(np.full(h.shape, 1.0 / n))
    g = spatial_kernel(delta, X, layer.gamma)
    psi = aggregate(F, g, h, layer.renormalize)
    return SpState(layer.latents, delta, psi, g, h, layer.gamma)


def _batched_fps(x: np.ndarray, m: int) -> np.ndarray:
    lead = x.shape[:-2]
    flat = x.reshape((-1,) + x.shape[-2:])
    return np.stack([fps(p, m) for p in flat]).reshape(lead + (m,))


def spa_forward(X, F, layer: SpaLayer, cfg: AttnConfig, query_index=None,
                sp_index=None, return_state: bool = False):
    """Every query point attends to the S SP points through CWPA.

    Queries are all input points, or the rows picked by ``query_index
    (..., Q)``. Output ``(..., Q, C_out)``.
    """
    X, F = nx.as_tensor(X), nx.as_tensor(F)
    state = sp_state(X, F, layer, sp_index)
    if query_index is None:
        xq, fq = X, F
    else:
        xq, fq = nx.gather(X, query_index), nx.gather(F, query_index)
    out = cwpa(xq, fq, state.delta, state.psi, layer.cwpa, cfg, scale=1.0)
    return (out, state) if return_state else out


def spa_ablation_fps(X, F, layer: SpaLayer, cfg: AttnConfig, query_index=None, sp_index=None):
    """The "without self-positioning" variant: SP points are FPS-selected
    input points and aggregation uses the spatial kernel with uniform h."""
    if layer.kernel != "fps":
        fps_layer = SpaLayer.__new__(SpaLayer)
        vars(fps_layer).update(vars(layer))
        fps_layer.kernel = "fps"
        layer = fps_layer
    return spa_forward(X, F, layer, cfg, query_index, sp_index)


def gsa_forward(X, F, params: CwpaParams, cfg: AttnConfig, query_index=None,
                chunk: int | None = None) -> Tensor:
    """Global self-attention baseline: CWPA with every input point as a key.

    ``chunk`` bounds how many queries are processed at once (same result,
    bounded memory).
    """
    X, F = nx.as_tensor(X), nx.as_tensor(F)
    if query_index is None:
        xq, fq = X, F
    else:
        xq, fq = nx.gather(X, query_index), nx.gather(F, query_index)
    q = xq.shape[-2]
    if chunk is None or chunk >= q:
        return cwpa(xq, fq, X, F, params, cfg, scale=1.0)
    if xq.ndim != 2:
        raise ValueError("chunked GSA expects unbatched inputs")
    parts = []
    for start in range(0, q, chunk):
        rows = np.arange(start, min(q, start + chunk))
        parts.append(cwpa(nx.gather(xq, rows), nx.gather(fq, rows), X, F, params, cfg, scale=1.0))
    return nx.concat(parts, axis=0)
