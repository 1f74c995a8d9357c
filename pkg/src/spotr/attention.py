"""Channel-wise point attention (CWPA).

Each query attends to its keys with one softmax *per output channel*: the
value branch ``M`` and the logit branch ``M'`` both read
``[R(f_q, f_k); phi_qk]`` where ``R`` is the semantic relation and ``phi``
the normalized key offset.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .nn import MLP, Module
from .numerics import Tensor

RELATIONS = ("sub", "key_only", "add", "mul")


@dataclass
class AttnConfig:
    relation: str = "sub"
    temperature: float = 1.0

    def __post_init__(self):
        if self.relation not in RELATIONS:
            raise ValueError(f"relation must be one of {RELATIONS}, got {self.relation!r}")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")


class CwpaParams(Module):
    """Value mapping ``M`` and logit mapping ``M'``, each (C_in+3 -> hidden -> C_out).

    With ``tied=True`` the two mappings share one set of weights.
    """

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 hidden: int | None = None, tied: bool = False):
        hidden = hidden or c_out
        self.c_in, self.c_out, self.hidden = c_in, c_out, hidden
        self.value_map = MLP([c_in + 3, hidden, c_out], rng)
        self.logit_map = self.value_map if tied else MLP([c_in + 3, hidden, c_out], rng)

    @property
    def tied(self) -> bool:
        return self.logit_map is self.value_map


def relation(fq, fk, kind: str = "sub") -> Tensor:
    if kind == "sub":
        return nx.sub(fq, fk)
    if kind == "key_only":
        return nx.as_tensor(fk)
    if kind == "add":
        return nx.add(fq, fk)
    if kind == "mul":
        return nx.mul(fq, fk)
    raise ValueError(f"unknown relation {kind!r}")


def rel_pos(xq, xk, scale: float = 1.0) -> Tensor:
    if not scale > 0:
        raise ValueError("scale must be positive")
    return nx.div(nx.sub(xk, xq), scale)


def _pair_inputs(xq, fq, xk, fk, kind: str, scale: float) -> Tensor:
    xq, fq, xk, fk = (nx.as_tensor(t) for t in (xq, fq, xk, fk))
    if xk.ndim == xq.ndim:
        # keys shared by every query: (..., K, 3) -> (..., 1, K, 3)
        xk = nx.reshape(xk, xk.shape[:-2] + (1,) + xk.shape[-2:])
        fk = nx.reshape(fk, fk.shape[:-2] + (1,) + fk.shape[-2:])
    q_shape = xq.shape[:-1]
    k = xk.shape[-2]
    r = relation(nx.reshape(fq, fq.shape[:-1] + (1, fq.shape[-1])), fk, kind)
    r = nx.broadcast_to(r, q_shape + (k, r.shape[-1]))
    phi = rel_pos(nx.reshape(xq, q_shape + (1, 3)), xk, scale)
    phi = nx.broadcast_to(phi, q_shape + (k, 3))
    return nx.concat([r, phi], axis=-1)


def cwpa(xq, fq, xk, fk, params: CwpaParams, cfg: AttnConfig, mask=None,
         scale: float = 1.0, return_weights: bool = False):
    """Channel-wise point attention for a batch of queries.

    Shapes: ``xq (..., Q, 3)``, ``fq (..., Q, C)``; keys either per query,
    ``xk (..., Q, K, 3)`` / ``fk (..., Q, K, C)``, or shared by all queries,
    ``xk (..., K, 3)`` / ``fk (..., K, C)``. ``mask (..., Q, K)`` marks valid
    keys. Returns ``(..., Q, C_out)`` and, if requested, the attention
    weights ``(..., Q, K, C_out)``.
    """
    if nx.as_tensor(xk).shape[-2] == 0:
        raise ValueError("cwpa needs at least one key")
    inp = _pair_inputs(xq, fq, xk, fk, cfg.relation, scale)
    u = params.value_map(inp)
    raw = u if params.tied else params.logit_map(inp)
    logits = nx.div(raw, cfg.temperature)
    m = None if mask is None else np.asarray(mask, dtype=bool)[..., None]
    a = nx.softmax(logits, axis=-2, mask=m)
    out = nx.sum(nx.mul(a, u), axis=-2)
    return (out, a) if return_weights else out


def cwpa_keys(xq, fq, keys: Sequence[tuple], params: CwpaParams, cfg: AttnConfig,
              scale: float = 1.0) -> Tensor:
    """Single-query form: ``keys`` is a list of ``(x_k, f_k)`` pairs."""
    if not keys:
        raise ValueError("cwpa needs at least one key")
    xk = np.stack([np.asarray(x, dtype=np.float64) for x, _ in keys])
    fk = nx.concat([nx.reshape(nx.as_tensor(f), (1, -1)) for _, f in keys], axis=0)
    xq = nx.reshape(nx.as_tensor(xq), (1, 3))
    fq = nx.reshape(nx.as_tensor(fq), (1, -1))
    out = cwpa(xq, fq, xk[None], nx.reshape(fk, (1,) + fk.shape), params, cfg, scale=scale)
    return nx.reshape(out, (out.shape[-1],))


def cwpa_maxpool_limit(xq, fq, xk, fk, value_map: MLP, scale: float = 1.0) -> Tensor:
    """Zero-temperature limit of CWPA with ``R = R' = f_k`` and ``M' = M``:
    per channel, the maximum over keys of ``M([f_k; phi_qk])``.

    Key lists may be padded with repeats of real members (max is idempotent).
    """
    inp = _pair_inputs(xq, fq, xk, fk, "key_only", scale)
    return nx.max(value_map(inp), axis=-2)
