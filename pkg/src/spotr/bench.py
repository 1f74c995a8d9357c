"""Cost accounting for SPA versus global self-attention (GSA).

Closed-form FLOP / activation-byte counts follow the op conventions in
:mod:`spotr.numerics`. For queries ``Q``, keys ``K``, input width ``Ci``,
output width ``Co`` and hidden width ``H``, one CWPA pass costs per
(query, key) pair::

    rel + 6 + 4(Ci+3)H + 4H + 4H*Co + 10*Co          FLOPs
    rel + 9 + Ci + 6H + 7*Co  (x8 bytes), plus Q*Co*8 for the output

where ``rel`` is ``Ci`` for sub/add/mul relations and 0 for key_only.
SPA adds aggregation onto ``S`` SP points from ``N`` inputs::

    N*S*(4C + 23)                                    FLOPs
    (12*N*S + 3*S + S*C) * 8                         bytes

SPA is therefore Theta(N*S) and GSA (CWPA with all N points as keys)
Theta(N^2).
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import numerics as nx
from .attention import AttnConfig, CwpaParams
from .numerics import Tensor
from .spa import SpaLayer, gsa_forward, spa_forward

log = logging.getLogger(__name__)


@dataclass
class CostReport:
    variant: str
    N: int
    S: int
    C: int
    flops: int
    params: int
    act_bytes: int
    wall_ns_median: int | None = None


def _check_dims(**dims):
    for k, v in dims.items():
        if v < 1:
            raise ValueError(f"{k} must be >= 1, got {v}")


def cwpa_params(c_in: int, c_out: int, hidden: int) -> int:
    return 2 * ((c_in + 3) * hidden + hidden + hidden * c_out + c_out)


def count_cwpa(Q: int, K: int, c_in: int, c_out: int, hidden: int, relation: str = "sub") -> tuple[int, int]:
    """(flops, act_bytes) of one CWPA pass, untied mappings."""
    _check_dims(Q=Q, K=K, c_in=c_in, c_out=c_out, hidden=hidden)
    rel = 0 if relation == "key_only" else c_in
    pairs = Q * K
    flops = pairs * (rel + 6 + 4 * (c_in + 3) * hidden + 4 * hidden + 4 * hidden * c_out + 10 * c_out)
    words = pairs * (rel + 9 + c_in + 6 * hidden + 7 * c_out) + Q * c_out
    return flops, 8 * words


def count_spa(N: int, S: int, C: int, hidden: int | None = None, relation: str = "sub") -> CostReport:
    """SPA layer with every input point as a query (C in and out)."""
    hidden = hidden or C
    _check_dims(N=N, S=S, C=C, hidden=hidden)
    f, b = count_cwpa(N, S, C, C, hidden, relation)
    flops = N * S * (4 * C + 23) + f
    act = 8 * (12 * N * S + 3 * S + S * C) + b
    return CostReport("spa", N, S, C, flops, S * C + cwpa_params(C, C, hidden), act)


def count_gsa(N: int, C: int, hidden: int | None = None, relation: str = "sub") -> CostReport:
    """CWPA with all N points as keys for every query."""
    hidden = hidden or C
    _check_dims(N=N, C=C, hidden=hidden)
    f, b = count_cwpa(N, N, C, C, hidden, relation)
    return CostReport("gsa", N, N, C, f, cwpa_params(C, C, hidden), b)


# --------------------------------------------------------------------------
# instrumented runs


def _inputs(N: int, C: int, seed: int):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(N, 3))
    f = rng.normal(size=(N, C))
    return Tensor(x), Tensor(f)


def make_layers(S: int, C: int, hidden: int | None = None, seed: int = 0):
    rng = np.random.default_rng(seed)
    spa = SpaLayer(C, C, rng, n_sp=S, hidden=hidden)
    gsa = CwpaParams(C, C, rng, hidden)
    return spa, gsa


def instrumented(variant: str, N: int, S: int, C: int, hidden: int | None = None,
                 relation: str = "sub", dry: bool = True, seed: int = 0) -> CostReport:
    """Run the real forward code under the op counter.

    ``dry=True`` propagates shapes only (no arithmetic), which keeps the
    quadratic GSA tally feasible at large N.
    """
    spa, gsa = make_layers(S, C, hidden, seed)
    cfg = AttnConfig(relation)
    X, F = _inputs(N, C, seed)
    with nx.no_grad(), nx.count_ops(dry=dry) as counter:
        if variant == "spa":
            spa_forward(X, F, spa, cfg)
        elif variant == "gsa":
            gsa_forward(X, F, gsa, cfg)
        else:
            raise ValueError(f"unknown variant {variant!r}")
    params = spa.num_parameters() if variant == "spa" else gsa.num_parameters()
    return CostReport(variant, N, S if variant == "spa" else N, C, counter.flops, params, counter.act_bytes)


def wall_time(variant: str, N: int, S: int, C: int, hidden: int | None = None,
              warmup: int = 3, runs: int = 10, seed: int = 0, chunk: int = 8) -> int:
    """Median wall-clock nanoseconds of an inference forward pass."""
    if warmup < 3 or runs < 10:
        raise ValueError("need at least 3 warmup and 10 measured runs")
    spa, gsa = make_layers(S, C, hidden, seed)
    cfg = AttnConfig()
    X, F = _inputs(N, C, seed)

    def once():
        with nx.no_grad():
            if variant == "spa":
                spa_forward(X, F, spa, cfg)
            else:
                gsa_forward(X, F, gsa, cfg, chunk=chunk)

    for _ in range(warmup):
        once()
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter_ns()
        once()
        samples.append(time.perf_counter_ns() - t0)
    med = int(np.median(samples))
    if med < 100_000:
        log.warning("median %d ns for %s N=%d is near timer resolution", med, variant, N)
    return med


def loglog_slope(ns, costs) -> float:
    return float(np.polyfit(np.log(np.asarray(ns, float)), np.log(np.asarray(costs, float)), 1)[0])


def sweep(ns, S: int = 16, C: int = 64, hidden: int | None = None, wall: bool = True,
          wall_max_n: int = 2048, warmup: int = 3, runs: int = 10, verify: bool = True) -> list[CostReport]:
    """Analytic SPA and GSA reports per N, cross-checked against an
    instrumented (dry) run; wall times for N up to ``wall_max_n``."""
    reports = []
    for n in ns:
        for rep in (count_spa(n, S, C, hidden), count_gsa(n, C, hidden)):
            if verify:
                inst = instrumented(rep.variant, n, S, C, hidden)
                if (inst.flops, inst.act_bytes, inst.params) != (rep.flops, rep.act_bytes, rep.params):
                    raise AssertionError(f"closed form disagrees with instrumented count for {rep}: {inst}")
            if wall and n <= wall_max_n:
                rep.wall_ns_median = wall_time(rep.variant, n, S, C, hidden, warmup, runs)
            reports.append(rep)
    return reports


BENCH_COLUMNS = ["variant", "N", "S", "C", "flops", "params", "act_bytes", "wall_ns_median"]


def bench_csv(reports: list[CostReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(BENCH_COLUMNS)
    for r in reports:
        d = asdict(r)
        w.writerow(["" if d[c] is None else d[c] for c in BENCH_COLUMNS])
    return buf.getvalue()


def ratio_csv(reports: list[CostReport]) -> str:
    """SPA/GSA ratios per N."""
    by_n = {}
    for r in reports:
        by_n.setdefault(r.N, {})[r.variant] = r
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["N", "flops_ratio", "act_bytes_ratio", "wall_ratio"])
    for n, pair in by_n.items():
        s, g = pair.get("spa"), pair.get("gsa")
        if s is None or g is None:
            continue
        wall = "" if s.wall_ns_median is None or g.wall_ns_median is None else "%.6g" % (s.wall_ns_median / g.wall_ns_median)
        w.writerow([n, "%.6g" % (s.flops / g.flops), "%.6g" % (s.act_bytes / g.act_bytes), wall])
    return buf.getvalue()
