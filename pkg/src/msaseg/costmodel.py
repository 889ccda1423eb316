"""The computation-cost model of the decoupled transformer, as executable
code: closed-form operation counts, crossover analysis, and an empirical
MAC counter driving the real kernels.

Analytic counts use exact python integers (3n^3 overflows 32-bit around
n = 1024). The analytic token count n and the empirical kernel dimensions
are reconciled only through scaling exponents, never absolute counts.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .blocks import attention
from .counting import mac_counting, mac_scope
from .errors import ParameterError
from .motion import MotionAligner
from .tensor import Tensor


@dataclass
class CostReport:
    n: int
    c_vanilla: int
    c_pst: int
    c_att: int
    c_decoupled: int
    ratio: float
    empirical_macs: dict = None

    def __post_init__(self):
        if self.c_decoupled != self.c_pst + self.c_att:
            raise ParameterError("decoupled cost must be the exact sum of its parts")
        if min(self.n, self.c_vanilla, self.c_pst, self.c_att) < 0:
            raise ParameterError("costs must be nonnegative")


def cost_vanilla(n):
    """Joint space-time attention cost over three frames: 3 * n^3."""
    n = int(n)
    if n < 1:
        raise ParameterError(f"token count must be >= 1, got {n}")
    return 3 * n**3


def cost_decoupled(n):
    """Decoupled cost (c_pst, c_att, total) = (3n^2, 24n, 3n^2 + 24n)."""
    n = int(n)
    if n < 1:
        raise ParameterError(f"token count must be >= 1, got {n}")
    c_pst = 3 * n**2
    c_att = 2 * 3 * n + 2 * 9 * n
    return c_pst, c_att, c_pst + c_att


def crossover_root(lo=1.0, hi=16.0, tol=1e-12):
    """Positive root of 3n^3 = 3n^2 + 24n, located by bisection."""
    d = lambda n: 3 * n**3 - 3 * n**2 - 24 * n
    if not d(lo) < 0 < d(hi):
        raise ParameterError("bracket does not straddle the root")
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if d(mid) < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass
class CostAnalysis:
    reports: list
    crossover: float
    ratio_over_n: dict = field(default_factory=dict)


def cost_analysis(n_values):
    """Per-n cost reports plus the crossover root and the ratio/n trend.

    Also validates the monotonicity claims: the vanilla-minus-decoupled
    difference is positive and strictly increasing for integer n >= 4.
    """
    ns = [int(n) for n in n_values]
    if not ns:
        raise ParameterError("need at least one token count")
    reports = []
    for n in ns:
        cv = cost_vanilla(n)
        c_pst, c_att, cd = cost_decoupled(n)
        reports.append(CostReport(n, cv, c_pst, c_att, cd, ratio=cv / cd))
    prev_diff = None
    for n in range(4, max(max(ns), 5) + 1):
        diff = cost_vanilla(n) - cost_decoupled(n)[2]
        if diff <= 0:
            raise ParameterError(f"difference not positive at n={n}")
        if prev_diff is not None and diff <= prev_diff:
            raise ParameterError(f"difference not strictly increasing at n={n}")
        prev_diff = diff
    return CostAnalysis(
        reports=reports,
        crossover=crossover_root(),
        ratio_over_n={r.n: r.ratio / r.n for r in reports},
    )


@dataclass(frozen=True)
class BenchConfig:
    sizes: tuple = (16, 64, 256)
    dim: int = 8
    heads: int = 2
    seed: int = 0
    count_macs: bool = True

    def __post_init__(self):
        for s in self.sizes:
            r = int(np.sqrt(s))
            if r * r != s:
                raise ParameterError(f"bench sizes must be perfect squares, got {s}")


def count_macs(cfg: BenchConfig = None):
    """Measured MAC counts of the real kernels at several token counts.

    Returns {"spatial_attention": {T: macs}, "temporal_fuse": {P: macs}}.
    Spatial attention is the pure scaled-dot-product op (quadratic in T);
    the temporal stage is deformable alignment plus per-position attention
    over 3 tokens (linear in the position count).
    """
    cfg = cfg or BenchConfig()
    if not cfg.count_macs:
        raise ParameterError("MAC instrumentation is disabled in this config")
    rng = np.random.default_rng(cfg.seed)
    aligner = MotionAligner(cfg.dim, cfg.heads, rng=rng, dtype=np.float32)
    spatial = {}
    temporal = {}
    for size in cfg.sizes:
        tokens = Tensor(rng.standard_normal((size, cfg.dim)).astype(np.float32))
        with mac_counting() as counter:
            with mac_scope("spatial_attention"):
                attention(tokens, tokens, tokens, cfg.heads)
            spatial[size] = counter.read("spatial_attention")
        side = int(np.sqrt(size))
        maps = [
            Tensor(rng.standard_normal((cfg.dim, side, side)).astype(np.float32))
            for _ in range(3)
        ]
        with mac_counting() as counter:
            with mac_scope("temporal_fuse"):
                aligner.att_fuse(None, *maps)
            temporal[size] = counter.read("temporal_fuse")
    return {"spatial_attention": spatial, "temporal_fuse": temporal}


def loglog_slope(counts):
    """Least-squares slope of log(count) against log(size)."""
    sizes = np.array(sorted(counts), dtype=np.float64)
    values = np.array([counts[int(s)] for s in sizes], dtype=np.float64)
    return float(np.polyfit(np.log(sizes), np.log(values), 1)[0])
