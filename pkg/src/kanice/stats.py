"""Multi-run aggregation and the paired t-test.

The Student-t tail comes from the regularized incomplete beta function,
evaluated with the modified Lentz continued fraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TooFewRuns(ValueError):
    pass


class PairingMismatch(ValueError):
    pass


DEGENERATE_VARIANCE = "DegenerateVariance"


@dataclass
class RunSet:
    variant: str
    dataset: str
    accuracies: list
    seeds: list = field(default_factory=list)

    def __post_init__(self):
        self.accuracies = [float(a) for a in self.accuracies]
        self.seeds = [int(s) for s in self.seeds]
        if self.seeds and len(self.seeds) != len(self.accuracies):
            raise PairingMismatch("one seed per run is required")


def summarize(rs: RunSet | list) -> dict:
    """Mean and Bessel-corrected sample std (None for a single run)."""
    values = np.asarray(rs.accuracies if isinstance(rs, RunSet) else rs, dtype=np.float64)
    if values.size == 0:
        raise TooFewRuns("at least one run is required")
    mean = math.fsum(values) / values.size
    if values.size < 2:
        return {"n": 1, "mean": mean, "std": None}
    ss = math.fsum((values - mean) ** 2)
    return {"n": int(values.size), "mean": mean, "std": math.sqrt(ss / (values.size - 1))}


# ---------------------------------------------------------------- special functions

def _beta_continued_fraction(a: float, b: float, x: float, max_iter: int = 500, tol: float = 1e-15) -> float:
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < tol:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and x in [0, 1]."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast on this side; use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _beta_continued_fraction(a, b, x) / a
    return 1.0 - front * _beta_continued_fraction(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, dof: float) -> float:
    """P(|T| >= |t|) for T ~ Student-t with ``dof`` degrees of freedom."""
    if dof <= 0:
        raise ValueError("dof must be positive")
    if math.isnan(t):
        return math.nan
    if math.isinf(t):
        return 0.0
    t2 = t * t
    if t2 < dof:
        # x = dof / (dof + t^2) is close to 1; go through the complement,
        # which is formed without cancellation
        return 1.0 - regularized_incomplete_beta(0.5, dof / 2.0, t2 / (dof + t2))
    return regularized_incomplete_beta(dof / 2.0, 0.5, dof / (dof + t2))


def student_t_cdf(t: float, dof: float) -> float:
    half = 0.5 * student_t_two_sided_p(t, dof)
    return 1.0 - half if t > 0 else half


# ---------------------------------------------------------------- paired test

@dataclass
class TTestResult:
    t: float
    p: float
    dof: int
    mean_diff: float
    std_diff: float
    flag: str | None = None

    @property
    def degenerate(self) -> bool:
        return self.flag == DEGENERATE_VARIANCE

    def to_dict(self) -> dict:
        def clean(v):
            return None if isinstance(v, float) and not math.isfinite(v) else v
        return {"t": clean(self.t), "p": clean(self.p), "dof": self.dof, "mean_diff": self.mean_diff,
                "std_diff": self.std_diff, "flag": self.flag}


def paired_t_test(a: RunSet | list, b: RunSet | list, rel_tol: float = 1e-9) -> TTestResult:
    """Two-sided paired t-test on per-run differences ``a - b``.

    Differences whose spread is below ``rel_tol`` times the data scale are
    treated as constant (float subtraction of rounded percentages leaves
    ~1e-14 noise); the result is then flagged DegenerateVariance with
    t and p set to NaN.
    """
    if isinstance(a, RunSet) and isinstance(b, RunSet) and a.seeds and b.seeds and a.seeds != b.seeds:
        raise PairingMismatch(f"seed lists differ: {a.seeds} vs {b.seeds}")
    xa = np.asarray(a.accuracies if isinstance(a, RunSet) else a, dtype=np.float64)
    xb = np.asarray(b.accuracies if isinstance(b, RunSet) else b, dtype=np.float64)
    if xa.shape != xb.shape:
        raise PairingMismatch(f"run counts differ: {xa.size} vs {xb.size}")
    if xa.size < 2:
        raise TooFewRuns("a paired t-test needs at least two runs")
    d = xa - xb
    n = d.size
    s = summarize(list(d))
    mean, std = s["mean"], s["std"]
    scale = max(1.0, float(np.abs(xa).max()), float(np.abs(xb).max()))
    if std <= rel_tol * scale:
        return TTestResult(math.nan, math.nan, n - 1, mean, std, DEGENERATE_VARIANCE)
    t = mean / (std / math.sqrt(n))
    return TTestResult(t, student_t_two_sided_p(t, n - 1), n - 1, mean, std)
