"""Clamped uniform B-spline bases, spline functions, least-squares fitting and
grid extension."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, as_tensor, primitive


class InvalidBasis(ValueError):
    pass


class RankDeficient(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class SplineBasis:
    """Degree-``k`` B-spline basis on a uniform grid of ``g`` intervals over
    ``[lo, hi]`` with ``k``-fold repeated end knots, giving ``g + k`` basis
    functions."""

    grid_size: int
    degree: int = 3
    lo: float = -1.0
    hi: float = 1.0
    knots: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if int(self.grid_size) != self.grid_size or self.grid_size < 1:
            raise InvalidBasis(f"grid size must be a positive integer, got {self.grid_size}")
        if int(self.degree) != self.degree or self.degree < 0:
            raise InvalidBasis(f"degree must be a non-negative integer, got {self.degree}")
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.hi > self.lo:
            raise InvalidBasis(f"domain [{self.lo}, {self.hi}] is empty or not finite")
        interior = np.linspace(self.lo, self.hi, self.grid_size + 1)
        knots = np.concatenate([np.full(self.degree, float(self.lo)), interior,
                                np.full(self.degree, float(self.hi))])
        knots.setflags(write=False)
        object.__setattr__(self, "knots", knots)

    @property
    def n_basis(self) -> int:
        return self.grid_size + self.degree

    @property
    def domain(self) -> tuple[float, float]:
        return (self.lo, self.hi)

    def greville(self) -> np.ndarray:
        """Knot averages at which coefficients reproduce linear functions."""
        k = self.degree
        t = self.knots
        if k == 0:
            return 0.5 * (t[:-1] + t[1:])
        return np.array([t[i + 1:i + k + 1].mean() for i in range(self.n_basis)])

    def with_grid(self, grid_size: int, lo: float | None = None, hi: float | None = None) -> SplineBasis:
        return SplineBasis(grid_size, self.degree,
                           self.lo if lo is None else lo, self.hi if hi is None else hi)


def _check_knots(t: np.ndarray, k: int) -> None:
    if t.ndim != 1 or len(t) < 2 * k + 2 or np.any(np.diff(t) < 0):
        raise InvalidBasis("knot vector must be non-decreasing with at least 2k+2 entries")


def _degree0(basis: SplineBasis, x: np.ndarray) -> np.ndarray:
    t = basis.knots
    k, g = basis.degree, basis.grid_size
    # spans k .. k+g-1 are the non-degenerate intervals; the last one is closed
    span = np.clip(np.searchsorted(t, x, side="right") - 1, k, k + g - 1)
    b = np.zeros(x.shape + (len(t) - 1,), dtype=x.dtype)
    np.put_along_axis(b, span[..., None], 1.0, axis=-1)
    return b


def _raise_degree(b: np.ndarray, x: np.ndarray, t: np.ndarray, d: int) -> np.ndarray:
    """One Cox-de Boor step: degree d-1 values -> degree d values."""
    n = b.shape[-1] - 1
    left_den = t[d:d + n] - t[:n]
    right_den = t[d + 1:d + 1 + n] - t[1:1 + n]
    with np.errstate(divide="ignore", invalid="ignore"):
        left_w = np.where(left_den > 0, 1.0 / left_den, 0.0).astype(x.dtype)
        right_w = np.where(right_den > 0, 1.0 / right_den, 0.0).astype(x.dtype)
    xe = x[..., None]
    return ((xe - t[:n].astype(x.dtype)) * left_w * b[..., :-1]
            + (t[d + 1:d + 1 + n].astype(x.dtype) - xe) * right_w * b[..., 1:])


def clamp_to_domain(basis: SplineBasis, x: np.ndarray) -> np.ndarray:
    return np.clip(x, basis.lo, basis.hi)


def basis_values(basis: SplineBasis, x, with_derivative: bool = False, extrapolate: bool = False):
    """Evaluate all ``g + k`` basis functions at every entry of ``x``.

    Inputs outside ``[lo, hi]`` are clamped to the domain first, unless
    ``extrapolate`` is set, in which case the end polynomial pieces are
    continued.  Returns an array of shape ``x.shape + (g + k,)``; with
    ``with_derivative`` also the derivative of each basis function with
    respect to the (clamped) input.
    """
    _check_knots(basis.knots, basis.degree)
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    xc = x if extrapolate else clamp_to_domain(basis, x)
    t = basis.knots
    b = _degree0(basis, xc)
    for d in range(1, basis.degree + 1):
        if with_derivative and d == basis.degree:
            lower = b
        b = _raise_degree(b, xc, t, d)
    if not with_derivative:
        return b
    k = basis.degree
    if k == 0:
        return b, np.zeros_like(b)
    n = b.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        lw = np.where(t[k:k + n] > t[:n], k / (t[k:k + n] - t[:n]), 0.0).astype(x.dtype)
        rw = np.where(t[k + 1:k + 1 + n] > t[1:1 + n], k / (t[k + 1:k + 1 + n] - t[1:1 + n]), 0.0).astype(x.dtype)
    db = lower[..., :-1] * lw - lower[..., 1:] * rw
    return b, db


def basis_eval(basis: SplineBasis, x: float) -> np.ndarray:
    """Basis values at a single point, computed in 64-bit."""
    return basis_values(basis, np.float64(x))


def basis_tensor(basis: SplineBasis, x: Tensor) -> Tensor:
    """Differentiable basis expansion: ``x.shape -> x.shape + (g + k,)``.

    The gradient with respect to ``x`` vanishes where ``x`` was clamped.
    """
    x = as_tensor(x)
    if not x.requires_grad:
        return primitive(basis_values(basis, x.data), (x,), lambda g: (None,))
    b, db = basis_values(basis, x.data, with_derivative=True)
    inside = (x.data >= basis.lo) & (x.data <= basis.hi)

    def vjp(g):
        return ((g * db).sum(axis=-1) * inside,)

    return primitive(b, (x,), vjp)


@dataclass
class SplineFunction:
    """phi(x) = sum_i c_i B_i(x) over a fixed basis."""

    basis: SplineBasis
    coefficients: Tensor

    def __post_init__(self):
        self.coefficients = as_tensor(self.coefficients)
        if self.coefficients.shape != (self.basis.n_basis,):
            raise InvalidBasis(f"expected {self.basis.n_basis} coefficients, "
                               f"got shape {self.coefficients.shape}")

    def __call__(self, x) -> Tensor:
        return spline_eval(self, x)


def spline_eval(f: SplineFunction, x) -> Tensor:
    return (basis_tensor(f.basis, as_tensor(x)) * f.coefficients).sum(axis=-1)


def ridge_solve(a: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least squares via ridge-regularized normal equations.

    Solves ``(A^T A + tau I) c = A^T y`` with ``tau = 1e-8 * trace(A^T A) / n``
    for ``n`` unknowns.  ``y`` may hold several right-hand sides as columns.
    """
    a = np.asarray(a, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ata = a.T @ a
    n = ata.shape[0]
    trace = np.trace(ata)
    if not np.isfinite(trace) or trace <= 0:
        raise RankDeficient("collocation matrix is zero; no sample touches the basis")
    tau = 1e-8 * trace / n
    try:
        c = np.linalg.solve(ata + tau * np.eye(n), a.T @ y)
    except np.linalg.LinAlgError as exc:
        raise RankDeficient(str(exc)) from exc
    if not np.all(np.isfinite(c)):
        raise RankDeficient("least-squares solution is not finite")
    return c


def fit_least_squares(basis: SplineBasis, xs, ys) -> SplineFunction:
    xs = np.asarray(xs, dtype=np.float64).ravel()
    ys = np.asarray(ys, dtype=np.float64).ravel()
    if xs.shape != ys.shape:
        raise ValueError(f"xs and ys differ in length: {xs.shape} vs {ys.shape}")
    if len(xs) < basis.n_basis:
        raise RankDeficient(f"need at least {basis.n_basis} samples, got {len(xs)}")
    coef = ridge_solve(basis_values(basis, xs), ys)
    return SplineFunction(basis, Tensor(coef))


def extended_basis(basis: SplineBasis, new_g: int, samples) -> SplineBasis:
    """Basis with ``new_g`` uniform intervals over the old domain, grown by
    whole intervals of the same width on either side until it covers every
    sample.  Old knots stay knots whenever ``new_g`` is a multiple of the old
    grid size."""
    if int(new_g) != new_g or new_g < basis.grid_size:
        raise ValueError(f"new grid size {new_g} is smaller than the current {basis.grid_size}")
    samples = np.asarray(samples, dtype=np.float64)
    h = (basis.hi - basis.lo) / new_g
    below = above = 0
    if samples.size:
        # the small slack keeps a sample sitting on a would-be knot from adding an interval
        below = max(0, int(np.ceil((basis.lo - float(samples.min())) / h - 1e-9)))
        above = max(0, int(np.ceil((float(samples.max()) - basis.hi) / h - 1e-9)))
    return basis.with_grid(int(new_g) + below + above, basis.lo - below * h, basis.hi + above * h)


def grid_extend(f: SplineFunction, new_g: int, samples) -> SplineFunction:
    """Refit ``f`` onto a grid of ``new_g`` intervals.

    The new coefficients minimize the squared difference to the old spline
    over ``samples``.  When samples fall outside the old domain, the domain
    widens (see :func:`extended_basis`) and the old spline's end pieces are
    continued there as the fitting target.
    """
    samples = np.asarray(samples, dtype=np.float64).ravel()
    new_basis = extended_basis(f.basis, new_g, samples)
    old = basis_values(f.basis, samples, extrapolate=True) @ f.coefficients.data.astype(np.float64)
    return fit_least_squares(new_basis, samples, old)
