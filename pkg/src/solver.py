"""Weighted projection of a frequency vector onto a shifted cone.

Solves ``min (pi - A nu)' W (pi - A nu)`` over ``nu >= nu_lower`` by writing
``nu = nu_lower + s`` with ``s >= 0``. The quadratic in ``s`` has Hessian
``H = A' W A`` and linear term ``f = -A' W (pi - A nu_lower)``; each step
moves ``s_j`` against the gradient ``(H s + f)_j`` scaled by ``d_j`` and
clips at zero. The gradient is read off the residual ``r = A nu - pi`` as
``A' W r``, so a coordinate update only touches the rows of its column.
"""

import dataclasses
import enum
from functools import cached_property
from typing import Optional, Union

import numpy as np
from loguru import logger
from numba import jit
from scipy import sparse

from src.cone import ConeMatrix
from src.exceptions import ConfigError, DimensionMismatch, NotConverged, NumericalError

MONOTONE_SLACK = 1e-12


class StepRule(str, enum.Enum):
    ROW_SUM = "row_sum"  # d_j = 1 / (H 1)_j
    DIAGONAL = "diagonal"  # d_j = 1 / H_jj


class SweepOrder(str, enum.Enum):
    GAUSS_SEIDEL = "gauss_seidel"
    JACOBI = "jacobi"


@dataclasses.dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-10
    max_iter: int = 200_000
    step: StepRule = StepRule.ROW_SUM
    sweep: SweepOrder = SweepOrder.GAUSS_SEIDEL

    def __post_init__(self):
        try:
            object.__setattr__(self, "step", StepRule(self.step))
            object.__setattr__(self, "sweep", SweepOrder(self.sweep))
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.tol <= 0 or self.max_iter < 1:
            raise ConfigError(f"Need tol > 0 and max_iter >= 1, got {self.tol}, {self.max_iter}")
        if self.sweep == SweepOrder.JACOBI and self.step == StepRule.DIAGONAL:
            # simultaneous 1/H_jj steps can overshoot
            raise ConfigError("Jacobi sweeps require the row_sum step")


@dataclasses.dataclass(frozen=True, eq=False)
class WeightMatrix:
    """Positive diagonal weights; ``weights is None`` means the identity."""

    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.weights is not None:
            weights = np.array(self.weights, dtype=float)
            if weights.ndim != 1 or np.any(weights <= 0) or not np.all(np.isfinite(weights)):
                raise ConfigError("Weights must be a vector of positive finite numbers")
            weights.setflags(write=False)
            object.__setattr__(self, "weights", weights)

    @classmethod
    def identity(cls) -> "WeightMatrix":
        return cls()

    @classmethod
    def diagonal(cls, weights) -> "WeightMatrix":
        return cls(weights)

    @property
    def is_identity(self) -> bool:
        return self.weights is None

    @property
    def label(self) -> str:
        return "identity" if self.is_identity else "diagonal"

    def for_rows(self, rows: int) -> np.ndarray:
        if self.weights is None:
            return np.ones(rows)
        if self.weights.shape[0] != rows:
            raise DimensionMismatch(f"{self.weights.shape[0]} weights for {rows} rows")
        return np.asarray(self.weights)


@dataclasses.dataclass(frozen=True, eq=False)
class NnlsProblem:
    """``min 0.5 s'Hs + f's`` over ``s >= 0`` with ``H = A' W A``.

    ``H`` is held through its factors ``A`` and ``w``; the explicit matrix
    is only formed when ``H`` is read.
    """

    A: sparse.csc_matrix
    w: np.ndarray
    f: np.ndarray
    d: np.ndarray

    @classmethod
    def build(
        cls, A, weights: WeightMatrix, pi, nu_lower, step=StepRule.ROW_SUM, d=None
    ) -> "NnlsProblem":
        A = _as_csc(A)
        w = weights.for_rows(A.shape[0])
        f = -np.asarray(A.T @ (w * _shift(A, pi, nu_lower))).ravel()
        return cls(A=A, w=w, f=f, d=_steps(A, w, StepRule(step)) if d is None else d)

    @cached_property
    def H(self) -> sparse.csr_matrix:
        H = (self.A.T @ (sparse.diags(self.w) @ self.A)).tocsr()
        if np.all(self.w == 1.0) and _is_binary(self.A):
            # shared-row counts between columns
            if np.any(H.data != np.round(H.data)) or (H.nnz and H.data.max() > np.diff(self.A.indptr).max()):
                logger.error("Identity-weighted Hessian is not a shared-row count")
                raise NumericalError("Identity-weighted Hessian is not a shared-row count")
        return H

    def gradient(self, slack) -> np.ndarray:
        """``H s + f``, without forming ``H``."""
        return np.asarray(self.A.T @ (self.w * (self.A @ slack))).ravel() + self.f


@dataclasses.dataclass(frozen=True, eq=False)
class ConeProjection:
    slack: np.ndarray
    nu: np.ndarray
    gamma: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool


def _is_binary(A: sparse.csc_matrix) -> bool:
    return bool(np.all((A.data == 0) | (A.data == 1)))


def _as_csc(A) -> sparse.csc_matrix:
    if isinstance(A, ConeMatrix):
        return A.to_sparse()
    if sparse.isspmatrix_csc(A) and A.dtype == np.float64:
        return A
    if sparse.issparse(A):
        return sparse.csc_matrix(A, dtype=float)
    return sparse.csc_matrix(np.asarray(A, dtype=float))


def _lower(nu_lower, cols: int) -> np.ndarray:
    lower = np.broadcast_to(np.asarray(nu_lower, dtype=float), (cols,)).copy()
    if np.any(lower < 0):
        raise ConfigError("Lower bound on nu must be non-negative")
    return lower


def _shift(A, pi, nu_lower) -> np.ndarray:
    """``pi - A nu_lower``."""
    return np.asarray(pi, dtype=float) - A @ _lower(nu_lower, A.shape[1])


@jit(nopython=True, cache=True, nogil=True)
def _gauss_seidel_sweep(indptr, indices, data, wdata, d, s, r):
    """One coordinate sweep over the CSC columns, updating ``s`` and ``r`` in place."""
    for j in range(d.shape[0]):
        lo = indptr[j]
        hi = indptr[j + 1]
        gradient = 0.0
        for k in range(lo, hi):
            gradient += wdata[k] * r[indices[k]]
        updated = s[j] - d[j] * gradient
        if updated < 0.0:
            updated = 0.0
        delta = updated - s[j]
        if delta != 0.0:
            s[j] = updated
            for k in range(lo, hi):
                r[indices[k]] += delta * data[k]
    return s


def _steps(A: sparse.csc_matrix, w: np.ndarray, step: StepRule) -> np.ndarray:
    if step == StepRule.ROW_SUM:
        scale = A.T @ (w * (A @ np.ones(A.shape[1])))
    else:
        scale = A.multiply(A).T @ w
    scale = np.asarray(scale).ravel()
    if np.any(scale <= 0):
        empty = np.flatnonzero(scale <= 0)[:5].tolist()
        logger.error(f"Cone columns without positive entries: {empty}")
        raise DimensionMismatch(f"Cone columns without positive entries: {empty}")
    return 1.0 / scale


class ConeProjector:
    """Reusable projector for one cone matrix and weight matrix.

    Set-up (step sizes, index arrays) is done once; ``project`` can then be
    called for many frequency vectors, optionally warm-started.
    """

    def __init__(self, A, weights: WeightMatrix = WeightMatrix.identity(), config: SolverConfig = SolverConfig()):
        self.A = _as_csc(A)
        self.weights = weights
        self.config = config
        self.rows, self.cols = self.A.shape
        self.w = weights.for_rows(self.rows)
        self.d = _steps(self.A, self.w, config.step)
        self._indptr = self.A.indptr.astype(np.int64)
        self._indices = self.A.indices.astype(np.int64)
        self._data = np.ascontiguousarray(self.A.data, dtype=np.float64)
        self._wdata = self.w[self.A.indices] * self._data

    def problem(self, pi, nu_lower) -> NnlsProblem:
        return NnlsProblem.build(self.A, self.weights, pi, nu_lower, self.config.step, d=self.d)

    def _state(self, problem: NnlsProblem, pi, lower, slack):
        residual = self.A @ (lower + slack) - pi
        gradient = problem.gradient(slack)
        objective = float(residual @ (self.w * residual))
        kkt = float(np.max(np.abs(np.minimum(slack, gradient)))) if self.cols else 0.0
        return residual, objective, kkt

    def project(self, pi, nu_lower, warm_start=None) -> ConeProjection:
        pi = np.asarray(pi, dtype=float)
        if pi.shape != (self.rows,):
            raise DimensionMismatch(f"Frequency vector of length {pi.shape} for {self.rows} rows")
        lower = _lower(nu_lower, self.cols)
        problem = self.problem(pi, lower)
        slack = np.zeros(self.cols) if warm_start is None else np.maximum(np.asarray(warm_start, dtype=float), 0.0)
        if slack.shape != (self.cols,):
            raise DimensionMismatch(f"Warm start of length {slack.shape} for {self.cols} columns")

        residual, objective, kkt = self._state(problem, pi, lower, slack)
        iterations = 0
        sweep = self._jacobi if self.config.sweep == SweepOrder.JACOBI else self._gauss_seidel
        while kkt > self.config.tol and iterations < self.config.max_iter:
            slack = sweep(slack, residual)
            iterations += 1
            residual, new_objective, kkt = self._state(problem, pi, lower, slack)
            if new_objective > objective + MONOTONE_SLACK * max(1.0, objective):
                logger.error(f"Objective rose from {objective} to {new_objective} at sweep {iterations}")
                raise NumericalError(f"Objective rose from {objective} to {new_objective}")
            objective = new_objective

        nu = lower + slack
        projection = ConeProjection(
            slack=slack,
            nu=nu,
            gamma=self.A @ nu,
            objective=objective,
            kkt_residual=kkt,
            iterations=iterations,
            converged=kkt <= self.config.tol,
        )
        logger.debug(f"Projection: {iterations} sweeps, objective {objective:.3e}, kkt {kkt:.1e}")
        return projection

    def _gauss_seidel(self, slack: np.ndarray, residual: np.ndarray) -> np.ndarray:
        return _gauss_seidel_sweep(
            self._indptr, self._indices, self._data, self._wdata, self.d, slack.copy(), residual.copy()
        )

    def _jacobi(self, slack: np.ndarray, residual: np.ndarray) -> np.ndarray:
        gradient = self.A.T @ (self.w * residual)
        return np.maximum(slack - self.d * gradient, 0.0)


def project_onto_cone(
    A,
    weights: WeightMatrix,
    pi,
    nu_lower,
    tol: float = 1e-10,
    max_iter: int = 200_000,
    warm_start=None,
    step: Union[StepRule, str] = StepRule.ROW_SUM,
    sweep: Union[SweepOrder, str] = SweepOrder.GAUSS_SEIDEL,
    allow_nonconverged: bool = False,
) -> ConeProjection:
    config = SolverConfig(tol=tol, max_iter=max_iter, step=step, sweep=sweep)
    projection = ConeProjector(A, weights, config).project(pi, nu_lower, warm_start)
    if not projection.converged and not allow_nonconverged:
        logger.error(
            f"Projection did not converge in {max_iter} sweeps (kkt {projection.kkt_residual:.2e})"
        )
        raise NotConverged(
            f"Projection did not converge in {max_iter} sweeps", projection=projection
        )
    return projection


def j_statistic(n: int, projection: ConeProjection) -> float:
    if not projection.converged:
        logger.warning(f"J computed from a non-converged projection (kkt {projection.kkt_residual:.2e})")
    return float(n * projection.objective)
