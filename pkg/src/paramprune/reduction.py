"""Weighted regression problems, exact and generalized base parameters, and the
normalized IDM/DDM error measures.

Rows of the stacked observation matrix are weighted by the inverse nominal force of
their coordinate. Least-squares work runs on the triangular factor of a thin QR of
the weighted ``[W chi]``: for any column subset the residual norm is unchanged by this
compression, so candidate evaluation costs O(n_phi^3) instead of O(rows n_phi^2).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla

from .dynamics import ddm_regressors, regressor, solve_dependent
from .errors import InternalConsistencyError, MassSingular
from .mbmodel import MultibodyModel, phi_vector

RANK_TOL = 1e-8
LSTSQ_RCOND = 1e-12
IDENTITY_TOL = 1e-6
MASS_COND_LIMIT = 1e12


@dataclass
class RegressionProblem:
    """Stacked observation matrix and forces.

    ``sigma_half`` holds the diagonal of the block-diagonal weighting, one entry per row.
    """

    W: np.ndarray
    chi: np.ndarray
    sigma_half: np.ndarray
    labels: tuple
    n_dof: int
    indices: tuple = ()

    def __post_init__(self):
        if self.W.shape[0] != self.chi.shape[0] or self.W.shape[0] != self.sigma_half.shape[0]:
            raise ValueError("inconsistent row counts")
        if self.W.shape[1] != len(self.labels):
            raise ValueError("label count differs from column count")
        if np.any(self.sigma_half <= 0):
            raise ValueError("weights must be strictly positive")

    @property
    def n_params(self) -> int:
        return self.W.shape[1]

    @property
    def n_samples(self) -> int:
        return self.W.shape[0] // self.n_dof

    @cached_property
    def Ww(self) -> np.ndarray:
        return self.W / self.sigma_half[:, None]

    @cached_property
    def chiw(self) -> np.ndarray:
        return self.chi / self.sigma_half

    @cached_property
    def compressed(self) -> np.ndarray:
        """Upper-triangular factor of the weighted ``[W chi]``; last column is chi."""
        A = np.column_stack([self.Ww, self.chiw])
        if A.shape[0] < A.shape[1]:
            A = np.vstack([A, np.zeros((A.shape[1] - A.shape[0], A.shape[1]))])
        return sla.qr(A, mode="r")[0][:A.shape[1]]

    @property
    def R_W(self) -> np.ndarray:
        return self.compressed[:, :-1]

    @property
    def r_chi(self) -> np.ndarray:
        return self.compressed[:, -1]

    @cached_property
    def chi_norm(self) -> float:
        return float(np.linalg.norm(self.chiw))

    @classmethod
    def from_arrays(cls, W, chi, nominal, labels=None, indices=()):
        """Problem from per-sample blocks ``W`` (N, n, P) and ``chi`` (N, n)."""
        W = np.asarray(W, dtype=float)
        N, n, P = W.shape
        labels = tuple(labels) if labels is not None else tuple(f"p{i}" for i in range(P))
        sig = np.tile(np.asarray(nominal, dtype=float), N)
        return cls(W.reshape(N * n, P), np.asarray(chi, dtype=float).reshape(-1), sig, labels, n, tuple(indices))


def assemble(model: MultibodyModel, dataset, state=None) -> RegressionProblem:
    """Stack regressors and forces of every sample of ``dataset``."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    if dataset.z.shape[1] != model.n_dof:
        raise ValueError("dataset dimension does not match the model")
    if model.is_closed_loop and state is None:
        state = solve_dependent(model, dataset.z, dataset.dz)
    K = regressor(model, dataset.z, dataset.dz, dataset.ddz, state=state)
    pv = phi_vector(model)
    return RegressionProblem.from_arrays(K, dataset.tau, model.nominal_force, pv.labels, pv.indices)


def numeric_rank(problem, rel_tol=RANK_TOL) -> int:
    """Number of singular values of the weighted matrix above ``rel_tol * sigma_1``."""
    A = problem.R_W if isinstance(problem, RegressionProblem) else np.asarray(problem)
    s = np.linalg.svd(A, compute_uv=False)
    if len(s) == 0 or s[0] == 0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


# --- least squares ----------------------------------------------------------------------

@dataclass
class LstsqResult:
    x: np.ndarray
    rank: int
    rank_deficient: bool


def lstsq(A, B, rcond=LSTSQ_RCOND) -> LstsqResult:
    """Column-pivoted QR solve; minimum-norm SVD solve if the pivots reveal deficiency."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    n = A.shape[1]
    if n == 0:
        return LstsqResult(np.zeros((0,) + B.shape[1:]), 0, False)
    Q, R, piv = sla.qr(A, mode="economic", pivoting=True)
    d = np.abs(np.diag(R))
    rank = int(np.sum(d > rcond * d[0])) if d.size and d[0] > 0 else 0
    if rank == n:
        y = sla.solve_triangular(R, Q.T @ B)
        x = np.empty_like(y)
        x[piv] = y
        return LstsqResult(x, n, False)
    x, _, rk, _ = sla.lstsq(A, B, cond=rcond, lapack_driver="gelsd")
    return LstsqResult(x, int(rk), True)


def _split(problem, selected):
    sel = np.asarray(selected, dtype=int)
    exc = np.setdiff1d(np.arange(problem.n_params), sel)
    return sel, exc


def beta_coeffs(problem: RegressionProblem, selected) -> np.ndarray:
    """Least-squares coefficients expressing excluded columns through selected ones."""
    sel, exc = _split(problem, selected)
    if len(exc) == 0:
        return np.zeros((len(sel), 0))
    if len(sel) == 0:
        return np.zeros((0, len(exc)))
    return lstsq(problem.R_W[:, sel], problem.R_W[:, exc]).x


@dataclass
class BaseFit:
    phi_R_prime: np.ndarray
    beta: np.ndarray
    projector: np.ndarray  # W_R^+ W_R, identity for full column rank
    rank_deficient: bool
    identity_error: float


def fit_subset(problem: RegressionProblem, selected, phi_full=None) -> BaseFit:
    """``W_R^+ chi`` together with beta and, given ``phi_full``, the identity residual.

    The identity checked is ``W_R^+ chi = P phi_R + beta phi_E`` with
    ``P = W_R^+ W_R``; P is the identity when W_R has full column rank.
    """
    sel, exc = _split(problem, selected)
    k = len(sel)
    if k == 0:
        return BaseFit(np.zeros(0), np.zeros((0, len(exc))), np.zeros((0, 0)), False, 0.0)
    R = problem.R_W
    rhs = np.column_stack([problem.r_chi, R[:, exc], R[:, sel]])
    res = lstsq(R[:, sel], rhs)
    phi_R_prime = res.x[:, 0]
    beta = res.x[:, 1:1 + len(exc)]
    P = res.x[:, 1 + len(exc):] if res.rank_deficient else np.eye(k)
    err = 0.0
    if phi_full is not None:
        phi_full = np.asarray(phi_full, dtype=float)
        rhs_identity = P @ phi_full[sel] + beta @ phi_full[exc]
        err = float(np.linalg.norm(phi_R_prime - rhs_identity))
    return BaseFit(phi_R_prime, beta, P, res.rank_deficient, err)


def generalized_base(problem: RegressionProblem, selected, phi_full, tol=IDENTITY_TOL) -> np.ndarray:
    """Generalized base values ``W_R^+ chi``, verified against ``phi_R + beta phi_E``."""
    fit = fit_subset(problem, selected, phi_full)
    scale = max(float(np.linalg.norm(fit.phi_R_prime)), np.finfo(float).tiny)
    if fit.identity_error > tol * scale:
        raise InternalConsistencyError(
            f"generalized base identity violated: {fit.identity_error:.3e} > {tol:g} * {scale:.3e}")
    return fit.phi_R_prime


def _norm(v, ord):
    return float(np.linalg.norm(v, ord=ord))


def idm_error(problem: RegressionProblem, selected, phi_R_prime=None, norm=2) -> float:
    """Normalized weighted IDM residual; ``phi_R_prime`` defaults to the fit on ``problem``."""
    sel = np.asarray(selected, dtype=int)
    if problem.chi_norm == 0:
        raise ValueError("normalized error undefined for zero forces")
    if len(sel) == 0:
        return 1.0
    if phi_R_prime is None:
        phi_R_prime = lstsq(problem.R_W[:, sel], problem.r_chi).x
    if norm == 2:
        return _norm(problem.r_chi - problem.R_W[:, sel] @ phi_R_prime, 2) / problem.chi_norm
    resid = problem.chiw - problem.Ww[:, sel] @ phi_R_prime
    return _norm(resid, norm) / _norm(problem.chiw, norm)


def idm_error_direct(problem: RegressionProblem, selected, phi_R_prime=None) -> float:
    """Same as :func:`idm_error` but solved on the full weighted matrix (audit path)."""
    sel = np.asarray(selected, dtype=int)
    if len(sel) == 0:
        return 1.0
    if phi_R_prime is None:
        phi_R_prime = lstsq(problem.Ww[:, sel], problem.chiw).x
    return _norm(problem.chiw - problem.Ww[:, sel] @ phi_R_prime, 2) / problem.chi_norm


# --- direct dynamics error ------------------------------------------------------------------

@dataclass
class DdmTensors:
    """Parameter-linear mass matrix and bias over a dataset: M = Mt @ phi, delta = Dt @ phi."""

    Mt: np.ndarray
    Dt: np.ndarray
    ddz: np.ndarray
    tau: np.ndarray


def ddm_tensors(model: MultibodyModel, dataset, state=None) -> DdmTensors:
    if model.is_closed_loop and state is None:
        state = solve_dependent(model, dataset.z, dataset.dz)
    Mt, Dt = ddm_regressors(model, dataset.z, dataset.dz, state=state)
    return DdmTensors(Mt, Dt, np.asarray(dataset.ddz, dtype=float), np.asarray(dataset.tau, dtype=float))


def nominal_acceleration(dataset) -> np.ndarray:
    """Per-coordinate RMS acceleration of a dataset."""
    return np.sqrt(np.mean(np.asarray(dataset.ddz) ** 2, axis=0))


@dataclass
class DdmError:
    eps: float
    singular_index: int = -1
    max_cond: float = float("nan")

    @property
    def mass_singular(self) -> bool:
        return self.singular_index >= 0


def ddm_error_detail(tensors: DdmTensors, selected, phi_R_prime, nom_ddz, norm=2,
                     cond_limit=MASS_COND_LIMIT) -> DdmError:
    """Normalized acceleration error of the reduced direct dynamics (excluded params = 0)."""
    P = tensors.Mt.shape[-1]
    phi = np.zeros(P)
    phi[np.asarray(selected, dtype=int)] = phi_R_prime
    M = tensors.Mt @ phi
    delta = tensors.Dt @ phi
    cond = np.linalg.cond(M)
    bad = ~(cond < cond_limit)
    if bad.any():
        return DdmError(float("inf"), int(np.flatnonzero(bad)[0]), float(np.max(np.where(np.isfinite(cond), cond, np.inf))))
    pred = np.linalg.solve(M, (tensors.tau - delta)[..., None])[..., 0]
    nom = np.asarray(nom_ddz, dtype=float)
    num = _norm(((tensors.ddz - pred) / nom).ravel(), norm)
    den = _norm((tensors.ddz / nom).ravel(), norm)
    return DdmError(num / den, -1, float(np.max(cond)))


def ddm_error(model: MultibodyModel, selected, phi_R_prime, dataset, nom_ddz, tensors=None, norm=2) -> float:
    """eps_ddz; +inf when the reduced mass matrix is singular at some sample."""
    if tensors is None:
        tensors = ddm_tensors(model, dataset)
    return ddm_error_detail(tensors, selected, phi_R_prime, nom_ddz, norm).eps


def reduced_forward_dynamics(tensors: DdmTensors, selected, phi_R_prime, cond_limit=MASS_COND_LIMIT):
    """Accelerations predicted by the reduced model; raises MassSingular."""
    P = tensors.Mt.shape[-1]
    phi = np.zeros(P)
    phi[np.asarray(selected, dtype=int)] = phi_R_prime
    M = tensors.Mt @ phi
    cond = np.linalg.cond(M)
    bad = ~(cond < cond_limit)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise MassSingular("reduced mass matrix singular", float(cond[i]), i)
    return np.linalg.solve(M, (tensors.tau - tensors.Dt @ phi)[..., None])[..., 0]


# --- reduced models ---------------------------------------------------------------------------

@dataclass
class ReducedModel:
    selected: tuple
    excluded: tuple
    beta: np.ndarray
    phi_R_prime: np.ndarray
    labels: tuple = ()
    heuristic: str = ""
    eps_tau_est: float = float("nan")
    eps_tau_val: float = float("nan")
    eps_ddz_est: float = float("nan")
    eps_ddz_val: float = float("nan")
    n_ops: dict = field(default_factory=dict)
    rank_deficient: bool = False

    @property
    def selected_labels(self):
        return tuple(self.labels[i] for i in self.selected) if self.labels else ()


def reduced_model(problem: RegressionProblem, selected, phi_full=None, heuristic="",
                  validation: RegressionProblem = None) -> ReducedModel:
    sel, exc = _split(problem, selected)
    fit = fit_subset(problem, sel, phi_full)
    rm = ReducedModel(tuple(int(i) for i in sel), tuple(int(i) for i in exc), fit.beta, fit.phi_R_prime,
                      problem.labels, heuristic, rank_deficient=fit.rank_deficient)
    rm.eps_tau_est = idm_error(problem, sel, fit.phi_R_prime)
    if validation is not None:
        rm.eps_tau_val = idm_error(validation, sel, fit.phi_R_prime)
    return rm


def pivot_order(problem: RegressionProblem, from_scratch=False) -> np.ndarray:
    """Column order of a pivoted QR of the weighted observation matrix."""
    A = problem.Ww if from_scratch else problem.R_W
    return sla.qr(A, mode="r", pivoting=True)[1]


def exact_base_parameters(problem: RegressionProblem, phi_full=None, rel_tol=RANK_TOL) -> ReducedModel:
    """Base parameters on the first ``rank`` pivoted-QR columns, with exact dependencies."""
    r = numeric_rank(problem, rel_tol)
    _, R, p = sla.qr(problem.R_W, mode="economic", pivoting=True)
    rm = reduced_model(problem, np.sort(p[:r]), phi_full, heuristic="base")
    # exact dependencies from the triangular factor
    beta_qr = sla.solve_triangular(R[:r, :r], R[:r, r:])
    order = np.argsort(p[:r])
    exc_cols = p[r:]
    beta = np.zeros((r, len(rm.excluded)))
    pos = {c: j for j, c in enumerate(rm.excluded)}
    for j, c in enumerate(exc_cols):
        beta[:, pos[c]] = beta_qr[order, j]
    rm.beta = beta
    return rm


def save_problem(problem: RegressionProblem, path) -> None:
    """Binary problem file (numpy ``.npz`` container)."""
    with open(path, "wb") as fh:
        np.savez(fh, W=problem.W, chi=problem.chi, sigma_half=problem.sigma_half,
                 labels=np.array(problem.labels, dtype=str), n_dof=problem.n_dof,
                 indices=np.array(problem.indices, dtype=int))


def load_problem(path) -> RegressionProblem:
    with np.load(path, allow_pickle=False) as d:
        return RegressionProblem(d["W"], d["chi"], d["sigma_half"], tuple(str(s) for s in d["labels"]),
                                 int(d["n_dof"]), tuple(int(i) for i in d["indices"]))
