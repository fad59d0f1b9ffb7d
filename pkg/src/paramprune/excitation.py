"""Fourier-series excitation trajectories, condition-number optimization and sampling."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import minimize

from .dynamics import ExtendedStateSample, idm, regressor, solve_dependent, workspace_feasible
from .errors import InfeasibleExcitation, ParampruneError
from .mbmodel import MultibodyModel

# Newton iterations allowed while searching; in-workspace solves need about six
SEARCH_NEWTON_ITER = 15


@dataclass
class FourierTrajectory:
    """z_i(t) = q0_i + sum_k a_ik sin(k w t) + b_ik cos(k w t)."""

    omega: float
    q0: np.ndarray
    a: np.ndarray  # (n_dof, H)
    b: np.ndarray  # (n_dof, H)
    kappa: float = float("nan")

    @property
    def n_harmonics(self) -> int:
        return self.a.shape[1]

    @property
    def n_params(self) -> int:
        return self.q0.size + self.a.size + self.b.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.q0, self.a.ravel(), self.b.ravel()])

    @classmethod
    def from_vector(cls, x, n_dof, H, omega) -> "FourierTrajectory":
        x = np.asarray(x, dtype=float)
        q0 = x[:n_dof].copy()
        a = x[n_dof:n_dof + n_dof * H].reshape(n_dof, H).copy()
        b = x[n_dof + n_dof * H:].reshape(n_dof, H).copy()
        return cls(float(omega), q0, a, b)

    def to_dict(self) -> dict:
        return {"omega": self.omega, "q0": self.q0.tolist(), "a": self.a.tolist(),
                "b": self.b.tolist(), "kappa": self.kappa}

    @classmethod
    def from_dict(cls, d) -> "FourierTrajectory":
        return cls(float(d["omega"]), np.array(d["q0"], dtype=float), np.array(d["a"], dtype=float),
                   np.array(d["b"], dtype=float), float(d.get("kappa", float("nan"))))


def eval_trajectory(traj: FourierTrajectory, t):
    """Positions, velocities and accelerations at times ``t``; shapes (len(t), n_dof)."""
    t = np.atleast_1d(np.asarray(t, dtype=float))
    k = np.arange(1, traj.n_harmonics + 1)
    wk = traj.omega * k
    arg = t[:, None] * wk[None, :]
    s, c = np.sin(arg), np.cos(arg)
    z = traj.q0 + s @ traj.a.T + c @ traj.b.T
    dz = (c * wk) @ traj.a.T - (s * wk) @ traj.b.T
    ddz = -(s * wk**2) @ traj.a.T - (c * wk**2) @ traj.b.T
    return z, dz, ddz


@dataclass
class ExcitationConfig:
    period: float
    n_harmonics: int
    samples_per_traj: int
    n_trajectories: int
    z_min: tuple
    z_max: tuple
    dz_min: tuple
    dz_max: tuple
    q0: tuple
    workspace_check: bool = False
    # optimizer settings
    n_starts: int = 8
    n_refine: int = 1
    maxfev: int = 400
    objective_samples: int = 100
    start_attempts: int = 200
    coupling: float = 0.0  # fraction of each start shared by all coordinates
    n_validation: int = 1

    def __post_init__(self):
        for name in ("z_min", "z_max", "dz_min", "dz_max", "q0"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))
            if not all(math.isfinite(v) for v in getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        if self.samples_per_traj < 2 * self.n_harmonics + 1:
            raise ValueError("samples_per_traj must be at least 2H + 1")
        if any(lo >= hi for lo, hi in zip(self.z_min, self.z_max)) or \
                any(lo >= hi for lo, hi in zip(self.dz_min, self.dz_max)):
            raise ValueError("inconsistent bounds")
        if self.n_starts < 1 or self.period <= 0:
            raise ValueError("invalid optimizer settings")

    @property
    def omega(self) -> float:
        return 2.0 * math.pi / self.period

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExcitationConfig":
        return cls(**d)

    @classmethod
    def for_model(cls, model: MultibodyModel, **overrides) -> "ExcitationConfig":
        n = model.n_dof
        if model.is_closed_loop:
            base = dict(period=2 * math.pi, n_harmonics=2, samples_per_traj=400, n_trajectories=25,
                        z_min=(1.0,) * n, z_max=(2.0,) * n, dz_min=(-1.0,) * n, dz_max=(1.0,) * n,
                        q0=(1.5,) * n, workspace_check=True, maxfev=600, objective_samples=40,
                        coupling=0.9)
        else:
            half = math.pi / 2
            base = dict(period=2 * math.pi, n_harmonics=4, samples_per_traj=100, n_trajectories=10,
                        z_min=(-half,) * n, z_max=(half,) * n, dz_min=(-1.45,) * n, dz_max=(1.45,) * n,
                        q0=(0.0,) * n)
        base.update(overrides)
        return cls(**base)


def sample_times(config: ExcitationConfig, n=None) -> np.ndarray:
    n = config.samples_per_traj if n is None else n
    return np.arange(n) * (config.period / n)


def singular_values(W) -> np.ndarray:
    return np.linalg.svd(np.asarray(W, dtype=float), compute_uv=False)


def rank_from_singular_values(s, rel_tol=1e-8) -> int:
    if len(s) == 0 or s[0] == 0.0:
        return 0
    return int(np.sum(s > rel_tol * s[0]))


def condition_number(W, rel_tol=1e-8) -> float:
    """sigma_1 / sigma_r with r the numeric rank."""
    s = singular_values(W)
    r = rank_from_singular_values(s, rel_tol)
    if r == 0:
        raise ValueError("condition number of a zero matrix is undefined")
    return float(s[0] / s[r - 1])


def weighted_observation(model, z, dz, ddz, state=None) -> np.ndarray:
    K = regressor(model, z, dz, ddz, state=state)
    K = K / np.asarray(model.nominal_force)[:, None]
    return K.reshape(-1, K.shape[-1])


def bound_violation(config: ExcitationConfig, z, dz) -> float:
    zlo, zhi = np.array(config.z_min), np.array(config.z_max)
    vlo, vhi = np.array(config.dz_min), np.array(config.dz_max)
    v = (np.maximum(z - zhi, 0) + np.maximum(zlo - z, 0)) / (zhi - zlo)
    w = (np.maximum(dz - vhi, 0) + np.maximum(vlo - dz, 0)) / (vhi - vlo)
    return float(np.sum(v**2) + np.sum(w**2))


class _Objective:
    """log kappa of the weighted observation matrix plus a bound penalty."""

    PENALTY = 1e4
    INFEASIBLE = 1e3

    def __init__(self, model, config, n_samples):
        self.model = model
        self.config = config
        self.t = sample_times(config, n_samples)
        self.n_dof = model.n_dof
        self.warm = None  # dependent coordinates of the last feasible evaluation

    def traj(self, x):
        return FourierTrajectory.from_vector(x, self.n_dof, self.config.n_harmonics, self.config.omega)

    def __call__(self, x):
        z, dz, ddz = eval_trajectory(self.traj(x), self.t)
        pen = bound_violation(self.config, z, dz)
        if pen > 0:
            return self.INFEASIBLE + self.PENALTY * pen
        state = None
        if self.config.workspace_check:
            try:
                state = solve_dependent(self.model, z, dz, warm=self.warm, cond_limit=1e8, continuation=False,
                                        max_iter=SEARCH_NEWTON_ITER)
                self.warm = state.q[..., :18]
            except ParampruneError as exc:
                return self.INFEASIBLE + len(getattr(exc, "indices", None) or [1])
        try:
            return math.log(condition_number(weighted_observation(self.model, z, dz, ddz, state)))
        except (ValueError, np.linalg.LinAlgError):
            return self.INFEASIBLE


def _feasible(model, config, traj, t) -> bool:
    z, dz, _ = eval_trajectory(traj, t)
    if bound_violation(config, z, dz) > 0:
        return False
    if config.workspace_check:
        return bool(np.all(workspace_feasible(model, z, continuation=False, max_iter=SEARCH_NEWTON_ITER)))
    return True


def random_feasible_start(model, config, rng, t=None, t_check=None):
    """Random coefficients shrunk by bisection on a common scale until feasible.

    Bisection runs on the grid ``t``; the result is then shrunk further until it is
    also feasible on ``t_check``.
    """
    n, H = model.n_dof, config.n_harmonics
    t = sample_times(config) if t is None else t
    q0 = np.array(config.q0)
    zspan = np.array(config.z_max) - np.array(config.z_min)
    decay = 1.0 / np.arange(1, H + 1)
    for _ in range(config.start_attempts):
        a = rng.standard_normal((n, H)) * decay
        b = rng.standard_normal((n, H)) * decay
        if config.coupling > 0:
            a = config.coupling * rng.standard_normal((1, H)) * decay + (1 - config.coupling) * a
            b = config.coupling * rng.standard_normal((1, H)) * decay + (1 - config.coupling) * b
        a *= zspan[:, None]
        b *= zspan[:, None]

        def make(s):
            return FourierTrajectory(config.omega, q0.copy(), s * a, s * b)

        if not _feasible(model, config, make(1e-6), t):
            continue
        lo, hi = 1e-6, 1.0
        if _feasible(model, config, make(hi), t):
            lo = hi
        for _ in range(30):
            if hi / lo < 1.02:
                break
            mid = math.sqrt(lo * hi)
            if _feasible(model, config, make(mid), t):
                lo = mid
            else:
                hi = mid
        if t_check is not None:
            while lo > 1e-6 and not _feasible(model, config, make(lo), t_check):
                lo *= 0.9
        return make(lo)
    raise InfeasibleExcitation(f"no feasible start after {config.start_attempts} attempts")


def optimize_trajectory(model: MultibodyModel, config: ExcitationConfig, seed: int) -> FourierTrajectory:
    """Multi-start penalty-augmented Nelder-Mead on log kappa(W).

    ``n_starts`` random feasible starts are scored; the best ``n_refine`` are refined
    with at most ``maxfev`` function evaluations each. The objective may use a
    coarser sampling (``objective_samples``); the result is re-checked on the full grid.
    """
    rng = np.random.default_rng(seed)
    t_full = sample_times(config)
    obj = _Objective(model, config, min(config.objective_samples, config.samples_per_traj))
    starts = [random_feasible_start(model, config, rng, obj.t, t_full) for _ in range(config.n_starts)]
    scored = sorted(((obj(s.to_vector()), i, s) for i, s in enumerate(starts)), key=lambda r: (r[0], r[1]))
    best_f, _, best = scored[0]
    for f0, _, s in scored[:config.n_refine]:
        x0 = s.to_vector()
        simplex = _initial_simplex(x0, config, model.n_dof)
        res = minimize(obj, x0, method="Nelder-Mead",
                       options={"maxfev": config.maxfev, "initial_simplex": simplex,
                                "xatol": 1e-6, "fatol": 1e-6})
        cand = obj.traj(res.x)
        if res.fun < best_f and _feasible(model, config, cand, t_full):
            best_f, best = res.fun, cand
    if not _feasible(model, config, best, t_full):
        raise InfeasibleExcitation("optimized trajectory violates bounds on the full sample grid")
    z, dz, ddz = eval_trajectory(best, t_full)
    best.kappa = condition_number(weighted_observation(model, z, dz, ddz))
    return best


def _initial_simplex(x0, config, n_dof):
    """Axis-aligned simplex with steps of 5% of the position range."""
    span = np.array(config.z_max) - np.array(config.z_min)
    H = config.n_harmonics
    step = np.concatenate([span, np.repeat(span, H), np.repeat(span, H)]) * 0.05
    step = step / np.concatenate([np.ones(n_dof), np.tile(np.arange(1, H + 1), n_dof),
                                  np.tile(np.arange(1, H + 1), n_dof)])
    sim = np.tile(x0, (len(x0) + 1, 1))
    sim[1:] += np.diag(step)
    return sim


# --- datasets -----------------------------------------------------------------------------

@dataclass
class Dataset:
    """Samples as columns; behaves as a sequence of ExtendedStateSample."""

    t: np.ndarray
    z: np.ndarray
    dz: np.ndarray
    ddz: np.ndarray
    tau: np.ndarray
    traj_id: np.ndarray = None
    state: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.traj_id is None:
            self.traj_id = np.zeros(len(self.t), dtype=int)

    def __len__(self):
        return len(self.t)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        return ExtendedStateSample(self.z[i], self.dz[i], self.ddz[i], self.tau[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @property
    def n_dof(self) -> int:
        return self.z.shape[1]

    def write_csv(self, path) -> None:
        n = self.n_dof
        header = ["t"] + [f"{p}{i + 1}" for p in ("z", "dz", "ddz", "tau") for i in range(n)]
        data = np.column_stack([self.t, self.z, self.dz, self.ddz, self.tau])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for row in data:
                w.writerow([repr(float(v)) for v in row])

    @classmethod
    def read_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header = [h.strip() for h in rows[0]]
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float).reshape(-1, len(header))
        n = (len(header) - 1) // 4
        if header[0] != "t" or 4 * n + 1 != len(header):
            raise ValueError("dataset header must be t, z1..zn, dz1..dzn, ddz1..ddzn, tau1..taun")
        return cls(data[:, 0], data[:, 1:1 + n], data[:, 1 + n:1 + 2 * n],
                   data[:, 1 + 2 * n:1 + 3 * n], data[:, 1 + 3 * n:])

    @classmethod
    def concatenate(cls, parts) -> "Dataset":
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, k) for p in parts]) for k in ("t", "z", "dz", "ddz", "tau")),
                   traj_id=np.concatenate([p.traj_id for p in parts]))


def sample_dataset(model: MultibodyModel, trajectories, config: ExcitationConfig) -> Dataset:
    """Evenly spaced samples over one period of each trajectory, forces from the full model."""
    t = sample_times(config)
    parts = []
    for k, traj in enumerate(trajectories):
        z, dz, ddz = eval_trajectory(traj, t)
        state = solve_dependent(model, z, dz) if model.is_closed_loop else None
        tau = idm(model, z, dz, ddz, state=state)
        parts.append(Dataset(t.copy(), z, dz, ddz, tau, np.full(len(t), k)))
    return Dataset.concatenate(parts)


def save_trajectories(trajs, path) -> None:
    Path(path).write_text(json.dumps([tr.to_dict() for tr in trajs], indent=2))


def load_trajectories(path):
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict):
        data = [data]
    return [FourierTrajectory.from_dict(d) for d in data]
