"""Closed-form bilevel problems for checking penalty equivalence and the O(1/K) rate.

The workhorse is the affine-projection family

    lower  g(theta) = 1/2 ||A theta - b||^2      (PL, not strongly convex)
    upper  f(theta) = 1/2 ||theta - c||^2

whose bilevel solution is the projection of ``c`` onto ``{A theta = b}``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .engine import PenaltySchedule, TrainConfig, bljust_step, new_state
from .model import ParameterPartition

__all__ = [
    "BilevelProblem",
    "ConvergenceReport",
    "SolverConfig",
    "AnalyticObjective",
    "make_affine_projection_problem",
    "penalized_minimizer",
    "solve_penalized",
    "estimate_pl_constant",
    "estimate_lipschitz",
    "estimate_gradient_lipschitz",
    "penalty_threshold",
    "check_penalty_threshold",
    "loglog_slope",
]

UpperFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray, np.ndarray]]
LowerFn = Callable[[np.ndarray], tuple[float, np.ndarray]]


class DivergenceError(RuntimeError):
    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(message)


@dataclass
class BilevelProblem:
    """``upper(phi, theta) -> (f, df/dphi, df/dtheta)``, ``lower(theta) -> (g, dg/dtheta)``."""

    upper: UpperFn
    lower: LowerFn
    dim_phi: int
    dim_theta: int
    known_solution: tuple[np.ndarray, np.ndarray] | None = None
    solution_note: str = ""
    pl_constant_mu: float | None = None
    lower_min: float | None = None
    hessian_bound_upper: float | None = None
    hessian_bound_lower: float | None = None
    name: str = "problem"

    def lipschitz_gamma(self, gamma: float) -> float:
        """Upper bound on the gradient Lipschitz constant of ``f + gamma g``."""
        if self.hessian_bound_upper is None or self.hessian_bound_lower is None:
            raise ValueError("problem carries no Hessian bounds")
        return self.hessian_bound_upper + gamma * self.hessian_bound_lower

    def penalized(self, phi: np.ndarray, theta: np.ndarray, gamma: float):
        f, gf_phi, gf_theta = self.upper(phi, theta)
        g, gg_theta = self.lower(theta)
        return f + gamma * g, gf_phi, gf_theta + gamma * gg_theta


def make_affine_projection_problem(A, b, c) -> BilevelProblem:
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    m, d = A.shape
    if m >= d:
        raise ValueError(f"A must be wide (m < d), got {A.shape}")
    if b.shape != (m,) or c.shape != (d,):
        raise ValueError("b must have length m and c length d")
    sv = np.linalg.svd(A, compute_uv=False)
    if sv.min() <= 1e-12 * max(1.0, sv.max()):
        raise ValueError("A must have full row rank")
    gram = A @ A.T
    theta_star = c + A.T @ np.linalg.solve(gram, b - A @ c)
    eig = np.linalg.eigvalsh(A.T @ A)
    lam_min_pos = float(eig[eig > 1e-12 * eig.max()].min())

    def upper(phi, theta):
        r = theta - c
        return 0.5 * float(r @ r), np.zeros(0), r

    def lower(theta):
        r = A @ theta - b
        return 0.5 * float(r @ r), A.T @ r

    # closed-form sanity: feasible, and theta* - c lies in range(A^T)
    resid = A @ theta_star - b
    proj_null = (theta_star - c) - A.T @ np.linalg.solve(gram, A @ (theta_star - c))
    if 0.5 * float(resid @ resid) > 1e-10 or np.abs(proj_null).max() > 1e-8:
        raise ValueError("closed-form projection failed its own check (ill-conditioned A?)")

    return BilevelProblem(
        upper=upper,
        lower=lower,
        dim_phi=0,
        dim_theta=d,
        known_solution=(np.zeros(0), theta_star),
        solution_note="theta* = c + A^T (A A^T)^-1 (b - A c): projection of c onto {A theta = b}",
        pl_constant_mu=1.0 / lam_min_pos,
        lower_min=0.0,
        hessian_bound_upper=1.0,
        hessian_bound_lower=float(eig.max()),
        name="affine_projection",
    )


def penalized_minimizer(A, b, c, gamma: float) -> np.ndarray:
    """Exact minimizer of ``1/2||theta-c||^2 + gamma/2 ||A theta - b||^2``."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    c = np.atleast_1d(np.asarray(c, dtype=np.float64))
    d = A.shape[1]
    return np.linalg.solve(np.eye(d) + gamma * A.T @ A, c + gamma * A.T @ b)


class AnalyticObjective:
    """Adapts a :class:`BilevelProblem` to the engine's objective protocol."""

    def __init__(self, problem: BilevelProblem):
        self.problem = problem

    def upper(self, theta, phi):
        phi_v = phi.get("phi", np.zeros(0))
        f, g_phi, g_theta = self.problem.upper(phi_v, theta["theta"])
        return f, {"theta": g_theta}, ({"phi": g_phi} if phi else {})

    def lower(self, theta):
        g, g_theta = self.problem.lower(theta["theta"])
        return g, {"theta": g_theta}


# -- solver ----------------------------------------------------------------------


@dataclass
class SolverConfig:
    K: int = 100_000
    alpha: float | None = None  # None -> step_scale / L_gamma
    beta: float | None = None
    step_scale: float = 0.5
    steps_per_epoch: int | None = None  # None -> one epoch, gamma fixed
    seed: int = 0
    init_scale: float = 1.0
    divergence_threshold: float = 1e12


@dataclass
class ConvergenceReport:
    K: int
    prefix_K: list[int]
    avg_grad_norm_sq: list[float]
    distance_at_prefix: list[float | None]
    slope: float | None
    C_hat: float
    L_gamma_hat: float | None
    mu_hat: float | None
    gamma_final: float
    distance_to_solution: float | None
    lower_gap: float
    upper_value: float
    upper_value_star: float | None
    theta_final: list[float]
    phi_final: list[float]
    steps_taken: int
    extras: dict = field(default_factory=dict)

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text)
        return text

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["K", "avg_grad_norm_sq", "distance_to_solution"])
            for k, a, d in zip(self.prefix_K, self.avg_grad_norm_sq, self.distance_at_prefix):
                w.writerow([k, repr(a), "" if d is None else repr(d)])


def _prefix_points(K: int) -> list[int]:
    if K <= 0:
        return []
    pts = np.unique(np.round(np.logspace(0, math.log10(K), num=60)).astype(int))
    return [int(p) for p in pts if 1 <= p <= K]


def loglog_slope(ks, values, k_min: float = 1e2, k_max: float = 1e5) -> float | None:
    """Least-squares slope of log(value) against log(k) over ``[k_min, k_max]``."""
    ks = np.asarray(ks, dtype=np.float64)
    vs = np.asarray(values, dtype=np.float64)
    sel = (ks >= k_min) & (ks <= k_max) & (vs > 0)
    if sel.sum() < 2:
        return None
    return float(np.polyfit(np.log(ks[sel]), np.log(vs[sel]), 1)[0])


def solve_penalized(
    problem: BilevelProblem,
    schedule: PenaltySchedule = PenaltySchedule(initial_gamma=1e3, mode="constant"),
    cfg: SolverConfig = SolverConfig(),
    theta0: np.ndarray | None = None,
    phi0: np.ndarray | None = None,
) -> ConvergenceReport:
    """Plain gradient descent on ``f + gamma g`` through :func:`bljust_step`."""
    rng = np.random.default_rng(cfg.seed)
    if theta0 is None:
        theta0 = rng.normal(scale=cfg.init_scale, size=problem.dim_theta)
    if phi0 is None:
        phi0 = rng.normal(scale=cfg.init_scale, size=problem.dim_phi)
    gamma_max = schedule.gamma(max(0, (cfg.K - 1) // (cfg.steps_per_epoch or max(cfg.K, 1))))
    alpha = cfg.alpha
    if alpha is None:
        alpha = cfg.step_scale / problem.lipschitz_gamma(gamma_max)
    beta = cfg.beta if cfg.beta is not None else alpha
    params = ParameterPartition({"theta": np.array(theta0, dtype=np.float64)}, {"phi": np.array(phi0, dtype=np.float64)} if problem.dim_phi else {})
    state = new_state(params, TrainConfig(alpha=alpha, beta=beta, optimizer="plain_gd", plateau=False))
    objective = AnalyticObjective(problem)
    theta_star = problem.known_solution[1] if problem.known_solution is not None else None

    prefixes = _prefix_points(cfg.K)
    prefix_set = set(prefixes)
    running = 0.0
    avg, dist = [], []
    c_hat = math.inf
    gamma = schedule.gamma(0)
    for k in range(1, cfg.K + 1):
        state.epoch = (k - 1) // cfg.steps_per_epoch if cfg.steps_per_epoch else 0
        gamma = schedule.gamma(state.epoch)
        bljust_step(state, objective, gamma)
        rec = state.history.pop()
        if not (abs(rec.objective) <= cfg.divergence_threshold):
            raise DivergenceError(f"objective {rec.objective:.3e} exceeded threshold at step {k}", k)
        running += rec.grad_norm_sq_theta + rec.grad_norm_sq_phi
        c_hat = min(c_hat, rec.ctc_loss)
        if k in prefix_set:
            avg.append(running / k)
            dist.append(None if theta_star is None else float(np.linalg.norm(state.params.theta["theta"] - theta_star)))

    theta_k = state.params.theta["theta"]
    phi_k = state.params.phi.get("phi", np.zeros(0))
    f_k, _, _ = problem.upper(phi_k, theta_k)
    g_k, _ = problem.lower(theta_k)
    g_star = problem.lower_min if problem.lower_min is not None else g_k
    if math.isinf(c_hat):
        c_hat = f_k
    f_star = None
    if problem.known_solution is not None:
        f_star = problem.upper(problem.known_solution[0], problem.known_solution[1])[0]

    rng_est = np.random.default_rng([cfg.seed, 7])
    center = theta_k if theta_star is None else theta_star
    samples = center + rng_est.uniform(-1.0, 1.0, size=(200, problem.dim_theta))
    try:
        mu_hat = estimate_pl_constant(lambda t: problem.lower(t), samples, g_star)
    except ValueError:
        mu_hat = None
    l_gamma_hat = estimate_gradient_lipschitz(
        lambda t: problem.penalized(phi_k, t, gamma)[2], samples, rng_est
    )
    return ConvergenceReport(
        K=cfg.K,
        prefix_K=prefixes,
        avg_grad_norm_sq=avg,
        distance_at_prefix=dist,
        slope=loglog_slope(prefixes, avg),
        C_hat=float(c_hat),
        L_gamma_hat=l_gamma_hat,
        mu_hat=mu_hat,
        gamma_final=float(gamma),
        distance_to_solution=None if theta_star is None else float(np.linalg.norm(theta_k - theta_star)),
        lower_gap=float(g_k - g_star),
        upper_value=float(f_k),
        upper_value_star=f_star,
        theta_final=[float(v) for v in theta_k],
        phi_final=[float(v) for v in phi_k],
        steps_taken=state.k,
        extras={"alpha": alpha, "beta": beta, "problem": problem.name},
    )


# -- empirical constants ------------------------------------------------------------


def estimate_pl_constant(lower: LowerFn, samples, g_star: float) -> float:
    """Largest observed ``(g(theta) - g*) / ||grad g(theta)||^2``.

    Samples with zero gradient are skipped; raises if every sample is a minimizer.
    """
    best = None
    for theta in np.atleast_2d(np.asarray(samples, dtype=np.float64)):
        g, grad = lower(theta)
        gn = float(np.vdot(grad, grad))
        if gn <= 1e-300:
            continue
        ratio = (g - g_star) / gn
        best = ratio if best is None else max(best, ratio)
    if best is None:
        raise ValueError("every sample sits at a stationary point; PL ratio undefined")
    return float(best)


def estimate_lipschitz(grad_fn: Callable[[np.ndarray], np.ndarray], samples) -> float:
    """Largest observed gradient norm: the function's Lipschitz constant on the sample region."""
    return float(max(np.linalg.norm(grad_fn(t)) for t in np.atleast_2d(samples)))


def estimate_gradient_lipschitz(grad_fn, samples, rng: np.random.Generator) -> float | None:
    samples = np.atleast_2d(samples)
    if len(samples) < 2:
        return None
    best = 0.0
    perm = rng.permutation(len(samples))
    for i, j in zip(range(len(samples)), perm):
        dx = samples[i] - samples[j]
        nx = float(np.linalg.norm(dx))
        if nx <= 1e-12:
            continue
        best = max(best, float(np.linalg.norm(grad_fn(samples[i]) - grad_fn(samples[j]))) / nx)
    return best


def penalty_threshold(lipschitz: float, mu: float, delta: float) -> float:
    """Smallest penalty ``L * sqrt(3 mu / delta)`` guaranteeing a lower-level gap <= delta."""
    if delta <= 0:
        raise ValueError("delta must be > 0")
    if math.isinf(delta):
        return 0.0
    return float(lipschitz * math.sqrt(3.0 * mu / delta))


def check_penalty_threshold(
    problem: BilevelProblem,
    delta: float,
    region: float = 1.0,
    n_samples: int = 500,
    seed: int = 0,
) -> float:
    """Threshold from empirical constants sampled in a box around the known solution.

    With no ``phi`` block the upper loss's Lipschitz constant is taken over theta.
    """
    rng = np.random.default_rng(seed)
    center = problem.known_solution[1] if problem.known_solution is not None else np.zeros(problem.dim_theta)
    samples = center + rng.uniform(-region, region, size=(n_samples, problem.dim_theta))
    g_star = problem.lower_min if problem.lower_min is not None else min(problem.lower(t)[0] for t in samples)
    mu_hat = estimate_pl_constant(problem.lower, samples, g_star)
    if problem.dim_phi == 0:
        phi0 = np.zeros(0)
        l_hat = estimate_lipschitz(lambda t: problem.upper(phi0, t)[2], samples)
    else:
        phis = rng.uniform(-region, region, size=(n_samples, problem.dim_phi))
        l_hat = float(max(np.linalg.norm(problem.upper(p, t)[1]) for p, t in zip(phis, samples)))
    return penalty_threshold(l_hat, mu_hat, delta)
