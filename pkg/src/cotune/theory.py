"""Numeric convergence bound for the regularized Adam variant (beta1 = 0).

For K steps with base rate alpha, second-moment decay beta2, regularizer
weight lam and gradient bound R (with ||grad f + lam grad h|| <= R - sqrt(eps)):

    bound = 2 R (F0 - f*) / (alpha (1 + lam) K)
            + C * ( ln((1 - beta2^n) R^2 / ((1 - beta2) eps)) / K - ln(beta2) )
    C     = 2 alpha R / sqrt(1 - beta2) + alpha^2 L / (2 (1 - beta2))

The verifier compares the bound with ``min_k ||grad F(x_k)||^2`` along a
trajectory (and reports the mean over steps as a second reading).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .optim import AdamState, adam_step
from .tensor import ContractError


class DomainError(ValueError):
    pass


@dataclass
class BoundInputs:
    K: int
    alpha: float
    beta2: float
    lam: float
    R: float
    L: float
    F0: float
    f_star: float
    eps: float = 1e-8
    n: int | None = None  # window in (1 - beta2^n); defaults to K
    proxies: dict = field(default_factory=dict)  # name -> note, for estimated quantities

    def validate(self) -> None:
        if not 0.0 < self.beta2 <= 1.0:
            raise DomainError(f"beta2 must lie in (0, 1], got {self.beta2}")
        if self.K < 1:
            raise DomainError("K must be >= 1")
        if self.R < math.sqrt(self.eps):
            raise DomainError("R must be at least sqrt(eps)")
        if self.alpha <= 0:
            raise DomainError("alpha must be positive")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BoundInputs":
        return cls(**json.loads(text))


def bound_terms(b: BoundInputs) -> tuple[float, float, float]:
    """(first term, C, log factor) of the bound."""
    b.validate()
    if b.beta2 == 1.0:
        raise DomainError("beta2 = 1 makes the constant C diverge")
    n = b.K if b.n is None else b.n
    first = 2.0 * b.R * (b.F0 - b.f_star) / (b.alpha * (1.0 + b.lam) * b.K)
    C = 2.0 * b.alpha * b.R / math.sqrt(1.0 - b.beta2) + b.alpha**2 * b.L / (2.0 * (1.0 - b.beta2))
    arg = (1.0 - b.beta2**n) * b.R**2 / ((1.0 - b.beta2) * b.eps)
    if arg <= 0:
        raise DomainError(f"non-positive log argument {arg}")
    return first, C, math.log(arg) / b.K - math.log(b.beta2)


def convergence_bound(b: BoundInputs) -> float:
    first, C, log_factor = bound_terms(b)
    return first + C * log_factor


@dataclass
class Trajectory:
    """Per-step log of an optimizer run, as consumed by the estimator and verifier."""

    backend: str
    alpha: float
    beta2: float
    lam: float
    eps: float
    combined_norms: list[float]  # ||grad f_k + lam grad h_k|| per step
    objective: list[float]  # F(x_k), k = 0..K
    grad_sq: list[float]  # ||grad F(x_k)||^2, k = 0..K
    snapshots: dict = field(default_factory=dict)  # step -> parameter vector (list)

    @property
    def K(self) -> int:
        return len(self.combined_norms)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Trajectory":
        d = json.loads(text)
        d["snapshots"] = {int(k): v for k, v in d["snapshots"].items()}
        return cls(**d)


def estimate_constants(
    traj: Trajectory,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    f_star: float | None = None,
    slack: float = 0.1,
) -> BoundInputs:
    """Estimate bound inputs from a trajectory.

    L is the largest observed gradient Lipschitz ratio over snapshot pairs, a
    lower estimate of the true constant. Without a supplied ``f_star`` the
    best observed objective minus ``slack`` stands in for it.
    """
    steps = sorted(traj.snapshots)
    if len(steps) < 2:
        raise ContractError("need at least two parameter snapshots")
    xs = {s: np.asarray(traj.snapshots[s], dtype=np.float64) for s in steps}
    gs = {s: np.asarray(grad_fn(xs[s]), dtype=np.float64) for s in steps}
    L = 0.0
    for a, b in combinations(steps, 2):
        dx = np.linalg.norm(xs[a] - xs[b])
        if dx > 0:
            L = max(L, float(np.linalg.norm(gs[a] - gs[b]) / dx))
    proxies = {"L": "empirical lower estimate over snapshot pairs"}
    if f_star is None:
        f_star = min(traj.objective) - slack
        proxies["f_star"] = f"best observed objective minus slack {slack}"
    return BoundInputs(
        K=traj.K, alpha=traj.alpha, beta2=traj.beta2, lam=traj.lam,
        R=max(traj.combined_norms) + math.sqrt(traj.eps), L=L,
        F0=traj.objective[0], f_star=f_star, eps=traj.eps, proxies=proxies,
    )


def verify_trajectory(traj: Trajectory, b: BoundInputs, strict: bool = False) -> dict:
    if traj.backend != "adam":
        raise ContractError(f"bound applies to the adam backend, trajectory used {traj.backend!r}")
    for name in ("alpha", "beta2", "lam"):
        if getattr(traj, name) != getattr(b, name):
            raise ContractError(f"{name} mismatch: trajectory {getattr(traj, name)} vs inputs {getattr(b, name)}")
    observed_R = max(traj.combined_norms) + math.sqrt(traj.eps)
    if b.R < observed_R * (1 - 1e-12):
        raise ContractError(f"R = {b.R} is below the observed gradient bound {observed_R}")
    if strict and "f_star" in b.proxies:
        raise ContractError("strict mode needs a user-supplied f*")
    bound = convergence_bound(b)
    grad_sq = traj.grad_sq[: traj.K]
    min_sq = float(min(grad_sq))
    return {
        "min_grad_sq": min_sq,
        "mean_grad_sq": float(np.mean(grad_sq)),
        "bound": bound,
        "satisfied": bool(min_sq <= bound),
        "margin": bound - min_sq,
        "K": traj.K,
        "proxies": dict(b.proxies),
    }


# ---------------------------------------------------------------- synthetic objective

@dataclass
class LogisticProblem:
    """Mean logistic loss over a fixed design plus a log-cosh regularizer.

    f_k(x) is the logistic loss on minibatch k; h(x) = mean_j log cosh(x_j).
    The minimized objective is F = mean_i f_i + lam * h.
    """

    A: np.ndarray  # [N, d]
    y: np.ndarray  # [N] in {-1, +1}
    lam: float = 1.0
    f_star: float = 0.0  # both losses are non-negative

    @classmethod
    def generate(cls, seed: int, n: int = 64, d: int = 5, lam: float = 1.0) -> "LogisticProblem":
        g = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 77])))
        A = g.normal(size=(n, d))
        w = g.normal(size=d)
        y = np.where(A @ w + 0.5 * g.normal(size=n) >= 0, 1.0, -1.0)
        return cls(A=A, y=y, lam=lam)

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    def _f_grad(self, x: np.ndarray, idx: np.ndarray | None = None) -> tuple[float, np.ndarray]:
        A = self.A if idx is None else self.A[idx]
        y = self.y if idx is None else self.y[idx]
        z = y * (A @ x)
        loss = float(np.mean(np.logaddexp(0.0, -z)))
        s = -y / (1.0 + np.exp(z))  # d/dm of log(1 + exp(-y m))
        return loss, A.T @ s / len(y)

    def _h_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        d = self.dim
        # log cosh(x) = logaddexp(x, -x) - log 2
        return float(np.mean(np.logaddexp(x, -x) - math.log(2.0))), np.tanh(x) / d

    def value(self, x: np.ndarray) -> float:
        return self._f_grad(x)[0] + self.lam * self._h_grad(x)[0]

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self._f_grad(x)[1] + self.lam * self._h_grad(x)[1]

    def stochastic_grad(self, x: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return self._f_grad(x, idx)[1] + self.lam * self._h_grad(x)[1]

    def R_bound(self, eps: float = 1e-8) -> float:
        """Every minibatch gradient has norm <= max_i ||a_i|| + lam / sqrt(d)."""
        return float(np.max(np.linalg.norm(self.A, axis=1))) + self.lam / math.sqrt(self.dim) + math.sqrt(eps)

    def L_bound(self) -> float:
        """Smoothness: logistic Hessian <= A^T A / (4N); log-cosh Hessian <= I / d."""
        top = float(np.linalg.eigvalsh(self.A.T @ self.A / len(self.y)).max())
        return top / 4.0 + self.lam / self.dim


def run_synthetic_adam(
    problem: LogisticProblem, K: int, alpha: float, beta2: float, seed: int,
    batch: int = 8, eps: float = 1e-8, snapshot_every: int = 10,
) -> Trajectory:
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 78])))
    x = np.zeros(problem.dim)
    state = AdamState(alpha=alpha, beta2=beta2, eps=eps)
    norms, obj, gsq, snaps = [], [problem.value(x)], [float(np.sum(problem.grad(x) ** 2))], {0: x.tolist()}
    for k in range(K):
        idx = g.integers(len(problem.y), size=batch)
        gk = problem.stochastic_grad(x, idx)
        norms.append(float(np.linalg.norm(gk)))
        x = adam_step(state, {"x": x}, {"x": gk})["x"]
        obj.append(problem.value(x))
        gsq.append(float(np.sum(problem.grad(x) ** 2)))
        if (k + 1) % snapshot_every == 0:
            snaps[k + 1] = x.tolist()
    return Trajectory(
        backend="adam", alpha=alpha, beta2=beta2, lam=problem.lam, eps=eps,
        combined_norms=norms, objective=obj, grad_sq=gsq, snapshots=snaps,
    )


def analytic_inputs(problem: LogisticProblem, traj: Trajectory) -> BoundInputs:
    return BoundInputs(
        K=traj.K, alpha=traj.alpha, beta2=traj.beta2, lam=traj.lam,
        R=problem.R_bound(traj.eps), L=problem.L_bound(), F0=traj.objective[0],
        f_star=problem.f_star, eps=traj.eps,
    )


def save_trajectory(traj: Trajectory, path: str | Path) -> None:
    Path(path).write_text(traj.to_json())


def load_trajectory(path: str | Path) -> Trajectory:
    return Trajectory.from_json(Path(path).read_text())


def first_term(b: BoundInputs) -> float:
    return bound_terms(b)[0]


def first_terms_over_lambda(b: BoundInputs, lams: Sequence[float]) -> list[float]:
    out = []
    for lam in lams:
        out.append(first_term(BoundInputs(**{**asdict(b), "lam": lam})))
    return out
