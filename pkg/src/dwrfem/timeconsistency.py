"""Backward Euler as an inconsistent dG(0) method, with a goal-oriented estimate.

For ``u' = f(t, u)`` on ``(0, T)`` the scheme ``u^n - dt f(t_n, u^n) = u^{n-1}``
is the dG(0) method with the box rule in place of exact time integration.
With the discrete form ``A_h`` and the dG(0) form ``A`` the error in
``J(u) = u(T)`` is approximated by

    J(u) - J(u_h) ~ 1/2 rho(u_h)(z - z_h) + 1/2 rho*(u_h, z_h)(u - u_h) + S_h(u_h)(z_h)

where ``S_h = A_h - A`` and ``z_h`` is the discrete adjoint of ``A_h``.  The
last term is ``rho(u_h)(z_h) = -A(u_h)(z_h)`` rewritten with
``A_h(u_h)(z_h) = 0``.
The unknown ``u`` and ``z`` are replaced by continuous piecewise-linear
reconstructions of Richardson-extrapolated nodal values from a run with
halved steps.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .reference import gauss_1d

NQ = 4


class StepNewtonError(RuntimeError):
    pass


@dataclass(frozen=True)
class OdeProblem:
    """Scalar initial value problem ``u' = f(t, u)``, ``u(0) = u0`` on ``N`` uniform steps."""

    f: Callable[[float, float], float]
    f_u: Callable[[float, float], float]
    u0: float
    T: float
    N: int

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be at least 1")
        if not self.T > 0:
            raise ValueError("T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def with_steps(self, N: int) -> "OdeProblem":
        return OdeProblem(self.f, self.f_u, self.u0, self.T, N)


@dataclass
class DgZeroFunction:
    """Piecewise constant in time: ``values[0]`` at ``t_0`` and ``values[n]`` on ``(t_{n-1}, t_n]``."""

    values: np.ndarray
    T: float

    @property
    def N(self) -> int:
        return len(self.values) - 1

    @property
    def times(self) -> np.ndarray:
        return np.linspace(0.0, self.T, self.N + 1)

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        n = np.ceil(t / self.T * self.N - 1e-12).astype(int)
        return self.values[np.clip(n, 0, self.N)]


def backward_euler(p: OdeProblem, tol: float = 1e-13, max_iter: int = 50) -> DgZeroFunction:
    """Backward Euler with a scalar Newton solve per step."""
    u = np.empty(p.N + 1)
    u[0] = p.u0
    dt = p.dt
    t = p.times
    for n in range(1, p.N + 1):
        x = u[n - 1]
        for _ in range(max_iter):
            r = x - dt * p.f(t[n], x) - u[n - 1]
            if abs(r) <= tol * max(1.0, abs(u[n - 1])):
                break
            x -= r / (1.0 - dt * p.f_u(t[n], x))
        else:
            raise StepNewtonError(f"Newton failed in step {n}")
        u[n] = x
    return DgZeroFunction(u, p.T)


def discrete_adjoint(p: OdeProblem, u_h: DgZeroFunction) -> np.ndarray:
    """Adjoint of the backward Euler form for ``J(u) = u(T)``.

    Returns ``z`` of length ``N + 2``: ``z[n]`` is the value on the
    interval ``n`` (``z[0]`` belongs to the initial point) and
    ``z[N + 1] = 1`` is the terminal value ``dJ/du(T)``.
    """
    dt = p.dt
    t = p.times
    z = np.empty(p.N + 2)
    z[p.N + 1] = 1.0
    for n in range(p.N, 0, -1):
        z[n] = z[n + 1] / (1.0 - dt * p.f_u(t[n], u_h.values[n]))
    z[0] = z[1]
    return z


def discrete_form(p: OdeProblem, u: np.ndarray, v: np.ndarray) -> float:
    """``A_h(u)(v)`` for nodal vectors ``u`` and ``v`` (both of length ``N + 1``)."""
    t = p.times
    fn = np.array([p.f(t[n], u[n]) for n in range(1, p.N + 1)])
    return float((u[0] - p.u0) * v[0] + np.sum((np.diff(u) - p.dt * fn) * v[1:]))


def dg_form(p: OdeProblem, u: np.ndarray, v: np.ndarray) -> float:
    """``A(u)(v)`` for piecewise-constant ``u`` and ``v`` with exact (Gauss) time integrals."""
    xq, wq = gauss_1d(NQ)
    t = p.times
    total = (u[0] - p.u0) * v[0]
    for n in range(1, p.N + 1):
        tq = t[n - 1] + xq * p.dt
        integral = p.dt * sum(w * p.f(s, u[n]) for s, w in zip(tq, wq))
        total += (u[n] - u[n - 1]) * v[n] - integral * v[n]
    return float(total)


def consistency_term(p: OdeProblem, u_h: DgZeroFunction, z: np.ndarray) -> np.ndarray:
    """Per-interval values of ``S_h(u_h)(z_h) = A_h - A``."""
    xq, wq = gauss_1d(NQ)
    t = p.times
    out = np.empty(p.N)
    for n in range(1, p.N + 1):
        un = u_h.values[n]
        tq = t[n - 1] + xq * p.dt
        integral = p.dt * sum(w * p.f(s, un) for s, w in zip(tq, wq))
        out[n - 1] = z[n] * (integral - p.dt * p.f(t[n], un))
    return out


def _richardson_u(p: OdeProblem, u_h: DgZeroFunction) -> np.ndarray:
    fine = backward_euler(p.with_steps(2 * p.N)).values[::2]
    return 2.0 * fine - u_h.values


def _richardson_z(p: OdeProblem, z: np.ndarray) -> np.ndarray:
    """Nodal adjoint values at ``t_0..t_N`` (``z[n]`` approximates ``z(t_{n-1})``)."""
    coarse = z[1:]
    pf = p.with_steps(2 * p.N)
    zf = discrete_adjoint(pf, backward_euler(pf))[1:][::2]
    return 2.0 * zf - coarse


@dataclass
class OdeEstimate:
    estimate: float
    weighted_residual: float
    consistency: float
    primal: float
    adjoint: float
    consistency_local: np.ndarray

    @property
    def parts(self) -> dict[str, float]:
        return {"weighted_residual": self.weighted_residual, "consistency": self.consistency}


def estimate_ode_error(p: OdeProblem, u_h: DgZeroFunction | None = None) -> OdeEstimate:
    """Goal-oriented estimate of ``u(T) - u_h(T)``.

    ``consistency`` is ``S_h(u_h)(z_h)`` and
    ``estimate = weighted_residual + consistency``.
    """
    if u_h is None:
        u_h = backward_euler(p)
    z = discrete_adjoint(p, u_h)
    Z = _richardson_z(p, z)          # nodal values of the reconstructed adjoint
    U = _richardson_u(p, u_h)        # nodal values of the reconstructed primal
    xq, wq = gauss_1d(NQ)
    t = p.times
    dt = p.dt
    u = u_h.values

    rho = 0.0      # rho(u_h)(Z - z_h) = -A(u_h)(Z - z_h)
    rho_s = 0.0    # rho*(u_h, z_h)(U - u_h)
    for n in range(1, p.N + 1):
        tq = t[n - 1] + xq * dt
        zq = Z[n - 1] + xq * (Z[n] - Z[n - 1]) - z[n]
        fq = np.array([p.f(s, u[n]) for s in tq])
        rho -= (u[n] - u[n - 1]) * (Z[n - 1] - z[n]) - dt * float(wq @ (fq * zq))
        vq = U[n - 1] + xq * (U[n] - U[n - 1]) - u[n]
        fu = np.array([p.f_u(s, u[n]) for s in tq])
        v_right, v_left = U[n] - u[n], U[n - 1] - u[n - 1]
        rho_s -= z[n] * (v_right - v_left - dt * float(wq @ (fu * vq)))
    rho_s += U[p.N] - u[p.N]
    rho_s -= z[0] * (U[0] - u[0])

    S = consistency_term(p, u_h, z)
    weighted = 0.5 * (rho + rho_s)
    cons = float(S.sum())
    return OdeEstimate(weighted + cons, weighted, cons, 0.5 * rho, 0.5 * rho_s, S)


def write_study_csv(path, rows) -> None:
    """Rows of ``(N, true_error, estimate, weighted_residual, consistency, I_eff)``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["N", "true_error", "estimate", "weighted_residual", "consistency", "I_eff"])
        for r in rows:
            w.writerow([r[0]] + [f"{v:.16e}" for v in r[1:]])


def run_study(p: OdeProblem, steps, exact: float) -> list[tuple]:
    """Estimator study over several step counts for a known exact ``u(T)``."""
    rows = []
    for N in steps:
        q = p.with_steps(int(N))
        uh = backward_euler(q)
        est = estimate_ode_error(q, uh)
        err = exact - uh.values[-1]
        rows.append((int(N), err, est.estimate, est.weighted_residual, est.consistency,
                     est.estimate / err if err != 0 else float("nan")))
    return rows
