"""Numerical counterparts of the moment estimates and stability theorems.

Estimates whose constants are not explicit (C_T, C_p) are checked as
finiteness plus stability trends: the left side must not drift by more than
10% when the path count doubles, and the ratio of the two sides must stay
bounded across grid refinements.  The generator-moment bound is the one
estimate with an explicit constant chain, so it is asserted as an absolute
inequality.  The algebraic inequality behind the two-solution estimate is
fuzzed directly with uniform samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .drivers import (DriverSpec, SampleBox, STANDARD_BOX, _lattice_eval,
                      estimate_rho_N, validate_growth, z_norm)
from .paths import ForwardPathBatch, moment_exponent, moment_functional
from .solver import (BsdeSolution, PicardParams, RegressionBasis,
                     TerminalCondition, evaluate_generator_term,
                     solution_norms, solve_lipschitz)


class RejectedInput(ValueError):
    """A stability perturbation failed the uniform-domination requirement."""

    def __init__(self, message: str, report: dict):
        super().__init__(message)
        self.report = report


@dataclass
class EstimateReport:
    """One two-sided moment estimate with its pass rule and fingerprint."""

    tag: str
    lhs: float
    lhs_se: float
    rhs: float
    rhs_se: float
    rule: str
    passed: bool
    fingerprint: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.lhs / self.rhs if self.rhs != 0 else math.inf


def relative_drift(a: float, b: float) -> float:
    """|a - b| / |b|, the path-doubling stability measure."""
    if b == 0:
        return 0.0 if a == 0 else math.inf
    return abs(a - b) / abs(b)


# -- the algebraic inequality ------------------------------------------------

def check_algebraic_inequality(beta: float, n_samples: int = 1_000_000,
                          value_range: float = 10.0, seed: int = 0,
                          shapes: Sequence[tuple] = ((1, 1), (2, 3), (3, 2)),
                          y_min: float = 1e-6, rel_slack: float = 1e-12) -> dict:
    """Fuzz A|y||z| - |z|^2/2 + (2-beta)/2 |y|^-2 |y.z|^2
            <= A^2|y|^2/(beta-1) - (beta-1)/4 |z|^2
    over uniform draws, in the scalar and small-matrix cases.

    y is kept away from 0 (|y| >= y_min); violations beyond the relative
    slack are counted and the worst excess recorded.
    """
    if not 1.0 < beta <= 2.0:
        raise ValueError(f"beta must lie in (1, 2], got {beta}")
    rng = np.random.Generator(np.random.Philox(seed))
    per_shape = max(1, n_samples // len(shapes))
    violations = 0
    worst = -math.inf
    total = 0
    for d, r in shapes:
        A = rng.uniform(0.0, value_range, size=per_shape)
        A = np.maximum(A, 1e-12)
        y = rng.uniform(-value_range, value_range, size=(per_shape, d))
        ny = np.linalg.norm(y, axis=1)
        small = ny < y_min
        if np.any(small):
            bump = np.zeros((per_shape, d))
            bump[:, 0] = y_min
            y = np.where(small[:, None], y + bump, y)
            ny = np.linalg.norm(y, axis=1)
        z = rng.uniform(-value_range, value_range, size=(per_shape, d, r))
        nz = np.linalg.norm(z, axis=(1, 2))
        yz = np.einsum("sd,sdr->sr", y, z)
        nyz2 = np.sum(yz * yz, axis=1)
        lhs = A * ny * nz - 0.5 * nz ** 2 + 0.5 * (2.0 - beta) * nyz2 / ny ** 2
        rhs = A ** 2 * ny ** 2 / (beta - 1.0) - 0.25 * (beta - 1.0) * nz ** 2
        scale = np.maximum(1.0, np.maximum(np.abs(lhs), np.abs(rhs)))
        excess = lhs - rhs
        violations += int(np.count_nonzero(excess > rel_slack * scale))
        worst = max(worst, float(np.max(excess / scale)))
        total += per_shape
    return {
        "check": "two_solution_algebraic",
        "beta": beta,
        "violations": violations,
        "worst_relative_excess": worst,
        "n_samples": total,
        "seed": seed,
        "pass": violations == 0,
    }


# -- moment estimates along a solution -----------------------------------------

def _eta_time_integral(driver, paths: ForwardPathBatch, power_of_t) -> tuple:
    """E int eta_s^{power(s)} ds by the left grid rule; returns (mean, se)."""
    dts = paths.grid.step_sizes
    if callable(driver.eta):
        acc = np.zeros(paths.n_paths)
        for k in range(paths.grid.n_steps):
            ctx = paths.context(k)
            acc += dts[k] * np.asarray(driver.eta(ctx), dtype=float) ** power_of_t(ctx.t)
        return float(acc.mean()), float(acc.std() / math.sqrt(paths.n_paths))
    eta = float(driver.eta)
    val = sum(dts[k] * eta ** power_of_t(float(paths.grid.nodes[k]))
              for k in range(paths.grid.n_steps))
    return float(val), 0.0


def check_sup_moment(sol: BsdeSolution, xi: TerminalCondition, driver,
                     C: Optional[float] = None) -> EstimateReport:
    """Supremum moment of Y against the terminal and eta moments.

    The comparison constant is not explicit, so the recorded rule is
    finiteness of the left side; drift and refinement trends are judged by
    the caller across repeated runs.
    """
    C = xi.moment_const if C is None else C
    nodes = sol.grid.nodes
    vals = np.empty_like(sol.Y)
    for k in range(len(nodes)):
        vals[:, k] = moment_functional(float(nodes[k]), sol.Y[:, k], C)
    per_path = vals.max(axis=1)
    rn = math.sqrt(sol.n_paths)
    lhs, lhs_se = float(per_path.mean()), float(per_path.std() / rn)

    xi_vals = xi(sol.paths.terminal_context())
    xi_pow = moment_functional(sol.grid.horizon, xi_vals, C)
    eta_int, eta_se = _eta_time_integral(driver, sol.paths,
                                         lambda t: moment_exponent(t, C))
    rhs = float(xi_pow.mean()) + eta_int
    rhs_se = math.hypot(float(xi_pow.std() / rn), eta_se)
    return EstimateReport(
        tag="sup_moment", lhs=lhs, lhs_se=lhs_se, rhs=rhs, rhs_se=rhs_se,
        rule="finite-and-stable", passed=bool(np.isfinite(lhs)),
        fingerprint={"C": C, "n_paths": sol.n_paths, "seed": sol.meta.get("seed"),
                     "n_steps": sol.grid.n_steps, "driver": sol.meta.get("driver")},
    )


def check_z_energy_moment(sol: BsdeSolution, xi: TerminalCondition, driver,
                          p: float = 2.0) -> EstimateReport:
    """p/2-th moment of the Z energy against xi, sup Y, and eta moments."""
    dts = sol.grid.step_sizes
    z_int = np.einsum("pk,k->p", np.sum(sol.Z[:, :-1, :] ** 2, axis=2), dts)
    lhs_samples = z_int ** (p / 2.0)
    rn = math.sqrt(sol.n_paths)
    lhs, lhs_se = float(lhs_samples.mean()), float(lhs_samples.std() / rn)

    xi_vals = np.abs(xi(sol.paths.terminal_context())) ** p
    y_pow = np.max(np.abs(sol.Y), axis=1) ** (p * (2.0 + math.log(2.0)) / 2.0)
    eta_int, eta_se = _eta_time_integral(driver, sol.paths, lambda t: 2.0)
    eta_term = eta_int ** (p / 2.0) if eta_int > 0 else 0.0
    rhs = float(xi_vals.mean()) + float(y_pow.mean()) + eta_term
    rhs_se = math.hypot(float(xi_vals.std() / rn), float(y_pow.std() / rn))
    return EstimateReport(
        tag="z_energy_moment", lhs=lhs, lhs_se=lhs_se, rhs=rhs, rhs_se=rhs_se,
        rule="finite-and-stable", passed=bool(np.isfinite(lhs)),
        fingerprint={"p": p, "n_paths": sol.n_paths, "seed": sol.meta.get("seed"),
                     "n_steps": sol.grid.n_steps, "driver": sol.meta.get("driver")},
    )


def fit_polynomial_growth_const(driver, alpha: float,
                                box: SampleBox = STANDARD_BOX,
                                paths: Optional[ForwardPathBatch] = None,
                                d: int = 1) -> float:
    """Smallest c1 with |phi| <= eta + c1 |z|^alpha on the box lattice."""
    c1 = 0.0
    for t, ctx, Y, Z, vals in _lattice_eval(driver, box, d, paths):
        zr = z_norm(Z)
        eta = driver.eta_values(ctx)
        if np.ndim(eta) > 0:
            from .drivers import ctx_expand
            eta = ctx_expand(eta, np.ndim(vals))
        excess = np.abs(vals) - eta
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = excess / zr ** alpha
        ratio = np.where((zr > 0) & (excess > 0), ratio, 0.0)
        c1 = max(c1, float(np.max(ratio)))
    return c1


def check_generator_moment(sol: BsdeSolution, driver,
                           box: SampleBox = STANDARD_BOX,
                           d: Optional[int] = None) -> EstimateReport:
    """Absolute inequality for E int |phi(s, Y, Z)|^alpha_bar ds.

    The right side is the explicit chain (1 + c1^abar)(4T + E int (eta^2 +
    |Z|^2) ds) with c1 fitted on the lattice, so this one is pass/fail.
    """
    d = sol.d if d is None else d
    gen = evaluate_generator_term(sol, driver)
    lhs, lhs_se = gen["integral"], gen["integral_se"]

    abar = driver.alpha_bar
    c1 = fit_polynomial_growth_const(driver, driver.alpha, box,
                                     sol.paths if driver.path_dependent else None, d)
    eta_int, eta_se = _eta_time_integral(driver, sol.paths, lambda t: 2.0)
    norms = solution_norms(sol)
    T = sol.grid.horizon
    rhs = (1.0 + c1 ** abar) * (4.0 * T + eta_int + norms.z_energy)
    rhs_se = (1.0 + c1 ** abar) * math.hypot(eta_se, norms.z_energy_se)
    return EstimateReport(
        tag="generator_moment", lhs=lhs, lhs_se=lhs_se, rhs=rhs, rhs_se=rhs_se,
        rule="absolute", passed=bool(lhs <= rhs),
        fingerprint={"alpha_bar": abar, "c1": c1, "n_paths": sol.n_paths,
                     "seed": sol.meta.get("seed"), "driver": sol.meta.get("driver")},
    )


# -- stability under driver/terminal perturbations -----------------------------

@dataclass
class StabilityRow:
    label: str
    rho_by_N: dict
    xi_gap: float
    xi_gap_se: float
    y_gap_q: float
    y_gap_q_se: float
    z_gap_q: float
    z_gap_q_se: float


@dataclass
class StabilityReport:
    q: float
    tracked_N: tuple
    rows: list
    rho_decreasing: bool
    xi_decreasing: bool
    solution_decreasing: bool

    @property
    def passed(self) -> bool:
        return self.rho_decreasing and self.xi_decreasing and self.solution_decreasing


def _seq_decreasing(vals, ses) -> bool:
    for i in range(1, len(vals)):
        if vals[i] > vals[i - 1] + 2.0 * math.hypot(ses[i], ses[i - 1]):
            return False
    return True


def solution_gap_q(a: BsdeSolution, b: BsdeSolution, q: float) -> tuple:
    """(E sup|dY|^q, se, E int |dZ|^q ds, se) on shared paths."""
    dy = np.max(np.abs(a.Y - b.Y), axis=1) ** q
    dts = a.grid.step_sizes
    dz = np.einsum("pk,k->p", z_norm(a.Z[:, :-1, :] - b.Z[:, :-1, :]) ** q, dts)
    rn = math.sqrt(a.n_paths)
    return (float(dy.mean()), float(dy.std() / rn),
            float(dz.mean()), float(dz.std() / rn))


def run_stability_experiment(driver: DriverSpec, xi: TerminalCondition,
                             perturbations: Sequence[tuple],
                             paths: ForwardPathBatch,
                             basis: Optional[RegressionBasis] = None,
                             q: float = 1.5,
                             tracked_N: Sequence[int] = (5, 10),
                             picard: Optional[PicardParams] = None,
                             growth_box: SampleBox = STANDARD_BOX) -> StabilityReport:
    """Solve the base and each perturbed problem on shared paths and tabulate
    the three gap sequences the stability theorem controls.

    perturbations is a list of (label, DriverSpec, TerminalCondition); each
    perturbed driver must carry (and pass) the common growth certificate,
    otherwise the input is rejected.
    """
    if not 1.0 < q < 2.0:
        raise ValueError(f"q must lie in (1, 2), got {q}")
    for label, dn, _ in perturbations:
        rep = validate_growth(dn, growth_box,
                              paths if dn.path_dependent or callable(dn.eta) else None,
                              d=paths.m)
        if not rep["pass"]:
            raise RejectedInput(f"perturbation {label!r} breaks the uniform "
                                f"growth bound (margin {rep['worst_margin']:.3e})",
                                report=rep)

    base = solve_lipschitz(driver, xi, paths, basis, picard)
    p_exp = moment_exponent(paths.grid.horizon, xi.moment_const)
    xi_base = xi(paths.terminal_context())
    rn = math.sqrt(paths.n_paths)

    rows = []
    for label, dn, xin in perturbations:
        soln = solve_lipschitz(dn, xin, paths, basis, picard)
        rho = {N: estimate_rho_N(dn, driver, N, paths=paths, d=paths.m,
                                 refine_check=False)
               for N in tracked_N}
        dxi = np.abs(xin(paths.terminal_context()) - xi_base) ** p_exp
        yg, ygse, zg, zgse = solution_gap_q(soln, base, q)
        rows.append(StabilityRow(
            label=label, rho_by_N={N: (e.value, e.se) for N, e in rho.items()},
            xi_gap=float(dxi.mean()), xi_gap_se=float(dxi.std() / rn),
            y_gap_q=yg, y_gap_q_se=ygse, z_gap_q=zg, z_gap_q_se=zgse,
        ))

    rho_dec = all(
        _seq_decreasing([r.rho_by_N[N][0] for r in rows],
                        [r.rho_by_N[N][1] for r in rows])
        for N in tracked_N
    )
    xi_dec = _seq_decreasing([r.xi_gap for r in rows], [r.xi_gap_se for r in rows])
    sol_dec = (_seq_decreasing([r.y_gap_q for r in rows], [r.y_gap_q_se for r in rows])
               and _seq_decreasing([r.z_gap_q for r in rows], [r.z_gap_q_se for r in rows]))
    return StabilityReport(q=q, tracked_N=tuple(tracked_N), rows=rows,
                           rho_decreasing=rho_dec, xi_decreasing=xi_dec,
                           solution_decreasing=sol_dec)
