"""Zero-sum games on finite action grids: Isaacs gaps, saddles, game value.

Player one minimises and player two maximises the same payoff.  On finite
grids the lower value max_b min_a H and the upper value min_a max_b H are
computed exactly; the Isaacs condition holds when they coincide, in which
case (first argmin of the row maxima, first argmax of the column minima) is
a saddle and ties break lexicographically by construction.

With a singleton second grid every routine reduces arithmetically to its
control counterpart: inner reductions run over ascending action indices with
the same accumulation, so the reduction is reproducible bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .control import (PolicyValue, _expand_pathwise, _policy_value_core,
                      _sigma_inverse)
from .drivers import DriverSpec, validate_growth, SampleBox
from .paths import ForwardModel, ForwardPathBatch, PathContext, TimeGrid
from .solver import (BsdeSolution, LogGrowthResult, PicardParams,
                     RegressionBasis, TerminalCondition, attach_noise,
                     solve_loggrowth)
from .paths import sample_brownian, simulate_forward


class NoSaddleError(RuntimeError):
    """No grid pair satisfies the saddle inequalities: the Isaacs condition
    fails at grid resolution at this point."""

    def __init__(self, message: str, gap: float):
        super().__init__(message)
        self.gap = gap


@dataclass
class GameProblem:
    """A (sigma, x0, A, B, f, h, g1) zero-sum instance on finite grids.

    f(t, ctx, a, b) -> (n_paths, m), h(t, ctx, a, b) -> (n_paths,),
    g1(t, ctx) -> (n_paths,).  Player one (grid actions_a) minimises,
    player two (grid actions_b) maximises.
    """

    model: ForwardModel
    actions_a: np.ndarray
    actions_b: np.ndarray
    f: Callable
    h: Callable
    g1: Callable
    growth_K: float = 1.0
    growth_C: float = 1.0
    name: str = "game"
    cond_threshold: float = 1e12
    isaacs_tol: float = 1e-9

    def __post_init__(self):
        self.actions_a = np.asarray(self.actions_a, dtype=float)
        self.actions_b = np.asarray(self.actions_b, dtype=float)
        if self.actions_a.ndim != 1 or self.actions_a.size == 0 \
                or self.actions_b.ndim != 1 or self.actions_b.size == 0:
            raise ValueError("both action grids must be non-empty 1-d arrays")

    def terminal_condition(self) -> TerminalCondition:
        return TerminalCondition(
            xi=lambda ctx: self.g1(ctx.t, ctx), moment_const=self.growth_C,
            name=f"g1[{self.name}]",
        )


def game_hamiltonian(problem: GameProblem, t: float, ctx: PathContext,
                     z: np.ndarray, a, b,
                     sig_inv: Optional[np.ndarray] = None) -> np.ndarray:
    """H = z sigma^{-1} f(a, b) + h(a, b) at one action pair."""
    z = np.asarray(z, dtype=float)
    if sig_inv is None:
        sig_inv = _sigma_inverse(problem, ctx)
    fv = np.asarray(problem.f(t, ctx, a, b), dtype=float)
    w = np.einsum("pij,pj->pi", sig_inv, fv)
    hv = np.asarray(problem.h(t, ctx, a, b), dtype=float)
    w = _expand_pathwise(w, z.ndim)
    hv = _expand_pathwise(hv, z.ndim - 1)
    return np.sum(z * w, axis=-1) + hv


def _minimax_values(problem: GameProblem, t: float, ctx: PathContext,
                    z: np.ndarray, sig_inv: Optional[np.ndarray] = None,
                    want_indices: bool = False):
    """Lower value max_b min_a H and upper value min_a max_b H, exactly.

    Accumulations run over ascending action indices; with |B| = 1 the lower
    value is bit-identical to the control-side minimum over A.
    """
    if sig_inv is None:
        sig_inv = _sigma_inverse(problem, ctx)
    col_min = []    # per b: min over a
    row_stack = []  # per a: running max over b
    for j, b in enumerate(problem.actions_b):
        best = None
        for i, a in enumerate(problem.actions_a):
            val = game_hamiltonian(problem, t, ctx, z, a, b, sig_inv=sig_inv)
            best = val if best is None else np.where(val < best, val, best)
            if j == 0:
                row_stack.append(val)
            else:
                row_stack[i] = np.where(val > row_stack[i], val, row_stack[i])
        col_min.append(best)
    lower = col_min[0]
    b_idx = np.zeros(lower.shape, dtype=np.int64) if want_indices else None
    for j in range(1, len(col_min)):
        if want_indices:
            take = col_min[j] > lower
            b_idx = np.where(take, j, b_idx)
            lower = np.where(take, col_min[j], lower)
        else:
            lower = np.where(col_min[j] > lower, col_min[j], lower)
    upper = row_stack[0]
    a_idx = np.zeros(upper.shape, dtype=np.int64) if want_indices else None
    for i in range(1, len(row_stack)):
        if want_indices:
            take = row_stack[i] < upper
            a_idx = np.where(take, i, a_idx)
            upper = np.where(take, row_stack[i], upper)
        else:
            upper = np.where(row_stack[i] < upper, row_stack[i], upper)
    if want_indices:
        return lower, upper, a_idx, b_idx
    return lower, upper


@dataclass
class IsaacsReport:
    n_samples: int
    max_gap: float
    mean_gap: float
    min_gap: float
    tol: float
    seed: int

    @property
    def passed(self) -> bool:
        return self.max_gap <= self.tol


def check_isaacs(problem: GameProblem, paths: ForwardPathBatch,
                 n_samples: int = 2048, z_scale: float = 2.0,
                 seed: int = 0) -> IsaacsReport:
    """Minimax both ways on sampled (t, path, z) points and report the gaps.

    The gap upper - lower is >= 0 on any finite grid; the condition passes
    when the worst sampled gap stays below the (float-exactness) tolerance.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    m = problem.model.m
    max_gap, min_gap, total, count = -math.inf, math.inf, 0.0, 0
    blocks = min(8, paths.grid.n_steps + 1)
    per_block = max(1, n_samples // blocks)
    for _ in range(blocks):
        k = int(rng.integers(0, paths.grid.n_steps + 1))
        idx = rng.integers(0, paths.n_paths, size=per_block)
        full = paths.context(k)
        ctx = PathContext(t=full.t, k=k, states=full.states[idx], sup=full.sup[idx])
        z = z_scale * rng.standard_normal((per_block, m))
        lower, upper = _minimax_values(problem, ctx.t, ctx, z)
        gap = upper - lower
        max_gap = max(max_gap, float(np.max(gap)))
        min_gap = min(min_gap, float(np.min(gap)))
        total += float(np.sum(gap))
        count += gap.size
    return IsaacsReport(n_samples=count, max_gap=max_gap,
                        mean_gap=total / count, min_gap=min_gap,
                        tol=problem.isaacs_tol, seed=seed)


@dataclass
class SaddlePair:
    a_index: np.ndarray
    b_index: np.ndarray
    a_value: np.ndarray
    b_value: np.ndarray
    value: np.ndarray
    gap: np.ndarray


def saddle_strategies(problem: GameProblem, t: float, ctx: PathContext,
                      z: np.ndarray) -> SaddlePair:
    """First saddle pair in lexicographic (a index, b index) order.

    When the grid minimax values coincide, (first argmin of row maxima,
    first argmax of column minima) attains the common value and satisfies
    the saddle inequalities exactly on the grid.
    """
    lower, upper, a_idx, b_idx = _minimax_values(problem, t, ctx, z,
                                                 want_indices=True)
    gap = upper - lower
    worst = float(np.max(gap))
    if worst > problem.isaacs_tol:
        raise NoSaddleError(
            f"minimax gap {worst:.3e} exceeds tolerance "
            f"{problem.isaacs_tol:.1e}: no grid saddle here", gap=worst)
    return SaddlePair(a_index=a_idx, b_index=b_idx,
                      a_value=problem.actions_a[a_idx],
                      b_value=problem.actions_b[b_idx],
                      value=lower, gap=gap)


# -- the game value BSDE -----------------------------------------------------

class _GameValueDriver(DriverSpec):
    """phi(t, ctx, y, z) = max_b min_a H(t, ctx, z, a, b); ignores y.

    Under the Isaacs condition this equals the upper value and the
    Hamiltonian at the saddle pair; the worst gap seen during evaluation is
    tracked on the instance.
    """

    def __init__(self, problem: GameProblem, c0: float, eta_scale: float,
                 q_exp: float):
        self.problem = problem
        self._cache = {"ctx": None, "inv": None}
        self.runtime_max_gap = 0.0
        eta = (lambda ctx: eta_scale * np.exp(ctx.sup)) if eta_scale > 0 else 0.0
        super().__init__(
            name=f"game_hamiltonian:{problem.name}", phi=self._phi, c0=c0,
            eta=eta, alpha=1.2, y_dependent=False, path_dependent=True,
            time_dependent=True,
            meta={"eta_scale": eta_scale, "integrability_q": q_exp},
        )

    def _inv(self, ctx: PathContext) -> np.ndarray:
        if self._cache["ctx"] is not ctx:
            self._cache = {"ctx": ctx, "inv": _sigma_inverse(self.problem, ctx)}
        return self._cache["inv"]

    def _phi(self, t, ctx, y, z):
        lower, upper = _minimax_values(self.problem, t, ctx,
                                       np.asarray(z, dtype=float),
                                       sig_inv=self._inv(ctx))
        self.runtime_max_gap = max(self.runtime_max_gap,
                                   float(np.max(upper - lower)))
        return lower


def make_game_driver(problem: GameProblem, pilot: ForwardPathBatch,
                     q_exp: float = 0.01, validate: bool = True) -> DriverSpec:
    """Wrap the grid minimax value as a driver, certificate fitted on a pilot."""
    c0 = 0.0
    eta_scale = 0.0
    for k in range(pilot.grid.n_steps + 1):
        ctx = pilot.context(k)
        sig_inv = _sigma_inverse(problem, ctx)
        env = np.exp(ctx.sup)
        for b in problem.actions_b:
            for a in problem.actions_a:
                fv = np.asarray(problem.f(ctx.t, ctx, a, b), dtype=float)
                w = np.einsum("pij,pj->pi", sig_inv, fv)
                c0 = max(c0, float(np.max(np.linalg.norm(w, axis=-1))))
                hv = np.abs(np.asarray(problem.h(ctx.t, ctx, a, b), dtype=float))
                eta_scale = max(eta_scale, float(np.max(hv / env)))
    driver = _GameValueDriver(problem, c0=c0, eta_scale=eta_scale, q_exp=q_exp)
    if validate:
        box = SampleBox(y_max=10.0, z_max=10.0, n_y=9, n_z=17)
        report = validate_growth(driver, box, paths=pilot, d=problem.model.m)
        if not report["pass"]:
            raise ValueError("game driver violates its fitted growth "
                             f"certificate: margin {report['worst_margin']:.3e}")
        driver.meta["growth_report"] = report
    return driver


@dataclass
class ConstantPair:
    action_a: float
    action_b: float
    label: str = ""

    def __post_init__(self):
        if not self.label:
            self.label = f"const[{self.action_a:g},{self.action_b:g}]"


@dataclass
class FeedbackPair:
    """(u, v) = (saddle a, saddle b) at the stored Z regression of the value."""

    problem: GameProblem
    solution: BsdeSolution
    label: str = "saddle_feedback"

    def action_values(self, k: int, ctx: PathContext):
        kk = min(k, self.solution.z_coeffs.shape[0] - 1)
        z = self.solution.z_at(kk, ctx)
        _, _, a_idx, b_idx = _minimax_values(self.problem, ctx.t, ctx, z,
                                             want_indices=True)
        return (self.problem.actions_a[a_idx], self.problem.actions_b[b_idx])


def _pair_action_fn(problem: GameProblem, u_policy, v_policy):
    """Adapter: evaluate both players' actions per node, each from its own
    policy (a feedback pair contributes only its own player's component)."""
    def action_fn(k: int, ctx: PathContext):
        if isinstance(u_policy, FeedbackPair):
            a = u_policy.action_values(k, ctx)[0]
        else:
            a = np.full(ctx.n_paths, float(u_policy.action_a))
        if isinstance(v_policy, FeedbackPair):
            if v_policy is u_policy:
                b = u_policy.action_values(k, ctx)[1]
            else:
                b = v_policy.action_values(k, ctx)[1]
        else:
            b = np.full(ctx.n_paths, float(v_policy.action_b))
        return (a, b)
    return action_fn


def evaluate_payoff(problem: GameProblem, u_policy, v_policy, grid: TimeGrid,
                    n_paths: int, seed: int, route: str = "drift") -> PolicyValue:
    """Estimate J(u, v) by drift simulation or Girsanov reweighting."""
    label = f"{getattr(u_policy, 'label', 'u')}|{getattr(v_policy, 'label', 'v')}"
    return _policy_value_core(
        problem.model, grid, n_paths, seed, route,
        action_fn=_pair_action_fn(problem, u_policy, v_policy),
        drift_fn=lambda t, ctx, ab: problem.f(t, ctx, ab[0], ab[1]),
        reward_fn=lambda t, ctx, ab: problem.h(t, ctx, ab[0], ab[1]),
        terminal_fn=problem.g1,
        label=label,
        cond_threshold=problem.cond_threshold,
    )


@dataclass
class GameValue:
    problem: GameProblem
    driver: DriverSpec
    schedule_result: LogGrowthResult
    feedback: FeedbackPair
    isaacs: IsaacsReport

    @property
    def solution(self) -> BsdeSolution:
        return self.schedule_result.solution

    @property
    def y0(self) -> float:
        return self.solution.y0


def solve_game_value(problem: GameProblem, grid: TimeGrid, n_paths: int,
                     seed: int, basis: Optional[RegressionBasis] = None,
                     schedule: Sequence[int] = (8, 16, 32, 64),
                     picard: Optional[PicardParams] = None,
                     quad_order: int = 8,
                     paths: Optional[ForwardPathBatch] = None,
                     pilot_samples: int = 512) -> GameValue:
    """Check Isaacs on a pilot sample, then solve the saddle-value BSDE.

    Refuses (with the report attached) if the pilot gap exceeds tolerance.
    """
    if paths is None:
        noise = sample_brownian(grid, problem.model.m, n_paths, seed)
        paths = attach_noise(simulate_forward(problem.model, noise), noise)
    isaacs = check_isaacs(problem, paths, n_samples=pilot_samples, seed=seed)
    if not isaacs.passed:
        err = NoSaddleError(
            f"Isaacs pilot gap {isaacs.max_gap:.3e} exceeds tolerance "
            f"{problem.isaacs_tol:.1e}; refusing to define a game value",
            gap=isaacs.max_gap)
        err.report = isaacs
        raise err
    driver = make_game_driver(problem, paths)
    result = solve_loggrowth(driver, problem.terminal_condition(), paths,
                             basis=basis, schedule=schedule, picard=picard,
                             quad_order=quad_order)
    return GameValue(problem=problem, driver=driver, schedule_result=result,
                     feedback=FeedbackPair(problem, result.solution),
                     isaacs=isaacs)


def verify_saddle(problem: GameProblem, value: GameValue,
                  u_deviations: Sequence, v_deviations: Sequence,
                  grid: TimeGrid, n_paths: int, seed: int,
                  route: str = "drift",
                  extra_slack: Optional[float] = None) -> dict:
    """Check J(u~, v) <= J(u~, v~) <= J(u, v~) against unilateral deviations,
    and that the saddle payoff matches Y0."""
    def spacing(g):
        return float(np.max(np.diff(np.sort(g)))) if len(g) > 1 else 0.0

    slack = 3.0 * (grid.dt + max(spacing(problem.actions_a),
                                 spacing(problem.actions_b))) \
        if extra_slack is None else extra_slack
    y0 = value.y0
    y0_se = float(value.solution.Y[:, 0].std() / math.sqrt(n_paths))
    fb = value.feedback

    saddle_val = evaluate_payoff(problem, fb, fb, grid, n_paths, seed, route)
    rows_v = []
    for i, v_dev in enumerate(v_deviations):
        rows_v.append(evaluate_payoff(problem, fb, v_dev, grid, n_paths,
                                      seed + 1 + i, route))
    rows_u = []
    for i, u_dev in enumerate(u_deviations):
        rows_u.append(evaluate_payoff(problem, u_dev, fb, grid, n_paths,
                                      seed + 101 + i, route))

    v_ok = all(r.J <= saddle_val.J + 3.0 * math.hypot(r.se, saddle_val.se) + slack
               for r in rows_v)
    u_ok = all(saddle_val.J <= r.J + 3.0 * math.hypot(r.se, saddle_val.se) + slack
               for r in rows_u)
    y0_gap = abs(saddle_val.J - y0)
    y0_tol = 3.0 * math.hypot(saddle_val.se, y0_se) + slack
    return {
        "check": "saddle",
        "y0": y0,
        "saddle_J": saddle_val.J,
        "saddle_se": saddle_val.se,
        "y0_gap": y0_gap,
        "y0_tol": y0_tol,
        "value_matches": bool(y0_gap <= y0_tol),
        "v_deviations_dominated": bool(v_ok),
        "u_deviations_dominated": bool(u_ok),
        "slack": slack,
        "v_rows": [{"policy": r.label, "J": r.J, "se": r.se,
                    "margin": saddle_val.J - r.J} for r in rows_v],
        "u_rows": [{"policy": r.label, "J": r.J, "se": r.se,
                    "margin": r.J - saddle_val.J} for r in rows_u],
        "pass": bool(v_ok and u_ok and y0_gap <= y0_tol),
    }
