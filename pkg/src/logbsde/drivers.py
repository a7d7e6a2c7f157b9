"""BSDE generators: growth certificates, smoothing, and semi-norms.

A driver is a function phi(t, ctx, y, z) where ctx is a PathContext (or None
for path-independent drivers), y has any shape S and z has shape S + (d,).
The return value has shape S, broadcast against the per-path context arrays
aligned at axis 0 (see ctx_expand).

The central construction is mollify_truncate: convolve a driver with a
compactly supported bump of width 1/q(n) in (y, z) and multiply by a smooth
radial cutoff that is 1 on |(y, z)| <= n and 0 beyond n + 1.  The result is
bounded, Lipschitz, and still dominated by the declared growth bound, which
is what makes the backward solver applicable to drivers that only grow like
|z| sqrt(log |z|).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .paths import ForwardPathBatch, PathContext

EtaLike = Union[float, Callable[[PathContext], np.ndarray]]


def log_plus(z_norm):
    """ln(max(|z|, e)): a continuous stand-in for ln|z| that is always >= 1.

    The raw sqrt(ln|z|) is undefined below |z| = 1; clamping at e only
    enlarges the growth bound, so every certificate stated with it remains a
    certificate.
    """
    return np.log(np.maximum(z_norm, np.e))


def z_norm(z) -> np.ndarray:
    """Euclidean norm along the last axis."""
    z = np.asarray(z, dtype=float)
    return np.sqrt(np.sum(z * z, axis=-1))


def log_growth_bound(z, c0: float):
    """c0 |z| sqrt(log_plus|z|), the reference growth envelope."""
    r = z_norm(z)
    return c0 * r * np.sqrt(log_plus(r))


def ctx_expand(arr, ndim: int) -> np.ndarray:
    """Align a per-path (n_paths,) array against trailing evaluation axes."""
    a = np.asarray(arr, dtype=float)
    if a.ndim == 0:
        return a
    return a.reshape(a.shape + (1,) * (ndim - a.ndim))


@dataclass
class DriverSpec:
    """A generator phi with its declared growth certificate.

    eta is either a constant or a path functional ctx -> (n_paths,).  alpha
    is the effective polynomial growth exponent (|phi| <= eta + c1 |z|^alpha
    for some c1) used to size the mollifier scale and the exponent
    alpha_bar = min(2, 2/alpha) of the generator-moment estimates; any value
    in (1, 2) works for pure log growth and 1.2 is the recorded default.
    alpha_prime, when set, adds a |y|^alpha_prime term to the growth bound.
    """

    name: str
    phi: Callable
    c0: float = 0.0
    eta: EtaLike = 0.0
    alpha: float = 1.2
    alpha_prime: Optional[float] = None
    y_dependent: bool = True
    path_dependent: bool = False
    time_dependent: bool = False
    meta: dict = field(default_factory=dict)

    def __call__(self, t, ctx, y, z):
        return self.phi(t, ctx, y, z)

    @property
    def alpha_bar(self) -> float:
        return min(2.0, 2.0 / self.alpha)

    def eta_values(self, ctx: Optional[PathContext]):
        if callable(self.eta):
            if ctx is None:
                raise ValueError(f"driver {self.name!r} has a path-dependent eta; "
                                 "a path context is required")
            return np.asarray(self.eta(ctx), dtype=float)
        return float(self.eta)

    def growth_bound(self, ctx, y, z):
        """eta + [|y|^alpha_prime] + c0 |z| sqrt(log_plus|z|) at given points."""
        y = np.asarray(y, dtype=float)
        bound = log_growth_bound(z, self.c0)
        if self.alpha_prime is not None:
            bound = bound + np.abs(y) ** self.alpha_prime
        eta = self.eta_values(ctx)
        if np.ndim(eta) > 0:
            eta = ctx_expand(eta, max(bound.ndim, np.ndim(y)))
        return eta + bound


@dataclass
class MonotonicityCertificate:
    """Constants of the local monotonicity hypothesis.

    A maps a radius N to the localisation level A_N (1 < A_N <= N^r), v is
    the localising path functional (constant 0 keeps every sample).
    """

    M2: float
    r: float = 1.0
    A: Callable[[float], float] = lambda N: float(N)
    v: EtaLike = 0.0

    def validate_schedule(self, n_values) -> None:
        vals = np.array([self.A(n) for n in n_values], dtype=float)
        ns = np.asarray(n_values, dtype=float)
        if np.any(vals <= 1.0) or np.any(vals > ns ** self.r + 1e-12):
            raise ValueError("A_N schedule must satisfy 1 < A_N <= N^r")
        if vals[-1] <= vals[0]:
            raise ValueError("A_N must grow along the sampled schedule")

    def v_values(self, ctx: Optional[PathContext]):
        if callable(self.v):
            return np.asarray(self.v(ctx), dtype=float)
        return float(self.v)


# -- sample boxes and growth validation -------------------------------------

@dataclass(frozen=True)
class SampleBox:
    """Lattice bounds for (y, z) validation sweeps."""

    y_max: float = 10.0
    z_max: float = 10.0
    n_y: int = 33
    n_z: int = 33

    def y_lattice(self) -> np.ndarray:
        return np.linspace(-self.y_max, self.y_max, self.n_y)

    def z_lattice(self, d: int) -> np.ndarray:
        """Tensor lattice on the box, filtered to the Euclidean ball."""
        axis = np.linspace(-self.z_max, self.z_max, self.n_z)
        if d == 1:
            return axis[:, None]
        grids = np.meshgrid(*([axis] * d), indexing="ij")
        pts = np.stack([g.ravel() for g in grids], axis=-1)
        return pts[z_norm(pts) <= self.z_max + 1e-12]


STANDARD_BOX = SampleBox()


def _lattice_eval(driver, box: SampleBox, d: int, paths: Optional[ForwardPathBatch]):
    """Yield (t, ctx, Y, Z, values) sweeps of |driver| over the box lattice.

    Path/time independent drivers get a single sweep with ctx None.
    """
    y_lat = box.y_lattice()
    z_lat = box.z_lattice(d)
    Y = y_lat[:, None]          # (n_y, 1)
    Z = z_lat[None, :, :]       # (1, n_z_pts, d)
    needs_paths = driver.path_dependent or driver.time_dependent or callable(driver.eta)
    if needs_paths:
        if paths is None:
            raise ValueError(f"driver {driver.name!r} needs sampled paths for validation")
        for k in range(paths.grid.n_steps + 1):
            ctx = paths.context(k)
            vals = driver(ctx.t, ctx, Y[None], Z[None])
            yield ctx.t, ctx, Y[None], Z[None], vals
    else:
        yield 0.0, None, Y, Z, driver(0.0, None, Y, Z)


def _worst_lattice_point(margin: np.ndarray, t: float, Y: np.ndarray,
                         Z: np.ndarray):
    """Locate the worst margin on the (possibly broadcast-collapsed) lattice."""
    full = np.broadcast_shapes(margin.shape, np.shape(Y), Z.shape[:-1])
    mb = np.broadcast_to(margin, full)
    i = int(np.argmax(mb))
    idx = np.unravel_index(i, full)
    point = {
        "t": t,
        "y": float(np.broadcast_to(Y, full)[idx]),
        "z": np.broadcast_to(Z, full + (Z.shape[-1],))[idx].tolist(),
    }
    return float(mb[idx]), point


def validate_growth(driver: DriverSpec, box: SampleBox = STANDARD_BOX,
                    paths: Optional[ForwardPathBatch] = None, d: int = 1,
                    slack: float = 1e-12) -> dict:
    """Check |phi| <= eta (+ |y|^alpha') + c0 |z| sqrt(log_plus|z|) on a lattice.

    A failing report is a valid output; nothing is raised.
    """
    worst = -np.inf
    worst_point = None
    n_samples = 0
    for t, ctx, Y, Z, vals in _lattice_eval(driver, box, d, paths):
        margin = np.abs(vals) - driver.growth_bound(ctx, Y, Z)
        n_samples += margin.size
        m, point = _worst_lattice_point(margin, t, Y, Z)
        if m > worst:
            worst, worst_point = m, point
    return {
        "name": driver.name,
        "check": "growth",
        "pass": bool(worst <= slack),
        "worst_margin": worst,
        "worst_point": worst_point,
        "n_samples": n_samples,
    }


def validate_terminal_moment(xi: Callable, paths: ForwardPathBatch, C: float) -> dict:
    """Monte Carlo check that E|xi|^(ln(CT+2)+2) is finite and stable.

    Stability: the half-sample estimate moves by less than 10% when the path
    count doubles to the full sample.
    """
    from .paths import NumericalFailure, moment_exponent

    ctx = paths.terminal_context()
    vals = np.asarray(xi(ctx), dtype=float)
    if not np.all(np.isfinite(vals)):
        bad = int(np.flatnonzero(~np.isfinite(vals))[0])
        raise NumericalFailure(f"terminal condition not finite on path {bad}",
                               path_index=bad)
    p = moment_exponent(paths.grid.horizon, C)
    powered = np.abs(vals) ** p
    est = float(np.mean(powered))
    se = float(np.std(powered) / math.sqrt(len(powered)))
    half = float(np.mean(powered[: max(1, len(powered) // 2)]))
    drift = abs(est - half) / max(abs(est), 1e-300) if est != half else 0.0
    return {
        "check": "terminal_moment",
        "exponent": p,
        "estimate": est,
        "se": se,
        "half_sample_estimate": half,
        "relative_drift": drift,
        "pass": bool(np.isfinite(est) and drift < 0.10),
        "n_paths": paths.n_paths,
    }


# -- mollification ------------------------------------------------------------

_QUAD_CACHE: dict = {}


def _bump_quadrature(dim: int, order: int):
    """Gauss-Legendre nodes/weights on [-1,1]^dim, weighted by the standard
    bump exp(-1/(1-|u|^2)) and normalised to unit mass on the same grid.

    Normalising on the grid itself makes the smoothing exact for constants
    and, by symmetry, for linear functions.
    """
    key = (dim, order)
    if key in _QUAD_CACHE:
        return _QUAD_CACHE[key]
    x, w = np.polynomial.legendre.leggauss(order)
    grids = np.meshgrid(*([x] * dim), indexing="ij")
    pts = np.stack([g.ravel() for g in grids], axis=-1)
    wts = np.ones(len(pts))
    for ax in range(dim):
        wts = wts * w[np.arange(len(pts)) // (order ** (dim - 1 - ax)) % order]
    r2 = np.sum(pts * pts, axis=1)
    bump = np.where(r2 < 1.0, np.exp(-1.0 / np.maximum(1.0 - r2, 1e-300)), 0.0)
    wts = wts * bump
    full = wts / wts.sum()
    # marginal over the first (y) axis for drivers that never look at y
    wgrid = full.reshape((order,) * dim)
    marg_w = wgrid.sum(axis=0).ravel()
    marg_pts = pts.reshape((order,) * dim + (dim,))[0, ..., 1:].reshape(-1, dim - 1)
    keep = full > 0
    keep_m = marg_w > 0
    result = {
        "pts": pts[keep],
        "wts": full[keep],
        "marg_pts": marg_pts[keep_m],
        "marg_wts": marg_w[keep_m],
    }
    _QUAD_CACHE[key] = result
    return result


def smooth_cutoff(radius, n: float):
    """C^1 radial ramp: 1 on [0, n], cubic descent to 0 on [n, n+1]."""
    s = np.clip(np.asarray(radius, dtype=float) - n, 0.0, 1.0)
    return 1.0 - s * s * (3.0 - 2.0 * s)


@dataclass
class ApproxDriver:
    """Bounded Lipschitz smoothing of a base driver at truncation level n."""

    base: DriverSpec
    n: int
    q: int
    quad_order: int = 8
    lipschitz_estimate: Optional[float] = None

    @property
    def width(self) -> float:
        return 1.0 / self.q

    @property
    def name(self) -> str:
        return f"{self.base.name}~n{self.n}"

    # growth metadata is inherited from the base driver
    @property
    def c0(self) -> float:
        return self.base.c0

    @property
    def eta(self) -> EtaLike:
        return self.base.eta

    @property
    def alpha(self) -> float:
        return self.base.alpha

    @property
    def alpha_bar(self) -> float:
        return self.base.alpha_bar

    @property
    def alpha_prime(self):
        return self.base.alpha_prime

    @property
    def path_dependent(self) -> bool:
        return self.base.path_dependent

    @property
    def time_dependent(self) -> bool:
        return self.base.time_dependent

    @property
    def y_dependent(self) -> bool:
        # the radial cutoff couples y in even for y-independent bases
        return True

    def eta_values(self, ctx):
        return DriverSpec.eta_values(self, ctx)  # type: ignore[arg-type]

    def growth_bound(self, ctx, y, z):
        return DriverSpec.growth_bound(self, ctx, y, z)  # type: ignore[arg-type]

    def __call__(self, t, ctx, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        d = z.shape[-1]
        radius = np.sqrt(y * y + np.sum(z * z, axis=-1))
        psi = smooth_cutoff(radius, self.n)
        w = self.width
        quad = _bump_quadrature(1 + d, self.quad_order)
        if self.base.y_dependent:
            pts, wts = quad["pts"], quad["wts"]
            y_shift = y[..., None] - w * pts[:, 0]
            z_shift = z[..., None, :] - w * pts[:, 1:]
            vals = self.base(t, ctx, y_shift, z_shift)
        else:
            pts, wts = quad["marg_pts"], quad["marg_wts"]
            y_shift = y[..., None]
            z_shift = z[..., None, :] - w * pts
            vals = self.base(t, ctx, y_shift, z_shift)
        return np.einsum("...q,q->...", vals, wts) * psi

    def estimate_lipschitz(self, ctx=None, t: float = 0.0, d: int = 1,
                           n_probes: int = 256, seed: int = 0) -> float:
        """Empirical Lipschitz constant on the truncation ball by random
        centred differences; stored on the instance."""
        rng = np.random.Generator(np.random.Philox(seed))
        pts = rng.uniform(-(self.n + 1), self.n + 1, size=(n_probes, 1 + d))
        dirs = rng.standard_normal((n_probes, 1 + d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        h = 1e-4 * (1.0 + self.n)
        lo = pts - 0.5 * h * dirs
        hi = pts + 0.5 * h * dirs
        f_lo = self(t, ctx, lo[:, 0], lo[:, 1:])
        f_hi = self(t, ctx, hi[:, 0], hi[:, 1:])
        if np.ndim(f_lo) > 1:  # path-dependent base: worst case over paths
            f_lo = f_lo.reshape(-1, n_probes)
            f_hi = f_hi.reshape(-1, n_probes)
        est = float(np.max(np.abs(f_hi - f_lo)) / h)
        self.lipschitz_estimate = est
        return est


def mollifier_scale(n: int, alpha: float) -> int:
    """q(n) = ceil(n + n^alpha); the smoothing width is 1/q(n)."""
    return int(math.ceil(n + n ** alpha))


def mollify_truncate(driver: DriverSpec, n: int, alpha: Optional[float] = None,
                     quad_order: int = 8) -> ApproxDriver:
    """Build the n-th bounded Lipschitz approximation of a driver.

    alpha defaults to the driver's recorded effective growth exponent and
    must lie in [0, 2).
    """
    if n < 1:
        raise ValueError(f"truncation index must be >= 1, got {n}")
    a = driver.alpha if alpha is None else float(alpha)
    if not 0.0 <= a < 2.0:
        raise ValueError(f"alpha must be in [0, 2), got {a}")
    ad = ApproxDriver(base=driver, n=int(n), q=mollifier_scale(n, a),
                      quad_order=quad_order)
    if not driver.path_dependent:
        ad.estimate_lipschitz()
    return ad


def check_uniform_domination(approx: ApproxDriver, box: SampleBox = STANDARD_BOX,
                             paths: Optional[ForwardPathBatch] = None,
                             d: int = 1, slack: float = 1e-12) -> dict:
    """Lattice check that |phi_n| stays under the base growth bound.

    The smoothed value at p is a convex average of base values within one
    mollifier width, so the sharp comparison at p is against the shifted
    bound max_u bound(p - u), swept over the same quadrature offsets the
    smoothing itself uses.  The gap between that and the unshifted bound is
    exactly the bound's modulus of continuity over one width.
    """
    w = approx.width
    quad = _bump_quadrature(1 + d, approx.quad_order)
    if approx.base.y_dependent:
        offs_y = w * quad["pts"][:, 0]
        offs_z = w * quad["pts"][:, 1:]
    else:
        offs_y = np.zeros(len(quad["marg_wts"]))
        offs_z = w * quad["marg_pts"]
    worst = -np.inf
    worst_point = None
    n_samples = 0
    for t, ctx, Y, Z, vals in _lattice_eval(approx, box, d, paths):
        shifted = approx.growth_bound(ctx, Y, Z)
        for j in range(len(offs_y)):
            b = approx.growth_bound(ctx, Y - offs_y[j], Z - offs_z[j])
            shifted = np.maximum(shifted, b)
        margin = np.abs(vals) - shifted
        n_samples += margin.size
        m, point = _worst_lattice_point(margin, t, Y, Z)
        if m > worst:
            worst, worst_point = m, point
    return {
        "name": approx.name,
        "check": "uniform_domination",
        "pass": bool(worst <= slack),
        "worst_margin": worst,
        "worst_point": worst_point,
        "n_samples": n_samples,
        "mollifier_width": w,
    }


# -- the rho_N semi-norm ------------------------------------------------------

@dataclass
class SemiNormEstimate:
    """Monte Carlo estimate of E int_0^T sup_{|y|,|z|<=N} |phi1 - phi2| dt."""

    N: int
    value: float
    se: float
    lattice_res: float
    time_rule: str = "left"
    n_paths: int = 0
    refined_value: Optional[float] = None
    meta: dict = field(default_factory=dict)


def _pair_is_static(d1, d2) -> bool:
    return not (d1.path_dependent or d2.path_dependent
                or d1.time_dependent or d2.time_dependent)


def estimate_rho_N(d1, d2, N: int, paths: Optional[ForwardPathBatch] = None,
                   horizon: Optional[float] = None,
                   lattice_res: Optional[float] = None, d: int = 1,
                   refine_check: bool = True) -> SemiNormEstimate:
    """Estimate the driver-distance semi-norm at radius N.

    The inner sup runs over a lattice on the box |y| <= N, |z| <= N (default
    resolution 2N/32 per axis), the time integral uses the left-point grid
    rule, and the outer expectation averages over the supplied paths.  With
    refine_check the lattice is halved once and the refined value recorded so
    under-resolution of the sup is visible.
    """
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    res = 2.0 * N / 32.0 if lattice_res is None else float(lattice_res)

    def run(res_: float) -> SemiNormEstimate:
        n_pts = max(2, int(round(2.0 * N / res_)) + 1)
        box = SampleBox(y_max=float(N), z_max=float(N), n_y=n_pts, n_z=n_pts)
        Y = box.y_lattice()[:, None]
        Z = box.z_lattice(d)[None, :, :]

        def sup_at(t, ctx):
            diff = np.abs(d1(t, ctx, Y, Z) - d2(t, ctx, Y, Z))
            return diff.reshape(diff.shape[: -2] + (-1,)).max(axis=-1)

        if _pair_is_static(d1, d2):
            value = float(sup_at(0.0, None))
            T = paths.grid.horizon if paths is not None else horizon
            if T is None:
                raise ValueError("pass either paths or an explicit horizon")
            return SemiNormEstimate(N=N, value=T * value, se=0.0,
                                    lattice_res=res_, n_paths=0)
        if paths is None:
            raise ValueError("path batch required for path/time dependent drivers")
        dts = paths.grid.step_sizes
        per_path = np.zeros(paths.n_paths)
        for k in range(paths.grid.n_steps):
            ctx = paths.context(k)
            s = sup_at(ctx.t, ctx)
            per_path += dts[k] * np.broadcast_to(s, (paths.n_paths,))
        return SemiNormEstimate(
            N=N, value=float(per_path.mean()),
            se=float(per_path.std() / math.sqrt(paths.n_paths)),
            lattice_res=res_, n_paths=paths.n_paths,
        )

    est = run(res)
    if refine_check:
        est.refined_value = run(res / 2.0).value
    return est


# -- local monotonicity -------------------------------------------------------

def _uniform_ball(rng, n: int, d: int, radius: float) -> np.ndarray:
    dirs = rng.standard_normal((n, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = radius * rng.uniform(size=n) ** (1.0 / d)
    return dirs * radii[:, None]


def check_local_monotonicity(driver, cert: MonotonicityCertificate, N: int,
                             n_samples: int = 100_000,
                             paths: Optional[ForwardPathBatch] = None,
                             d: int = 1, seed: int = 0,
                             rel_slack: float = 1e-9) -> dict:
    """Fuzz the one-sided local monotonicity inequality at radius N.

    Draws (t, path, y, y', z, z') with |y|,|y'| <= N and z, z' in the radius-N
    ball, keeps samples where the localising process v_t <= N, and tests

        (y-y') (phi(t,y,z) - phi(t,y',z')) <= M2 |dy|^2 log A_N
            + M2 |dy||dz| sqrt(log A_N) + M2 log A_N / A_N.
    """
    if N <= 1:
        raise ValueError(f"N must exceed 1, got {N}")
    rng = np.random.Generator(np.random.Philox(seed))
    A_N = float(cert.A(N))
    logA = math.log(A_N)
    m2 = cert.M2

    needs_paths = driver.path_dependent or driver.time_dependent or callable(cert.v)
    if needs_paths and paths is None:
        raise ValueError("path batch required for this driver/certificate")

    violations = 0
    worst_excess = -np.inf
    kept = 0
    blocks = 1 if not needs_paths else min(16, paths.grid.n_steps + 1)
    per_block = int(math.ceil(n_samples / blocks))
    for b in range(blocks):
        if needs_paths:
            k = int(rng.integers(0, paths.grid.n_steps + 1))
            idx = rng.integers(0, paths.n_paths, size=per_block)
            full = paths.context(k)
            ctx = PathContext(t=full.t, k=k, states=full.states[idx],
                              sup=full.sup[idx])
            t = ctx.t
        else:
            ctx, t = None, 0.0
        y = rng.uniform(-N, N, size=per_block)
        y2 = rng.uniform(-N, N, size=per_block)
        z = _uniform_ball(rng, per_block, d, N)
        z2 = _uniform_ball(rng, per_block, d, N)
        v = cert.v_values(ctx)
        mask = np.broadcast_to(np.asarray(v) <= N, (per_block,))
        if not np.any(mask):
            continue
        dy = y - y2
        dz = z_norm(z - z2)
        lhs = dy * (driver(t, ctx, y, z) - driver(t, ctx, y2, z2))
        rhs = m2 * dy * dy * logA + m2 * np.abs(dy) * dz * math.sqrt(logA) \
            + m2 * logA / A_N
        excess = (lhs - rhs)[mask]
        scale = np.maximum(1.0, np.abs(rhs[mask]))
        bad = excess > rel_slack * scale
        violations += int(np.count_nonzero(bad))
        kept += int(np.count_nonzero(mask))
        if excess.size:
            worst_excess = max(worst_excess, float(np.max(excess)))
    return {
        "name": getattr(driver, "name", "?"),
        "check": "local_monotonicity",
        "N": N,
        "A_N": A_N,
        "violations": violations,
        "worst_excess": worst_excess,
        "n_kept": kept,
        "n_samples": n_samples,
        "seed": seed,
        "pass": violations == 0,
    }


# -- named driver registry ----------------------------------------------------

def _zero_phi(t, ctx, y, z):
    shape = np.broadcast_shapes(np.shape(y), np.shape(z)[:-1])
    return np.zeros(shape)


def make_zero() -> DriverSpec:
    return DriverSpec(name="zero", phi=_zero_phi, c0=0.0, eta=0.0,
                      y_dependent=False)


def make_linear_y(coef: float = -1.0) -> DriverSpec:
    def phi(t, ctx, y, z):
        shape = np.broadcast_shapes(np.shape(y), np.shape(z)[:-1])
        return np.broadcast_to(coef * np.asarray(y, dtype=float), shape)
    return DriverSpec(name="linear_y", phi=phi, c0=0.0, eta=0.0,
                      alpha_prime=1.0, meta={"coef": coef})


def make_linear_z(component: int = 0, coef: float = 1.0) -> DriverSpec:
    def phi(t, ctx, y, z):
        shape = np.broadcast_shapes(np.shape(y), np.shape(z)[:-1])
        return np.broadcast_to(coef * np.asarray(z, dtype=float)[..., component], shape)
    return DriverSpec(name="linear_z", phi=phi, c0=abs(coef), eta=0.0,
                      y_dependent=False, meta={"component": component, "coef": coef})


def make_loggrowth(c0: float = 0.5) -> DriverSpec:
    def phi(t, ctx, y, z):
        shape = np.broadcast_shapes(np.shape(y), np.shape(z)[:-1])
        return np.broadcast_to(log_growth_bound(z, c0), shape)
    return DriverSpec(name="loggrowth", phi=phi, c0=c0, eta=0.0,
                      y_dependent=False, meta={"c0": c0})


_REGISTRY: dict = {
    "zero": make_zero,
    "linear_y": make_linear_y,
    "linear_z": make_linear_z,
    "loggrowth": make_loggrowth,
}


def register_driver(name: str, factory: Callable) -> None:
    _REGISTRY[name] = factory


def make_driver(name: str, validate: bool = True, **params) -> DriverSpec:
    """Instantiate a named driver; growth is validated on the standard box."""
    if name not in _REGISTRY:
        raise KeyError(f"unknown driver {name!r}; have {sorted(_REGISTRY)}")
    spec = _REGISTRY[name](**params)
    if validate and not (spec.path_dependent or callable(spec.eta)):
        report = validate_growth(spec, STANDARD_BOX)
        if not report["pass"]:
            raise ValueError(f"driver {name!r} violates its growth certificate: "
                             f"worst margin {report['worst_margin']:.3e}")
    return spec
