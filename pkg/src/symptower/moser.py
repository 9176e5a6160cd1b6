"""Moser-style Darboux charts for pointwise-varying skew form fields.

The machinery follows the classical path: given a field omega(x) and the
constant form omega0 frozen at the base point, the affine family
``omega_t = omega0 + t * (omega - omega0)`` is transported back to omega0 by
the flow of ``X_t(x) = -flat(omega_t at x)^{-1} alpha_x``, where alpha is the
radial primitive of the difference field.  Everything here works on a ball
inside a model space; the infinite-dimensional story is probed through
per-level conditioning diagnostics rather than actual limits.

Conventions:

* flats follow the linalg module (matrix = omega.T);
* a point is valid for the family at time t when the flat at (t, x) has
  sigma_min > SING_TOL * sigma_max and condition number <= the cap;
* charts map forward: F = time-1 flow, with F^* omega = omega0 on the
  reported domain ball.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property, lru_cache

import numpy as np

from symptower.linalg import DimensionMismatchError, ModelSpace, SkewForm
from symptower.tower import Tower

# Relative floor for flat invertibility: singular below SING_TOL * sigma_max.
SING_TOL = 1e-8
# Condition-number cap defining the validity region.
COND_CAP = 1e6
# Gauss-Legendre node count for the radial primitive.
QUAD_NODES = 16
# Reject integration when measured_lipschitz * dt exceeds this.
LIPSCHITZ_CAP = 0.5

_EPS = np.finfo(float).tiny


class LeftValidityRegionError(ValueError):
    """The flat became (near-)singular at some (t, x)."""

    def __init__(self, t: float, x: np.ndarray, sigma_min: float):
        self.t = float(t)
        self.x = np.asarray(x, dtype=float)
        self.sigma_min = float(sigma_min)
        super().__init__(
            "left validity region at t=%.6g (sigma_min=%.3e)" % (t, sigma_min)
        )


class StabilityError(ValueError):
    """Step size too large for the measured Lipschitz constant."""


class ChartConstructionError(ValueError):
    """The base point's own trajectory failed; no chart exists."""


@lru_cache(maxsize=8)
def _unit_interval_quadrature(nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights mapped from [-1, 1] to [0, 1]."""
    xs, ws = np.polynomial.legendre.leggauss(nodes)
    return 0.5 * (xs + 1.0), 0.5 * ws


@dataclass(frozen=True, eq=False)
class FormField:
    """Skew-matrix field on a ball (in the gram norm) of a model space.

    ``eval_fn`` must map an array of points with shape (..., dim) to skew
    matrices of shape (..., dim, dim); set ``batched=False`` for a
    single-point function and it will be wrapped.  ``derivative``, when
    given, takes (x, h) and returns the directional derivative matrix.  The
    formulas should tolerate points slightly outside the declared region:
    region membership gates validity decisions, not evaluation.
    """

    space: ModelSpace
    center: np.ndarray
    radius: float
    eval_fn: object = None
    derivative: object = None
    fd_h: float = 1e-6
    constant_value: np.ndarray | None = None
    batched: bool = True

    def __post_init__(self) -> None:
        c = np.array(self.center, dtype=float)
        if c.shape != (self.space.dim,):
            raise DimensionMismatchError(
                "center must have shape (%d,)" % self.space.dim
            )
        c.flags.writeable = False
        object.__setattr__(self, "center", c)
        if not self.radius > 0.0:
            raise ValueError("radius must be positive")
        if (self.eval_fn is None) == (self.constant_value is None):
            raise ValueError("provide exactly one of eval_fn or constant_value")
        if self.constant_value is not None:
            m = np.array(self.constant_value, dtype=float)
            if m.shape != (self.space.dim, self.space.dim):
                raise DimensionMismatchError("constant_value has the wrong shape")
            m.flags.writeable = False
            object.__setattr__(self, "constant_value", m)
        probe = self.omega(self.center)
        defect = np.linalg.norm(probe + probe.T)
        if not np.all(np.isfinite(probe)):
            raise ValueError("field is not finite at the region center")
        if defect > 1e-10 * max(1.0, np.linalg.norm(probe)):
            raise ValueError("field is not skew at the region center")

    @classmethod
    def constant(cls, form: SkewForm, center, radius: float) -> "FormField":
        return cls(form.space, center, radius, constant_value=form.matrix)

    @property
    def is_zero(self) -> bool:
        return self.constant_value is not None and not np.any(self.constant_value)

    def omega(self, x) -> np.ndarray:
        return self.omega_many(np.asarray(x, dtype=float)[None, :])[0]

    def omega_many(self, pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        if self.constant_value is not None:
            out = np.empty(pts.shape[:-1] + (self.space.dim, self.space.dim))
            out[...] = self.constant_value
            return out
        if self.batched:
            return np.asarray(self.eval_fn(pts), dtype=float)
        flat = pts.reshape(-1, self.space.dim)
        out = np.stack([np.asarray(self.eval_fn(p), dtype=float) for p in flat])
        return out.reshape(pts.shape[:-1] + (self.space.dim, self.space.dim))

    def directional_derivative(self, x, h) -> np.ndarray:
        """D omega(x)[h]; analytic when available, else central differences."""
        x = np.asarray(x, dtype=float)
        h = np.asarray(h, dtype=float)
        if self.constant_value is not None:
            return np.zeros((self.space.dim, self.space.dim))
        if self.derivative is not None:
            return np.asarray(self.derivative(x, h), dtype=float)
        step = self.fd_h
        return (self.omega(x + step * h) - self.omega(x - step * h)) / (2.0 * step)

    def distance_from_center(self, x) -> float:
        return self.space.norm(np.asarray(x, dtype=float) - self.center)

    def contains(self, x, slack: float = 1e-12) -> bool:
        return self.distance_from_center(x) <= self.radius * (1.0 + slack)

    def contains_many(self, pts: np.ndarray, slack: float = 1e-12) -> np.ndarray:
        diffs = np.asarray(pts, dtype=float) - self.center
        if self.space.has_identity_gram:
            d = np.linalg.norm(diffs, axis=-1)
        else:
            d = np.sqrt(np.einsum("...i,ij,...j->...", diffs, self.space.gram_matrix, diffs))
        return d <= self.radius * (1.0 + slack)

    def shifted(self, new_center, offset_matrix: np.ndarray) -> "FormField":
        """Field minus a constant matrix, on the largest ball around new_center."""
        new_center = np.asarray(new_center, dtype=float)
        remaining = self.radius - self.distance_from_center(new_center)
        if remaining <= 0.0:
            raise ValueError("new center lies outside the region")
        offset = np.array(offset_matrix, dtype=float)
        if self.constant_value is not None:
            return FormField(
                self.space,
                new_center,
                remaining,
                constant_value=self.constant_value - offset,
            )
        inner = self

        def shifted_eval(pts):
            return inner.omega_many(pts) - offset

        return FormField(
            self.space,
            new_center,
            remaining,
            eval_fn=shifted_eval,
            derivative=self.derivative,
            fd_h=self.fd_h,
        )


@dataclass(frozen=True, eq=False)
class MoserFamily:
    """Affine family omega_t = omega0 + t * omega_bar on omega_bar's region."""

    omega0: SkewForm
    omega_bar: FormField

    def __post_init__(self) -> None:
        if not self.omega0.space.compatible_with(self.omega_bar.space):
            raise DimensionMismatchError("omega0 and omega_bar live on different spaces")

    @classmethod
    def darboux_target(cls, field: FormField, base_point) -> "MoserFamily":
        """Family joining a field to its own constant value at the base point."""
        base = np.asarray(base_point, dtype=float)
        at_base = field.omega(base)
        omega0 = SkewForm(field.space, 0.5 * (at_base - at_base.T))
        return cls(omega0, field.shifted(base, omega0.matrix))

    @property
    def space(self) -> ModelSpace:
        return self.omega_bar.space

    @property
    def base_point(self) -> np.ndarray:
        return self.omega_bar.center

    @cached_property
    def total_field(self) -> FormField:
        """The endpoint field omega = omega0 + omega_bar."""
        if self.omega_bar.constant_value is not None:
            return FormField(
                self.space,
                self.omega_bar.center,
                self.omega_bar.radius,
                constant_value=self.omega_bar.constant_value + self.omega0.matrix,
            )
        bar = self.omega_bar
        offset = self.omega0.matrix

        def total_eval(pts):
            return bar.omega_many(pts) + offset

        return FormField(
            self.space,
            bar.center,
            bar.radius,
            eval_fn=total_eval,
            derivative=bar.derivative,
            fd_h=bar.fd_h,
        )

    def omega_t_many(self, t: float, pts: np.ndarray) -> np.ndarray:
        return self.omega0.matrix + t * self.omega_bar.omega_many(pts)

    def omega_t(self, t: float, x) -> np.ndarray:
        return self.omega_t_many(t, np.asarray(x, dtype=float)[None, :])[0]


def exterior_derivative_residual(field: FormField, samples: int, seed: int = 0,
                                 triples: int = 4) -> float:
    """Max |d omega(X, Y, Z)| over sampled points and random unit triples.

    Constant argument fields make the bracket terms vanish, so the cyclic
    sum of directional derivatives is the whole exterior derivative.  Points
    are drawn inside a slightly shrunken ball so difference stencils never
    leave the region.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    dim = field.space.dim
    margin = field.fd_h if field.derivative is None else 0.0
    pts = _sample_ball(rng, field.space, field.center,
                       max(field.radius - 2.0 * margin, 0.5 * field.radius), samples)
    worst = 0.0
    for x in pts:
        for _ in range(triples):
            xs = rng.standard_normal((3, dim))
            xs /= np.linalg.norm(xs, axis=1, keepdims=True)
            dx, dy, dz = (field.directional_derivative(x, h) for h in xs)
            value = (
                xs[1] @ dx @ xs[2]
                + xs[2] @ dy @ xs[0]
                + xs[0] @ dz @ xs[1]
            )
            worst = max(worst, abs(float(value)))
    return worst


def radial_primitive(field_bar: FormField, x, quad_nodes: int = QUAD_NODES) -> np.ndarray:
    """The covector alpha_x = integral_0^1 s * flat(omega_bar at c+s(x-c))(x-c) ds.

    The segment from the region center to x must stay inside the region,
    which for a ball only fails when x itself is outside.
    """
    x = np.asarray(x, dtype=float)
    if not field_bar.contains(x, slack=1e-9):
        raise ValueError("not star-shaped reachable: point leaves the region")
    return _alpha_batch(field_bar, x[None, :], quad_nodes)[0]


def _alpha_batch(field_bar: FormField, pts: np.ndarray, quad_nodes: int) -> np.ndarray:
    nodes, weights = _unit_interval_quadrature(quad_nodes)
    diffs = pts - field_bar.center
    segs = field_bar.center + nodes[:, None, None] * diffs[None, :, :]
    dim = field_bar.space.dim
    oms = field_bar.omega_many(segs.reshape(-1, dim)).reshape(
        quad_nodes, pts.shape[0], dim, dim
    )
    covs = np.einsum("qnji,nj->qni", oms, diffs)
    return np.einsum("q,qni->ni", weights * nodes, covs)


def moser_vector_field(family: MoserFamily, alpha_of, t: float, x) -> np.ndarray:
    """Solve flat(omega_t at x) X = -alpha_x for the Moser velocity.

    ``alpha_of`` may be None to use the radial primitive of the family's
    difference field; pass a callable to reuse cached primitives.
    """
    x = np.asarray(x, dtype=float)
    if alpha_of is None:
        alpha = radial_primitive(family.omega_bar, x)
    else:
        alpha = np.asarray(alpha_of(x), dtype=float)
    omega_t = family.omega_t(t, x)
    s = np.linalg.svd(omega_t, compute_uv=False)
    if s[-1] <= SING_TOL * s[0] or s[0] == 0.0:
        raise LeftValidityRegionError(t, x, float(s[-1]))
    return -np.linalg.solve(omega_t.T, alpha)


def _sample_ball(rng, space: ModelSpace, center: np.ndarray, radius: float,
                 count: int) -> np.ndarray:
    """Uniform-ish samples in the gram-norm ball (exact for identity gram)."""
    dim = space.dim
    g = rng.standard_normal((count, dim))
    if not space.has_identity_gram:
        g = g @ space.gram_inv_sqrt
    norms = np.sqrt(np.einsum("ni,ij,nj->n", g, space.gram_matrix, g))
    u = g / np.maximum(norms, _EPS)[:, None]
    rho = radius * rng.random(count) ** (1.0 / dim)
    return center + rho[:, None] * u


def _validity_margins(family: MoserFamily, pts: np.ndarray, ts: np.ndarray,
                      sing_tol: float, cond_cap: float) -> np.ndarray:
    """min-over-t margin per point; positive means valid at every time."""
    bar = family.omega_bar.omega_many(pts)
    oms = family.omega0.matrix + ts[:, None, None, None] * bar[None]
    s = np.linalg.svd(oms, compute_uv=False)
    smax = s[..., 0]
    smin = s[..., -1]
    m1 = smin / np.maximum(sing_tol * smax, _EPS) - 1.0
    m2 = 1.0 - (smax / np.maximum(smin, _EPS)) / cond_cap
    return np.minimum(m1, m2).min(axis=0)


def validity_radius(
    family: MoserFamily,
    x0,
    t_grid: int = 11,
    ray_count: int = 16,
    cond_cap: float = COND_CAP,
    sing_tol: float = SING_TOL,
    seed: int = 0,
    march_steps: int = 96,
    extra_rays=None,
    axis_rays: bool = True,
) -> float:
    """Largest ball radius around x0 on which the family's flats stay usable.

    Marches outward along coordinate axes (skippable in high dimension via
    ``axis_rays=False``), seeded random rays, and any caller-supplied rays,
    refines local margin minima (thin degeneracy shells are narrower than
    the march step), and bisects the first sign change to 1e-3 relative.
    Returns 0.0 when x0 itself fails.
    """
    if cond_cap <= 1.0:
        raise ValueError("cond_cap must exceed 1")
    x0 = np.asarray(x0, dtype=float)
    space = family.space
    field = family.omega_bar
    available = field.radius - field.distance_from_center(x0)
    if available <= 0.0:
        return 0.0
    ts = np.linspace(0.0, 1.0, max(int(t_grid), 2))

    def margin_at(radii: np.ndarray, direction: np.ndarray) -> np.ndarray:
        pts = x0 + radii[:, None] * direction
        return _validity_margins(family, pts, ts, sing_tol, cond_cap)

    if margin_at(np.array([0.0]), np.zeros(space.dim))[0] <= 0.0:
        return 0.0

    rng = np.random.default_rng(seed)
    rays = []
    if axis_rays:
        eye = np.eye(space.dim)
        for k in range(space.dim):
            rays.append(eye[k])
            rays.append(-eye[k])
    if ray_count > 0:
        rays.extend(rng.standard_normal((ray_count, space.dim)))
    if extra_rays is not None:
        rays.extend(np.asarray(r, dtype=float) for r in extra_rays)
    best = available
    for ray in rays:
        n = space.norm(ray)
        if n == 0.0:
            continue
        direction = ray / n
        radii = np.linspace(0.0, available, march_steps + 1)
        margins = margin_at(radii, direction)
        best = min(best, _first_crossing(lambda r: margin_at(np.array([r]), direction)[0],
                                         radii, margins, available))
        if best == 0.0:
            break
    return best


def _first_crossing(margin_fn, radii: np.ndarray, margins: np.ndarray,
                    available: float) -> float:
    """Smallest radius where the margin turns non-positive, refined by bisection."""
    bad = np.nonzero(margins <= 0.0)[0]
    if bad.size:
        first = int(bad[0])
        if first == 0:
            return 0.0
        return _bisect_crossing(margin_fn, radii[first - 1], radii[first])
    # No marched failure: chase interior dips the grid may have stepped over.
    interior = np.arange(1, len(radii) - 1)
    dips = interior[(margins[interior] < margins[interior - 1])
                    & (margins[interior] < margins[interior + 1])]
    candidates = sorted(dips, key=lambda i: margins[i])[:4]
    cut = available
    for i in candidates:
        lo, hi = radii[i - 1], radii[i + 1]
        r_min = _ternary_min(margin_fn, lo, hi)
        if margin_fn(r_min) <= 0.0:
            cut = min(cut, _bisect_crossing(margin_fn, lo, r_min))
    return cut


def _ternary_min(f, lo: float, hi: float, iters: int = 50) -> float:
    for _ in range(iters):
        m1 = lo + (hi - lo) / 3.0
        m2 = hi - (hi - lo) / 3.0
        if f(m1) <= f(m2):
            hi = m2
        else:
            lo = m1
    return 0.5 * (lo + hi)


def _bisect_crossing(f, lo: float, hi: float, rel: float = 1e-3) -> float:
    """lo valid, hi invalid; shrink the bracket to rel and return the valid end."""
    while hi - lo > rel * max(hi, _EPS):
        mid = 0.5 * (lo + hi)
        if f(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return lo


@dataclass(frozen=True)
class IntegratorConfig:
    """Fixed-step RK4 settings; ``tol`` gates the base-point drift check."""

    method: str = "rk4"
    dt: float = 1e-3
    tol: float = 1e-8
    record_trajectories: bool = False

    def __post_init__(self) -> None:
        if self.method.lower() != "rk4":
            raise ValueError("only the rk4 integrator is available")
        if not 0.0 < self.dt <= 1.0:
            raise ValueError("dt must lie in (0, 1]")

    @property
    def steps(self) -> int:
        return max(1, int(round(1.0 / self.dt)))

    @property
    def actual_dt(self) -> float:
        return 1.0 / self.steps


@dataclass(frozen=True, eq=False)
class ChartMap:
    """Time-1 Moser flow, evaluated by re-integration.

    ``samples`` holds (input, output) pairs from the construction run; new
    points re-run the same fixed-step integration, so evaluations are exactly
    reproducible.
    """

    family: MoserFamily
    base_point: np.ndarray
    domain_radius: float
    dt: float
    steps: int
    quad_nodes: int
    samples: tuple

    def map_points(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        out, alive, _ = _integrate(
            self.family,
            np.asarray(pts, dtype=float),
            self.steps,
            t_start=0.0,
            t_end=1.0,
            quad_nodes=self.quad_nodes,
        )
        return out, alive

    def __call__(self, x) -> np.ndarray:
        out, alive = self.map_points(np.asarray(x, dtype=float)[None, :])
        if not alive[0]:
            raise LeftValidityRegionError(1.0, np.asarray(x, dtype=float), 0.0)
        return out[0]


@dataclass(frozen=True, eq=False)
class MoserReport:
    """Chart construction record; ``chart`` is None for radius-only entries."""

    base_point: np.ndarray
    chart: ChartMap | None
    validity_radius: float
    chart_radius: float
    pullback_residual: float
    steps: int
    step_size: float
    fixed_point_error: float
    lipschitz_estimate: float
    seed_points: np.ndarray | None = None
    trajectories: np.ndarray | None = None


def _field_batch(family: MoserFamily, t: float, pts: np.ndarray,
                 quad_nodes: int) -> tuple[np.ndarray, np.ndarray]:
    """Moser velocities and validity flags for a batch of points."""
    alpha = _alpha_batch(family.omega_bar, pts, quad_nodes)
    oms = family.omega_t_many(t, pts)
    s = np.linalg.svd(oms, compute_uv=False)
    smax = s[..., 0]
    smin = s[..., -1]
    ok = (smin > SING_TOL * smax) & (smax / np.maximum(smin, _EPS) <= COND_CAP)
    mats = np.swapaxes(oms, -1, -2)
    dim = pts.shape[-1]
    safe = np.where(ok[:, None, None], mats, np.eye(dim))
    vel = -np.linalg.solve(safe, alpha[..., None])[..., 0]
    return vel, ok


def _integrate(
    family: MoserFamily,
    pts: np.ndarray,
    steps: int,
    t_start: float,
    t_end: float,
    quad_nodes: int,
    record: bool = False,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Fixed-step RK4 for the whole batch; dead points freeze in place."""
    pts = np.array(pts, dtype=float)
    n = pts.shape[0]
    alive = family.omega_bar.contains_many(pts)
    if steps <= 0:
        trail = pts[:, None, :].copy() if record else None
        return pts, alive, trail
    h = (t_end - t_start) / steps
    trail = np.empty((n, steps + 1, pts.shape[1])) if record else None
    if record:
        trail[:, 0] = pts
    for k in range(steps):
        t = t_start + k * h
        k1, ok1 = _field_batch(family, t, pts, quad_nodes)
        k2, ok2 = _field_batch(family, t + 0.5 * h, pts + 0.5 * h * k1, quad_nodes)
        k3, ok3 = _field_batch(family, t + 0.5 * h, pts + 0.5 * h * k2, quad_nodes)
        k4, ok4 = _field_batch(family, t + h, pts + h * k3, quad_nodes)
        proposal = pts + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        step_ok = ok1 & ok2 & ok3 & ok4 & family.omega_bar.contains_many(proposal)
        alive &= step_ok
        pts = np.where(alive[:, None], proposal, pts)
        if record:
            trail[:, k + 1] = pts
    return pts, alive, trail


def flow_map(
    family: MoserFamily,
    points: np.ndarray,
    integrator: IntegratorConfig = IntegratorConfig(),
    t_start: float = 0.0,
    t_end: float = 1.0,
    quad_nodes: int = QUAD_NODES,
) -> tuple[np.ndarray, np.ndarray]:
    """Flow a batch of points between two times; returns (endpoints, alive)."""
    steps = max(1, int(round(abs(t_end - t_start) / integrator.actual_dt)))
    out, alive, _ = _integrate(
        family, np.atleast_2d(np.asarray(points, dtype=float)), steps,
        t_start, t_end, quad_nodes,
    )
    return out, alive


def _lipschitz_estimate(family: MoserFamily, pts: np.ndarray, scale: float,
                        quad_nodes: int, rng) -> float:
    """Empirical Lipschitz constant of the velocity field near the seeds."""
    worst = 0.0
    offsets = rng.standard_normal(pts.shape)
    offsets *= scale / np.maximum(np.linalg.norm(offsets, axis=1, keepdims=True), _EPS)
    for t in (0.0, 0.5, 1.0):
        v0, ok0 = _field_batch(family, t, pts, quad_nodes)
        v1, ok1 = _field_batch(family, t, pts + offsets, quad_nodes)
        use = ok0 & ok1
        if not np.any(use):
            continue
        num = np.linalg.norm(v1[use] - v0[use], axis=1)
        den = np.linalg.norm(offsets[use], axis=1)
        worst = max(worst, float(np.max(num / np.maximum(den, _EPS))))
    return worst


def moser_flow(
    family: MoserFamily,
    x0,
    r_start: float,
    integrator: IntegratorConfig = IntegratorConfig(),
    quad_nodes: int = QUAD_NODES,
    seed: int = 0,
    shell_fractions: tuple = (0.25, 0.5, 0.75, 1.0),
    extra_directions: int = 4,
    verify_samples: int = 12,
    closed_tol: float = 1e-6,
    closed_samples: int = 32,
    skip_validity_radius: bool = False,
    cond_cap: float = COND_CAP,
    sing_tol: float = SING_TOL,
) -> MoserReport:
    """Build the Darboux chart around x0 on the ball of radius r_start.

    Seeds on concentric shells are flowed from t=0 to 1; the chart domain is
    the largest shell whose seeds all stayed valid.  A zero difference field
    short-circuits to the identity chart.  The pullback residual is measured
    by verify_darboux_chart on fresh samples.
    """
    x0 = np.asarray(x0, dtype=float)
    space = family.space
    if not r_start > 0.0:
        raise ValueError("r_start must be positive")

    if family.omega_bar.is_zero:
        chart = ChartMap(family, x0, r_start, integrator.actual_dt, 0,
                         quad_nodes, samples=((x0, x0),))
        return MoserReport(
            base_point=x0,
            chart=chart,
            validity_radius=r_start,
            chart_radius=r_start,
            pullback_residual=0.0,
            steps=0,
            step_size=integrator.actual_dt,
            fixed_point_error=0.0,
            lipschitz_estimate=0.0,
        )

    closed = exterior_derivative_residual(family.omega_bar, closed_samples, seed=seed)
    if closed > closed_tol:
        raise ValueError(
            "family is not closed: exterior derivative residual %.3e" % closed
        )

    if skip_validity_radius:
        vr = r_start
    else:
        vr = validity_radius(family, x0, cond_cap=cond_cap, sing_tol=sing_tol, seed=seed)
        if r_start > vr * (1.0 + 1e-9):
            raise ValueError(
                "r_start %.6g exceeds the validity radius %.6g" % (r_start, vr)
            )

    rng = np.random.default_rng(seed)
    eye = np.eye(space.dim)
    dirs = [eye[k] for k in range(space.dim)] + [-eye[k] for k in range(space.dim)]
    if extra_directions > 0:
        dirs.extend(rng.standard_normal((extra_directions, space.dim)))
    dirs = [d / space.norm(d) for d in dirs]
    fractions = tuple(sorted(shell_fractions))
    seeds = [x0]
    shell_of = [0.0]
    for f in fractions:
        for d in dirs:
            seeds.append(x0 + f * r_start * d)
            shell_of.append(f)
    seeds = np.array(seeds)
    shell_of = np.array(shell_of)

    lip = _lipschitz_estimate(family, seeds, 1e-4 * r_start, quad_nodes, rng)
    dt = integrator.actual_dt
    if lip * dt > LIPSCHITZ_CAP:
        raise StabilityError(
            "measured Lipschitz constant %.3g times dt %.3g exceeds %.2g; "
            "shrink the step" % (lip, dt, LIPSCHITZ_CAP)
        )

    out, alive, trail = _integrate(
        family, seeds, integrator.steps, 0.0, 1.0, quad_nodes,
        record=integrator.record_trajectories,
    )
    if not alive[0]:
        raise ChartConstructionError(
            "no chart: the base point's trajectory left the validity region"
        )
    chart_radius = 0.0
    for f in fractions:
        if np.all(alive[shell_of <= f]):
            chart_radius = f * r_start
        else:
            break

    fixed_point_error = space.norm(out[0] - x0)
    chart = ChartMap(
        family, x0, chart_radius, dt, integrator.steps, quad_nodes,
        samples=tuple((seeds[i], out[i]) for i in range(len(seeds)) if alive[i]),
    )

    if chart_radius > 0.0 and verify_samples > 0:
        check = verify_darboux_chart(
            chart, family.total_field, family.omega0,
            samples=verify_samples, tol=np.inf, seed=seed,
        )
        residual = check.residual
    else:
        residual = fixed_point_error
    return MoserReport(
        base_point=x0,
        chart=chart,
        validity_radius=vr,
        chart_radius=chart_radius,
        pullback_residual=residual,
        steps=integrator.steps,
        step_size=dt,
        fixed_point_error=fixed_point_error,
        lipschitz_estimate=lip,
        seed_points=seeds if integrator.record_trajectories else None,
        trajectories=trail,
    )


@dataclass(frozen=True)
class VerifyReport:
    residual: float
    ok: bool
    used: int
    skipped: int


def verify_darboux_chart(
    chart,
    omega_field: FormField,
    omega0: SkewForm,
    samples: int = 50,
    tol: float = 1e-5,
    center=None,
    radius: float | None = None,
    seed: int = 0,
    fd_step: float = 1e-4,
) -> VerifyReport:
    """Independent pullback check: max_x || DF^T omega(F(x)) DF - omega0 ||_2.

    DF comes from central differences on the chart evaluator itself, so the
    check does not reuse any quantity from the construction.  ``chart`` is a
    ChartMap or any callable point -> point; plain callables need explicit
    ``center`` and ``radius``.  Samples whose stencil or image leaves the
    usable region are skipped and counted.
    """
    space = omega0.space
    dim = space.dim
    if isinstance(chart, ChartMap):
        center = chart.base_point if center is None else np.asarray(center, float)
        radius = chart.domain_radius if radius is None else radius
    elif center is None or radius is None:
        raise ValueError("plain callables need explicit center and radius")
    else:
        center = np.asarray(center, dtype=float)
    if radius <= 0.0:
        raise ValueError("verification radius must be positive")

    rng = np.random.default_rng(seed)
    sample_radius = max(radius - 2.0 * fd_step, 0.25 * radius)
    base_pts = _sample_ball(rng, space, center, sample_radius, samples)

    eye = np.eye(dim)
    stencil = [base_pts]
    for k in range(dim):
        stencil.append(base_pts + fd_step * eye[k])
        stencil.append(base_pts - fd_step * eye[k])
    batch = np.concatenate(stencil, axis=0)

    if isinstance(chart, ChartMap):
        out, alive = chart.map_points(batch)
    else:
        out = np.empty_like(batch)
        alive = np.ones(len(batch), dtype=bool)
        for i, p in enumerate(batch):
            try:
                out[i] = np.asarray(chart(p), dtype=float)
            except (ValueError, ArithmeticError):
                alive[i] = False

    out = out.reshape(2 * dim + 1, samples, dim)
    alive = alive.reshape(2 * dim + 1, samples)
    usable = alive.all(axis=0)

    worst = 0.0
    used = 0
    skipped = int(np.count_nonzero(~usable))
    for j in range(samples):
        if not usable[j]:
            continue
        image = out[0, j]
        if not omega_field.contains(image, slack=1e-6):
            skipped += 1
            continue
        df = np.empty((dim, dim))
        for k in range(dim):
            df[:, k] = (out[2 * k + 1, j] - out[2 * k + 2, j]) / (2.0 * fd_step)
        mismatch = df.T @ omega_field.omega(image) @ df - omega0.matrix
        worst = max(worst, float(np.linalg.svd(mismatch, compute_uv=False)[0]))
        used += 1
    if used == 0:
        return VerifyReport(residual=float("inf"), ok=False, used=0, skipped=skipped)
    return VerifyReport(residual=worst, ok=worst <= tol, used=used, skipped=skipped)


@dataclass(frozen=True)
class LevelBounds:
    level: int
    forward: float
    inverse: float
    kumar: float


@dataclass(frozen=True)
class UniformBoundReport:
    forward_ok: bool
    inverse_ok: bool
    kumar_ok: bool
    per_level: tuple[LevelBounds, ...]


def uniform_bound_check(
    per_level_families,
    base_points,
    K: float,
    t_grid: int = 11,
    kumar_radius_factor: float = 0.5,
    kumar_samples: int = 32,
    seed: int = 0,
    quad_nodes: int = QUAD_NODES,
) -> UniformBoundReport:
    """Per-level operator norms of the family flats and their inverses.

    ``forward`` and ``inverse`` are gram-normalized operator norms of the
    flat at the base point, maximized over the time grid; ``kumar`` is the
    norm of the flat-inverse applied to the radial primitive, maximized over
    time and a sampled ball around the base point.  The per-level table makes
    growth across levels visible; the three flags compare against K.
    """
    families = list(per_level_families)
    bases = [np.asarray(b, dtype=float) for b in base_points]
    if len(families) != len(bases):
        raise ValueError("need one base point per family")
    ts = np.linspace(0.0, 1.0, max(int(t_grid), 2))
    rows = []
    for level, (family, base) in enumerate(zip(families, bases)):
        space = family.space
        gis = space.gram_inv_sqrt
        bar_at_base = family.omega_bar.omega(base)
        forward = 0.0
        inverse = 0.0
        for t in ts:
            flat = (family.omega0.matrix + t * bar_at_base).T
            s = np.linalg.svd(gis @ flat @ gis, compute_uv=False)
            forward = max(forward, float(s[0]))
            inverse = max(inverse, float("inf") if s[-1] <= _EPS else float(1.0 / s[-1]))

        rng = np.random.default_rng(seed + level)
        avail = family.omega_bar.radius - family.omega_bar.distance_from_center(base)
        ball = _sample_ball(rng, space, base, kumar_radius_factor * max(avail, 0.0),
                            kumar_samples)
        pts = np.vstack([base[None, :], ball])
        alphas = _alpha_batch(family.omega_bar, pts, quad_nodes)
        kumar = 0.0
        for t in ts:
            oms = family.omega_t_many(t, pts)
            s = np.linalg.svd(oms, compute_uv=False)
            singular = s[..., -1] <= SING_TOL * s[..., 0]
            if np.any(singular):
                kumar = float("inf")
                continue
            flats = np.swapaxes(oms, -1, -2)
            sols = np.linalg.solve(flats, alphas[..., None])[..., 0]
            if space.has_identity_gram:
                norms = np.linalg.norm(sols, axis=1)
            else:
                norms = np.sqrt(np.einsum("ni,ij,nj->n", sols, space.gram_matrix, sols))
            kumar = max(kumar, float(np.max(norms)))
        rows.append(LevelBounds(level=level, forward=forward, inverse=inverse, kumar=kumar))
    return UniformBoundReport(
        forward_ok=all(r.forward <= K for r in rows),
        inverse_ok=all(r.inverse <= K for r in rows),
        kumar_ok=all(r.kumar <= K for r in rows),
        per_level=tuple(rows),
    )


@dataclass(frozen=True)
class AssemblyReport:
    ok: bool
    limiting_radius_by_level: tuple[float, ...]
    diagnosis: str
    fitted_exponent: float | None


def assemble_projective_darboux(
    per_level_reports,
    tower: Tower,
    min_radius: float,
) -> AssemblyReport:
    """Radii of chart balls pushed down the tower, with a decay diagnosis.

    For each base level the limiting radius is the smallest ball guaranteed
    inside every projected higher-level chart domain (projection shrinks a
    ball by the smallest positive singular value of the gram-normalized
    composite).  A power-law fit across levels feeds the diagnosis when the
    floor is missed.
    """
    reports = list(per_level_reports)
    if len(reports) != tower.depth + 1:
        raise ValueError(
            "missing level report: need %d, got %d" % (tower.depth + 1, len(reports))
        )
    radii = [float(r.chart_radius) for r in reports]

    def shrink_factor(i: int, j: int) -> float:
        if i == j:
            return 1.0
        mat = tower.composite(i, j).matrix
        src = tower.levels[j]
        tgt = tower.levels[i]
        normalized = mat
        if not src.has_identity_gram:
            normalized = normalized @ src.gram_inv_sqrt
        if not tgt.has_identity_gram:
            w, v = np.linalg.eigh(tgt.gram_matrix)
            normalized = ((v * np.sqrt(w)) @ v.T) @ normalized
        s = np.linalg.svd(normalized, compute_uv=False)
        if len(s) < tgt.dim or s[tgt.dim - 1] <= 1e-14 * s[0]:
            return 0.0
        return float(s[tgt.dim - 1])

    limiting = []
    for i in range(tower.depth + 1):
        values = [radii[j] * shrink_factor(i, j) for j in range(i, tower.depth + 1)]
        limiting.append(min(values))
    ok = all(v >= min_radius for v in limiting)

    fitted = None
    positive = [(j, radii[j]) for j in range(1, tower.depth + 1) if radii[j] > 0.0]
    if len(positive) >= 2:
        xs = np.log([j for j, _ in positive])
        ys = np.log([r for _, r in positive])
        fitted = float(np.polyfit(xs, ys, 1)[0])

    if ok:
        diagnosis = "all levels retain a chart ball of radius >= %g" % min_radius
    elif any(r == 0.0 for r in radii):
        dead = [j for j, r in enumerate(radii) if r == 0.0]
        diagnosis = "levels %s produced no chart ball" % dead
    elif fitted is not None and fitted <= -0.3:
        diagnosis = (
            "chart radii decay like a power law with fitted exponent %.2f; "
            "no common radius survives deeper levels" % fitted
        )
    else:
        bad = [i for i, v in enumerate(limiting) if v < min_radius]
        diagnosis = "radius floor %g not met at levels %s" % (min_radius, bad)
    return AssemblyReport(
        ok=ok,
        limiting_radius_by_level=tuple(limiting),
        diagnosis=diagnosis,
        fitted_exponent=fitted,
    )
