"""Concrete towers and form fields, plus the shrinking-radius experiment.

Three families of worked examples back the rest of the package: phase
spaces over a shifted conformal metric whose form degenerates along a
hyperplane, finite products of canonical blocks (the well-behaved
control), and Fourier truncations of Sobolev loop spaces.  The
:func:`shrink_experiment` driver measures chart radii across tower levels
and reports whether a uniform radius survives.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .linalg import (
    LinearMap,
    ModelSpace,
    SkewForm,
    check_weak_nondegenerate,
    darboux_constant_form,
    weakness_conditioning,
)
from .moser import (
    COND_CAP,
    AssemblyReport,
    FormField,
    MoserFamily,
    MoserReport,
    UniformBoundReport,
    assemble_projective_darboux,
    uniform_bound_check,
    validity_radius,
)
from .tower import FormSequence, Thread, Tower, build_tower

__all__ = [
    "MarsdenSpec",
    "ShrinkRow",
    "ShrinkResult",
    "make_marsden_field",
    "make_quadratic_field",
    "make_product_tower",
    "make_counterexample_tower",
    "make_loop_tower",
    "field_sequence_at",
    "shrink_experiment",
]

# Spectrum used by the shrinking-chart tower: a wide spread pushes the
# conditioning at the degeneracy hyperplanes past any reasonable cap.
SHRINK_EIGS_DECADES = 8.0


@dataclass(frozen=True)
class MarsdenSpec:
    """Parameters of the metric phase space on R^d x R^d.

    The base metric at x is ``<A_x u, v>`` with ``A_x = |x - a/shift_k|^2 I
    + diag(s_eigs)``, so the induced form degenerates in conditioning as x
    approaches the shifted point ``a / shift_k``.  ``s_eigs`` must be
    strictly positive and non-increasing; it defaults to the harmonic
    sequence ``1, 1/2, ..., 1/d``.
    """

    d: int
    a: np.ndarray
    shift_k: int = 1
    s_eigs: np.ndarray | None = None

    def __post_init__(self) -> None:
        if not isinstance(self.d, (int, np.integer)) or self.d < 1:
            raise ValueError("d must be a positive integer, got %r" % (self.d,))
        object.__setattr__(self, "d", int(self.d))
        a = np.array(self.a, dtype=float)
        if a.shape != (self.d,):
            raise ValueError("a must have shape (%d,), got %r" % (self.d, a.shape))
        if not np.linalg.norm(a) > 0.0:
            raise ValueError("a must be nonzero")
        a.flags.writeable = False
        object.__setattr__(self, "a", a)
        if not isinstance(self.shift_k, (int, np.integer)) or self.shift_k < 1:
            raise ValueError("shift_k must be a positive integer, got %r" % (self.shift_k,))
        object.__setattr__(self, "shift_k", int(self.shift_k))
        if self.s_eigs is None:
            s = 1.0 / np.arange(1, self.d + 1, dtype=float)
        else:
            s = np.array(self.s_eigs, dtype=float)
        if s.shape != (self.d,):
            raise ValueError("s_eigs must have shape (%d,), got %r" % (self.d, s.shape))
        if not np.all(s > 0.0):
            raise ValueError("s_eigs must be strictly positive")
        if np.any(np.diff(s) > 0.0):
            raise ValueError("s_eigs must be non-increasing")
        s.flags.writeable = False
        object.__setattr__(self, "s_eigs", s)

    @property
    def a_norm(self) -> float:
        return float(np.linalg.norm(self.a))

    @property
    def shift(self) -> np.ndarray:
        return self.a / self.shift_k

    @property
    def phase_dim(self) -> int:
        return 2 * self.d


def _slot_field(space: ModelSpace, shifts: np.ndarray, s_eigs: np.ndarray,
                center: np.ndarray, radius: float) -> FormField:
    """Field 0.5 [[Gamma_k, A_k], [-A_k, 0]] blockwise over n factor slots.

    Points are laid out base-first: ``(x_1 .. x_n, e_1 .. e_n)`` with
    ``w_k = x_k - shifts[k]``, ``A_k = |w_k|^2 I + diag(s_eigs)`` and
    ``Gamma_k = 2 (e_k w_k^T - w_k e_k^T)``.
    """
    n, d = shifts.shape
    eye = np.eye(d)
    s_diag = np.diag(s_eigs)

    def evaluate(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        lead = pts.shape[:-1]
        xs = pts[..., : n * d].reshape(lead + (n, d))
        es = pts[..., n * d :].reshape(lead + (n, d))
        ws = xs - shifts
        wn2 = np.einsum("...ki,...ki->...k", ws, ws)
        a_blk = wn2[..., None, None] * eye + s_diag
        gamma = 2.0 * (
            es[..., :, None] * ws[..., None, :] - ws[..., :, None] * es[..., None, :]
        )
        out = np.zeros(lead + (2 * n * d, 2 * n * d))
        for k in range(n):
            base = slice(k * d, (k + 1) * d)
            fib = slice((n + k) * d, (n + k + 1) * d)
            out[..., base, base] = gamma[..., k, :, :]
            out[..., base, fib] = a_blk[..., k, :, :]
            out[..., fib, base] = -a_blk[..., k, :, :]
        return 0.5 * out

    def derivative(z: np.ndarray, h: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        h = np.asarray(h, dtype=float)
        xs = z[: n * d].reshape(n, d)
        es = z[n * d :].reshape(n, d)
        hx = h[: n * d].reshape(n, d)
        he = h[n * d :].reshape(n, d)
        ws = xs - shifts
        out = np.zeros((2 * n * d, 2 * n * d))
        for k in range(n):
            da = 2.0 * float(ws[k] @ hx[k]) * eye
            dg = 2.0 * (
                np.outer(he[k], ws[k])
                + np.outer(es[k], hx[k])
                - np.outer(hx[k], es[k])
                - np.outer(ws[k], he[k])
            )
            base = slice(k * d, (k + 1) * d)
            fib = slice((n + k) * d, (n + k + 1) * d)
            out[base, base] = dg
            out[base, fib] = da
            out[fib, base] = -da
        return 0.5 * out

    return FormField(space, center, radius, eval_fn=evaluate, derivative=derivative)


def make_marsden_field(
    spec: MarsdenSpec,
    center=None,
    radius: float | None = None,
) -> FormField:
    """Closed form field of the metric phase space described by ``spec``.

    The matrix at ``(x, e)`` is ``0.5 [[Gamma, A_x], [-A_x, 0]]`` and the
    directional derivative is supplied analytically.  The region defaults
    to a ball around the phase origin wide enough to reach past the
    degeneracy point at distance ``|a| / shift_k``.
    """
    space = ModelSpace(spec.phase_dim, label="marsden-d%d" % spec.d)
    if center is None:
        center = np.zeros(spec.phase_dim)
    if radius is None:
        radius = 2.0 * max(1.0, float(np.linalg.norm(spec.shift)))
    return _slot_field(space, spec.shift[None, :], spec.s_eigs, np.asarray(center, float), radius)


def make_quadratic_field(
    l_dim: int,
    epsilon: float,
    seed: int = 0,
    radius: float = 1.0,
    center=None,
) -> FormField:
    """Canonical block plus ``epsilon`` times a seeded closed quadratic term.

    The perturbation is the exterior derivative of a random one-form with
    quadratic coefficients, so the total field stays closed for any
    ``epsilon`` and degenerates only far from the origin once ``epsilon``
    is small.
    """
    base = darboux_constant_form(l_dim)
    dim = 2 * l_dim
    rng = np.random.default_rng(seed)
    q = rng.standard_normal((dim, dim, dim))
    # Symmetry in the last two slots makes the cyclic sums cancel exactly.
    q = 0.5 * (q + np.swapaxes(q, 1, 2))
    if center is None:
        center = np.zeros(dim)

    def evaluate(pts: np.ndarray) -> np.ndarray:
        pts = np.asarray(pts, dtype=float)
        j = np.einsum("ijk,...k->...ij", q, pts)
        return base.matrix + epsilon * (np.swapaxes(j, -1, -2) - j)

    def derivative(x: np.ndarray, h: np.ndarray) -> np.ndarray:
        j = np.einsum("ijk,k->ij", q, np.asarray(h, dtype=float))
        return epsilon * (j.T - j)

    return FormField(base.space, center, radius, eval_fn=evaluate, derivative=derivative)


def _block_diag(mats: Sequence[np.ndarray]) -> np.ndarray:
    total = sum(m.shape[0] for m in mats)
    out = np.zeros((total, total))
    at = 0
    for m in mats:
        k = m.shape[0]
        out[at : at + k, at : at + k] = m
        at += k
    return out


def make_product_tower(factor_forms) -> tuple[Tower, FormSequence]:
    """Tower of partial products of the given symplectic factors.

    Level i carries the direct sum of the first i+1 factors with the block
    diagonal form; bondings project away the last factor.  Every factor
    must be nondegenerate (the error names the offender).
    """
    factors = list(factor_forms)
    if not factors:
        raise ValueError("need at least one factor")
    for idx, form in enumerate(factors):
        if not check_weak_nondegenerate(form).nondegenerate:
            raise ValueError("factor %d carries a degenerate form" % idx)

    levels = []
    forms = []
    for i in range(len(factors)):
        head = factors[: i + 1]
        dim = sum(f.space.dim for f in head)
        if all(f.space.has_identity_gram for f in head):
            gram = None
        else:
            gram = _block_diag([f.space.gram_matrix for f in head])
        space = ModelSpace(dim, gram, label="product-%d" % (i + 1))
        levels.append(space)
        forms.append(SkewForm(space, _block_diag([f.matrix for f in head])))

    bondings = []
    for i in range(len(factors) - 1):
        tgt, src = levels[i], levels[i + 1]
        proj = np.zeros((tgt.dim, src.dim))
        proj[:, : tgt.dim] = np.eye(tgt.dim)
        bondings.append(LinearMap(src, tgt, proj))
    tower = build_tower(levels, bondings)
    return tower, FormSequence(tower, tuple(forms))


def _drop_last_slot(n: int, d: int) -> np.ndarray:
    # Base-first layout: keep x_1..x_{n-1} and e_1..e_{n-1} out of level n.
    keep = list(range((n - 1) * d)) + list(range(n * d, (2 * n - 1) * d))
    m = np.zeros((2 * (n - 1) * d, 2 * n * d))
    m[np.arange(len(keep)), keep] = 1.0
    return m


def make_counterexample_tower(
    d: int,
    depth: int,
    a=None,
    s_eigs=None,
    region_radius: float | None = None,
) -> tuple[Tower, tuple[FormField, ...]]:
    """Tower whose chart radii provably shrink to zero, with its form fields.

    Level n (1-based; tower index n-1) is the phase space of the product of
    n metric factors, where factor k is shifted to degenerate on the
    hyperplane ``x_k = a/k`` at distance ``|a|/k`` from the origin.  The
    default spectrum spans eight decades so the conditioning blows past
    any practical cap on those hyperplanes.  Bondings drop the last factor
    in both base and fiber coordinates.
    """
    if not isinstance(depth, (int, np.integer)) or depth < 1:
        raise ValueError("depth must be a positive integer, got %r" % (depth,))
    depth = int(depth)
    if a is None:
        a = np.zeros(d)
        a[0] = 1.0
    if s_eigs is None:
        s_eigs = np.logspace(0.0, -SHRINK_EIGS_DECADES, d)
    base_spec = MarsdenSpec(d=d, a=a, shift_k=1, s_eigs=s_eigs)
    a_vec = base_spec.a
    if region_radius is None:
        region_radius = 2.0 * max(1.0, base_spec.a_norm)

    levels = []
    fields = []
    for n in range(1, depth + 1):
        space = ModelSpace(2 * n * d, label="shrink-%d" % n)
        shifts = np.stack([a_vec / k for k in range(1, n + 1)])
        levels.append(space)
        fields.append(
            _slot_field(space, shifts, base_spec.s_eigs, np.zeros(space.dim), region_radius)
        )
    bondings = [
        LinearMap(levels[i + 1], levels[i], _drop_last_slot(i + 2, d))
        for i in range(depth - 1)
    ]
    tower = build_tower(levels, bondings)
    return tower, tuple(fields)


def field_sequence_at(tower: Tower, fields, thread: Thread) -> FormSequence:
    """Snapshot of per-level fields along a thread, as a form sequence."""
    fields = list(fields)
    if len(fields) != tower.depth + 1:
        raise ValueError(
            "need %d fields, got %d" % (tower.depth + 1, len(fields))
        )
    forms = tuple(
        SkewForm(tower.levels[i], fields[i].omega(thread.component(i)))
        for i in range(tower.depth + 1)
    )
    return FormSequence(tower, forms)


def make_loop_tower(m: int, modes: int, orders) -> tuple[Tower, FormSequence]:
    """Fourier-truncated Sobolev loop spaces with the mode-wise pairing.

    Coordinates are grouped by Fourier slot (constant, then cos/sin per
    frequency), each slot holding R^(2m).  Level i uses the order
    ``orders[i]`` gram ``diag((1 + j^2)^k)`` per slot coordinate, while the
    form is the same block Darboux matrix at every level, so bondings are
    identity inclusions and the pullback identity holds exactly.
    """
    if not isinstance(m, (int, np.integer)) or m < 1:
        raise ValueError("m must be a positive integer, got %r" % (m,))
    if not isinstance(modes, (int, np.integer)) or modes < 0:
        raise ValueError("modes must be a non-negative integer, got %r" % (modes,))
    orders = list(orders)
    if not orders:
        raise ValueError("need at least one order")
    for k in orders:
        if not isinstance(k, (int, np.integer)) or k < 0:
            raise ValueError("orders must be non-negative integers, got %r" % (k,))
    if any(b <= a for a, b in zip(orders, orders[1:])):
        raise ValueError("orders must be strictly increasing")

    m, modes = int(m), int(modes)
    freqs = [0] + [j for j in range(1, modes + 1) for _ in range(2)]
    dim = len(freqs) * 2 * m
    form_matrix = np.kron(np.eye(len(freqs)), darboux_constant_form(m).matrix)

    levels = []
    forms = []
    for k in orders:
        weights = np.repeat([(1.0 + j * j) ** k for j in freqs], 2 * m)
        gram = None if k == 0 else np.diag(weights)
        space = ModelSpace(dim, gram, label="loops-h%d" % k)
        levels.append(space)
        forms.append(SkewForm(space, form_matrix))
    bondings = [
        LinearMap(levels[i + 1], levels[i], np.eye(dim)) for i in range(len(orders) - 1)
    ]
    tower = build_tower(levels, bondings)
    return tower, FormSequence(tower, tuple(forms))


@dataclass(frozen=True)
class ShrinkRow:
    """One tower level of the shrink experiment.

    ``r_validity`` is measured at the level itself; ``bound`` is the
    distance from the base point to the nearest degeneracy (the region
    radius when there is none).
    """

    n: int
    dim: int
    r_validity: float
    bound: float
    cond_at_base: float


@dataclass(frozen=True)
class ShrinkResult:
    rows: tuple[ShrinkRow, ...]
    level1_radii: tuple[float, ...]
    fitted_exponent: float | None
    uniform_radius_ok: bool
    diagnosis: str
    assembly: AssemblyReport
    bounds: UniformBoundReport


def _projection_factor(tower: Tower, j: int) -> float:
    """Radius shrink of the composite from level j down to level 0."""
    if j == 0:
        return 1.0
    mat = tower.composite(0, j).matrix
    src, tgt = tower.levels[j], tower.levels[0]
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


def _shrink_levels(tower_spec: Mapping, n_max: int):
    """Materialize (tower, families, bounds, kind) from a spec mapping."""
    spec = dict(tower_spec)
    kind = spec.pop("kind", "counterexample")
    if kind == "counterexample":
        d = int(spec.pop("d", 4))
        a = spec.pop("a", None)
        s_eigs = spec.pop("s_eigs", None)
        region_radius = spec.pop("region_radius", None)
        if spec:
            raise ValueError("unknown tower_spec fields: %s" % sorted(spec))
        tower, fields = make_counterexample_tower(
            d, n_max, a=a, s_eigs=s_eigs, region_radius=region_radius
        )
        if a is None:
            a_norm = 1.0
        else:
            a_norm = float(np.linalg.norm(np.asarray(a, dtype=float)))
        families = [
            MoserFamily.darboux_target(f, np.zeros(f.space.dim)) for f in fields
        ]
        bounds = [a_norm / n for n in range(1, n_max + 1)]
        # One ray per factor slot, aimed straight at its degeneracy point.
        if a is None:
            unit = np.zeros(d)
            unit[0] = 1.0
        else:
            av = np.asarray(a, dtype=float)
            unit = av / np.linalg.norm(av)
        ray_sets = []
        for i, f in enumerate(fields):
            rays = []
            for k in range(i + 1):
                v = np.zeros(f.space.dim)
                v[k * d : (k + 1) * d] = unit
                rays.append(v)
            ray_sets.append(rays)
        return tower, families, bounds, ray_sets
    if kind == "product":
        factor_dim = int(spec.pop("factor_dim", 1))
        radius = float(spec.pop("radius", 1.0))
        if spec:
            raise ValueError("unknown tower_spec fields: %s" % sorted(spec))
        if radius <= 0.0:
            raise ValueError("radius must be positive")
        factors = [darboux_constant_form(factor_dim) for _ in range(n_max)]
        tower, fs = make_product_tower(factors)
        families = [
            MoserFamily.darboux_target(
                FormField.constant(form, np.zeros(form.space.dim), radius),
                np.zeros(form.space.dim),
            )
            for form in fs.forms
        ]
        bounds = [radius] * n_max
        return tower, families, bounds, [[] for _ in range(n_max)]
    raise ValueError("unknown tower kind %r" % (kind,))


def shrink_experiment(
    tower_spec: Mapping,
    n_max: int,
    cond_cap: float = COND_CAP,
    seed: int = 0,
    ray_count: int = 16,
    t_grid: int = 11,
    bound_k: float = 4.0,
    min_radius: float | None = None,
) -> ShrinkResult:
    """Measure per-level chart radii and decide whether a uniform one survives.

    For each level the validity radius around the phase origin is measured
    (slot-directed rays make the degeneracy hyperplanes unmissable), then
    projected down to the first level.  A power law is fitted to the
    projected radii; the experiment reports failure when the fitted
    exponent is at most -0.5 and the radii strictly decrease.  Operator
    norm bounds and the chart assembly report ride along.
    """
    if not isinstance(n_max, (int, np.integer)) or n_max < 1:
        raise ValueError("n_max must be a positive integer, got %r" % (n_max,))
    n_max = int(n_max)
    tower, families, bounds, ray_sets = _shrink_levels(tower_spec, n_max)

    rows = []
    projected = []
    reports = []
    for i, family in enumerate(families):
        base = family.base_point
        if family.omega_bar.is_zero:
            r = family.omega_bar.radius - family.omega_bar.distance_from_center(base)
        else:
            r = validity_radius(
                family,
                base,
                t_grid=t_grid,
                ray_count=ray_count,
                cond_cap=cond_cap,
                seed=seed + i,
                extra_rays=ray_sets[i] or None,
                axis_rays=not ray_sets[i],
            )
        kappa = weakness_conditioning(
            SkewForm(family.space, family.omega0.matrix)
        ).kappa
        rows.append(
            ShrinkRow(
                n=i + 1,
                dim=family.space.dim,
                r_validity=float(r),
                bound=float(bounds[i]),
                cond_at_base=float(kappa),
            )
        )
        projected.append(float(r) * _projection_factor(tower, i))
        reports.append(
            MoserReport(
                base_point=base,
                chart=None,
                validity_radius=float(r),
                chart_radius=projected[-1],
                pullback_residual=float("nan"),
                steps=0,
                step_size=0.0,
                fixed_point_error=float("nan"),
                lipschitz_estimate=float("nan"),
            )
        )

    fitted = None
    alive = [(i + 1, r) for i, r in enumerate(projected) if r > 0.0]
    if len(alive) >= 2:
        xs = np.log([n for n, _ in alive])
        ys = np.log([r for _, r in alive])
        fitted = float(np.polyfit(xs, ys, 1)[0])
    decreasing = all(b < a for a, b in zip(projected, projected[1:]))
    failing = fitted is not None and fitted <= -0.5 and decreasing
    if failing:
        diagnosis = (
            "chart radii projected to the first level shrink like n^%.2f; "
            "no uniform radius survives across levels" % fitted
        )
    elif fitted is None:
        diagnosis = "too few usable levels to fit a radius trend"
    else:
        diagnosis = (
            "a uniform chart radius persists across levels "
            "(fitted exponent %.2f)" % fitted
        )

    floor = min_radius
    if floor is None:
        floor = 0.5 * projected[0] if projected[0] > 0.0 else 1e-12
    assembly = assemble_projective_darboux(reports, tower, min_radius=floor)
    bounds_report = uniform_bound_check(
        families,
        [f.base_point for f in families],
        K=bound_k,
        t_grid=t_grid,
        seed=seed,
    )
    return ShrinkResult(
        rows=tuple(rows),
        level1_radii=tuple(projected),
        fitted_exponent=fitted,
        uniform_radius_ok=not failing,
        diagnosis=diagnosis,
        assembly=assembly,
        bounds=bounds_report,
    )
