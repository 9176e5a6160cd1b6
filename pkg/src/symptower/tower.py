"""Finite-depth projective towers of model spaces.

A tower is a chain ``levels[N] -> ... -> levels[1] -> levels[0]`` of model
spaces connected by bonding maps, with every composite materialized up front
so the cocycle identity holds by construction.  Threads are per-level vectors
consistent with the bondings; form sequences attach one skew form per level.

The checks in this module decide whether the bondings respect the forms
(compatibility), split the levels into canonical blocks coming from the
kernel chain, and transport forms downward through submersions.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from symptower.linalg import (
    RANK_TOL,
    DimensionMismatchError,
    LinearMap,
    ModelSpace,
    SkewForm,
    Subspace,
    WeakIsometryReport,
    check_weak_isometry,
    check_weak_nondegenerate,
    matrix_rank,
    null_space_basis,
    orthonormal_columns,
    restrict_form,
    symplectic_orthogonal,
)

# Consistency tolerance for thread components, relative to component size.
THREAD_TOL = 1e-10
# Default stabilization tolerance for per-level value sequences.
STAB_TOL = 1e-8
# Desk-scale caps; build_tower accepts overrides.
MAX_DEPTH = 32
MAX_DIM = 512


class PreconditionError(ValueError):
    """A documented precondition of the operation does not hold."""


@dataclass(frozen=True, eq=False)
class Tower:
    """Chain of model spaces with bondings[i]: levels[i+1] -> levels[i]."""

    levels: tuple[ModelSpace, ...]
    bondings: tuple[LinearMap, ...]

    def __post_init__(self) -> None:
        levels = tuple(self.levels)
        bondings = tuple(self.bondings)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "bondings", bondings)
        if not levels:
            raise ValueError("a tower needs at least one level")
        if len(bondings) != len(levels) - 1:
            raise ValueError(
                "expected %d bondings for %d levels, got %d"
                % (len(levels) - 1, len(levels), len(bondings))
            )
        for i, bonding in enumerate(bondings):
            if not bonding.source.compatible_with(levels[i + 1]):
                raise DimensionMismatchError(
                    "bonding %d: source does not match level %d" % (i, i + 1)
                )
            if not bonding.target.compatible_with(levels[i]):
                raise DimensionMismatchError(
                    "bonding %d: target does not match level %d" % (i, i)
                )

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    @cached_property
    def _composite_matrices(self) -> dict[tuple[int, int], np.ndarray]:
        out: dict[tuple[int, int], np.ndarray] = {}
        for i, space in enumerate(self.levels):
            out[(i, i)] = np.eye(space.dim)
        for j in range(1, len(self.levels)):
            for i in range(j - 1, -1, -1):
                out[(i, j)] = out[(i, j - 1)] @ self.bondings[j - 1].matrix
        return out

    def composite(self, i: int, j: int) -> LinearMap:
        """The map levels[j] -> levels[i] obtained by chaining bondings."""
        if not 0 <= i <= j <= self.depth:
            raise ValueError("need 0 <= i <= j <= depth, got (%d, %d)" % (i, j))
        return LinearMap(self.levels[j], self.levels[i], self._composite_matrices[(i, j)])


def build_tower(
    levels,
    consecutive_bondings,
    max_depth: int = MAX_DEPTH,
    max_dim: int = MAX_DIM,
) -> Tower:
    """Validate shapes and caps, then assemble the tower.

    Errors name the offending level or bonding index.
    """
    levels = tuple(levels)
    bondings = tuple(consecutive_bondings)
    if len(levels) - 1 > max_depth:
        raise ValueError("tower depth %d exceeds cap %d" % (len(levels) - 1, max_depth))
    for i, space in enumerate(levels):
        if space.dim > max_dim:
            raise ValueError("level %d: dimension %d exceeds cap %d" % (i, space.dim, max_dim))
    tower = Tower(levels, bondings)
    tower._composite_matrices  # materialize composites eagerly
    return tower


@dataclass(frozen=True, eq=False)
class Thread:
    """Per-level components consistent with the bondings.

    Component ``i`` must agree with the bonding image of component ``i+1``
    to within THREAD_TOL relative to the component sizes.
    """

    tower: Tower
    components: tuple[np.ndarray, ...]

    def __post_init__(self) -> None:
        comps = []
        if len(self.components) != self.tower.depth + 1:
            raise ValueError(
                "thread needs %d components, got %d"
                % (self.tower.depth + 1, len(self.components))
            )
        for i, (c, space) in enumerate(zip(self.components, self.tower.levels)):
            v = np.array(c, dtype=float)
            if v.shape != (space.dim,):
                raise DimensionMismatchError(
                    "component %d must have shape (%d,), got %r" % (i, space.dim, v.shape)
                )
            v.flags.writeable = False
            comps.append(v)
        for i in range(self.tower.depth):
            pushed = self.tower.bondings[i].matrix @ comps[i + 1]
            scale = max(1.0, float(np.linalg.norm(comps[i])), float(np.linalg.norm(comps[i + 1])))
            if float(np.linalg.norm(comps[i] - pushed)) > THREAD_TOL * scale:
                raise ValueError("thread breaks at bonding %d" % i)
        object.__setattr__(self, "components", tuple(comps))

    @classmethod
    def from_top(cls, tower: Tower, x_top) -> "Thread":
        """Thread obtained by pushing a top-level vector down the bondings."""
        top = np.asarray(x_top, dtype=float)
        comps = [tower.composite(i, tower.depth).matrix @ top for i in range(tower.depth)]
        comps.append(top)
        return cls(tower, tuple(comps))

    def component(self, i: int) -> np.ndarray:
        return self.components[i]


@dataclass(frozen=True, eq=False)
class FormSequence:
    """A tower together with one skew form per level."""

    tower: Tower
    forms: tuple[SkewForm, ...]

    def __post_init__(self) -> None:
        forms = tuple(self.forms)
        object.__setattr__(self, "forms", forms)
        if len(forms) != self.tower.depth + 1:
            raise ValueError(
                "form sequence needs %d forms, got %d" % (self.tower.depth + 1, len(forms))
            )
        for i, (form, space) in enumerate(zip(forms, self.tower.levels)):
            if not form.space.compatible_with(space):
                raise DimensionMismatchError("form %d does not live on level %d" % (i, i))


@dataclass(frozen=True)
class TowerClassification:
    reduced: bool
    surjective: bool
    split_kernels: bool


@dataclass(frozen=True)
class CompatibilityReport:
    """Per-bonding weak-isometry results plus the composite cross-check.

    ``per_level[i]`` covers the bonding levels[i+1] -> levels[i].  A
    composite failing while all consecutive bondings pass points at
    tolerance trouble, so such pairs are listed separately.
    """

    ok: bool
    per_level: tuple[WeakIsometryReport, ...]
    failed_composites: tuple[tuple[int, int], ...]


@dataclass(frozen=True)
class LimitFormReport:
    values: tuple[float, ...]
    stabilized: bool
    final: float


@dataclass(frozen=True, eq=False)
class BlockDecomposition:
    """Splitting of a level into the kernel-chain blocks above a base level.

    ``blocks[h]`` for h < level - base is the lift of the base-side block,
    the last entry is the kernel of the topmost bonding; blocks may have
    dimension zero when bondings are injective.
    """

    base: int
    level: int
    blocks: tuple[Subspace, ...]
    condition_number: float


def classify_tower(tower: Tower, rank_tol: float = RANK_TOL) -> TowerClassification:
    """Surjectivity of every consecutive bonding, reported three ways.

    At finite dimension dense range and surjectivity coincide, so
    ``reduced`` and ``surjective`` carry the same value; ``split_kernels``
    is always true here because every finite-dimensional kernel splits.
    """
    onto = all(
        matrix_rank(b.matrix, rank_tol) == b.target.dim for b in tower.bondings
    )
    return TowerClassification(reduced=onto, surjective=onto, split_kernels=True)


def check_compatible_sequence(fs: FormSequence, tol: float = RANK_TOL) -> CompatibilityReport:
    """Weak-isometry check of every consecutive bonding against its forms.

    Overall ok iff every consecutive bonding passes.  All longer composites
    are re-checked as well; failures land in ``failed_composites``.
    """
    tower = fs.tower
    per_level = tuple(
        check_weak_isometry(tower.bondings[i], fs.forms[i + 1], fs.forms[i], tol)
        for i in range(tower.depth)
    )
    failed = []
    for j in range(2, tower.depth + 1):
        for i in range(j - 1):
            rep = check_weak_isometry(tower.composite(i, j), fs.forms[j], fs.forms[i], tol)
            if not rep.ok:
                failed.append((i, j))
    ok = all(r.ok for r in per_level) and not failed
    return CompatibilityReport(ok=ok, per_level=per_level, failed_composites=tuple(failed))


def limit_form_eval(
    fs: FormSequence,
    u: Thread,
    v: Thread,
    stab_tol: float = STAB_TOL,
    stab_index: int | None = None,
    compat: CompatibilityReport | None = None,
) -> LimitFormReport:
    """Per-level values omega_i(u_i, v_i) with a stabilization verdict.

    The top-level value stands in for the limit.  ``stab_index`` defaults to
    half the depth; stabilization means every value from that index on is
    within ``stab_tol`` of the top one.
    """
    if compat is None:
        compat = check_compatible_sequence(fs)
    if not compat.ok:
        raise PreconditionError("precondition failed: form sequence is not compatible")
    depth = fs.tower.depth
    values = tuple(
        float(fs.forms[i](u.components[i], v.components[i])) for i in range(depth + 1)
    )
    if stab_index is None:
        stab_index = depth // 2
    if not 0 <= stab_index <= depth:
        raise ValueError("stab_index out of range")
    final = values[depth]
    stabilized = all(abs(val - final) <= stab_tol for val in values[stab_index:])
    return LimitFormReport(values=values, stabilized=stabilized, final=final)


def _split_level(
    form: SkewForm, bonding_matrix: np.ndarray, level: int, rank_tol: float
) -> tuple[np.ndarray, np.ndarray]:
    """Kernel of the bonding and its symplectic orthogonal, verified to split."""
    dim = form.space.dim
    ker_basis = null_space_basis(bonding_matrix, rank_tol)
    kperp = symplectic_orthogonal(form, Subspace(form.space, ker_basis), rank_tol)
    stacked = np.hstack([ker_basis, kperp.basis])
    rank = matrix_rank(stacked, rank_tol)
    if rank != dim or ker_basis.shape[1] + kperp.dim != rank:
        raise ValueError(
            "level %d: kernel and its symplectic orthogonal do not split the level" % level
        )
    return ker_basis, kperp.basis


def block_decompose(
    fs: FormSequence,
    base_i: int,
    level_j: int,
    rank_tol: float = RANK_TOL,
    compat: CompatibilityReport | None = None,
) -> BlockDecomposition:
    """Canonical blocks of levels[level_j] over the base level.

    Each bonding's kernel gets a symplectic complement; the complement is
    carried up the tower by inverting the bonding on it, so the blocks of
    the base level reappear inside every higher level, followed by one
    kernel block per bonding (possibly zero-dimensional).
    """
    tower = fs.tower
    if not 0 <= base_i <= level_j <= tower.depth:
        raise ValueError("need 0 <= base_i <= level_j <= depth")
    if compat is None:
        compat = check_compatible_sequence(fs)
    if not compat.ok:
        raise PreconditionError("precondition failed: form sequence is not compatible")

    def decompose(level: int) -> list[np.ndarray]:
        if level == base_i:
            return [np.eye(tower.levels[level].dim)]
        bonding = tower.bondings[level - 1].matrix
        ker_basis, kperp_basis = _split_level(fs.forms[level], bonding, level, rank_tol)
        lprime = bonding @ kperp_basis
        below_dim = tower.levels[level - 1].dim
        if kperp_basis.shape[1] != below_dim or matrix_rank(lprime, rank_tol) != below_dim:
            raise ValueError(
                "level %d: bonding is not invertible on the symplectic complement" % level
            )
        lifted = [
            orthonormal_columns(kperp_basis @ np.linalg.solve(lprime, block), rank_tol)
            for block in decompose(level - 1)
        ]
        lifted.append(ker_basis)
        return lifted

    bases = decompose(level_j)
    dim = tower.levels[level_j].dim
    stacked = np.hstack(bases)
    if stacked.shape[1] != dim or matrix_rank(stacked, rank_tol) != dim:
        raise ValueError("level %d: blocks do not span the level" % level_j)
    s = np.linalg.svd(stacked, compute_uv=False)
    return BlockDecomposition(
        base=base_i,
        level=level_j,
        blocks=tuple(Subspace(tower.levels[level_j], b) for b in bases),
        condition_number=float(s[0] / s[-1]),
    )


@dataclass(frozen=True)
class SubmersionReport:
    """``ok``: source splits as kernel plus symplectic orthogonal.

    ``split_ok``: the map restricted to that orthogonal is invertible onto
    the target (gives the right inverse used to induce forms);
    ``vertical_nondegenerate``: the form restricted to the kernel is
    nondegenerate (vacuously true for trivial kernels).
    """

    ok: bool
    vertical_nondegenerate: bool
    split_ok: bool


def _submersion_pieces(
    form_top: SkewForm, map_: LinearMap, rank_tol: float
) -> tuple[np.ndarray, np.ndarray, SubmersionReport]:
    if not map_.source.compatible_with(form_top.space):
        raise DimensionMismatchError("form must live on the source of the map")
    if matrix_rank(map_.matrix, rank_tol) != map_.target.dim:
        raise PreconditionError("not a submersion: map is not surjective")
    dim = map_.source.dim
    ker_basis = null_space_basis(map_.matrix, rank_tol)
    kperp = symplectic_orthogonal(
        form_top, Subspace(map_.source, ker_basis), rank_tol
    )
    stacked_rank = matrix_rank(np.hstack([ker_basis, kperp.basis]), rank_tol)
    ok = stacked_rank == dim and ker_basis.shape[1] + kperp.dim == dim

    if ker_basis.shape[1] == 0:
        vertical = True
    else:
        restricted = restrict_form(form_top, Subspace(map_.source, ker_basis))
        vertical = check_weak_nondegenerate(restricted, rank_tol).nondegenerate

    lprime = map_.matrix @ kperp.basis
    split_ok = (
        kperp.dim == map_.target.dim
        and matrix_rank(lprime, rank_tol) == map_.target.dim
    )
    report = SubmersionReport(ok=ok, vertical_nondegenerate=vertical, split_ok=split_ok)
    return ker_basis, kperp.basis, report


def check_symplectic_submersion(
    form_top: SkewForm, map_: LinearMap, tol: float = RANK_TOL
) -> SubmersionReport:
    """Whether the map's kernel and its symplectic orthogonal split the source."""
    _, _, report = _submersion_pieces(form_top, map_, tol)
    return report


def induce_level_form(
    form_top: SkewForm, map_: LinearMap, tol: float = RANK_TOL
) -> SkewForm:
    """Push the form through a submersion via the right inverse on ker-perp.

    The result omega_i satisfies omega_i(map u, map v) = form_top(u, v) for
    u, v in the symplectic orthogonal of the kernel.
    """
    _, kperp_basis, report = _submersion_pieces(form_top, map_, tol)
    if not (report.ok and report.split_ok):
        raise PreconditionError("cannot induce a form: submersion check failed")
    lprime = map_.matrix @ kperp_basis
    right_inverse = kperp_basis @ np.linalg.solve(lprime, np.eye(map_.target.dim))
    matrix = right_inverse.T @ form_top.matrix @ right_inverse
    matrix = 0.5 * (matrix - matrix.T)
    return SkewForm(map_.target, matrix)
