"""Constant skew bilinear forms on finite-dimensional model spaces.

A model space is R^dim with a positive definite gram matrix fixing the inner
product; a skew form on it is a constant antisymmetric matrix.  The gram
matrix never enters the form pairing itself, only norms, dual norms, and the
conditioning diagnostics.

Conventions used throughout:

* covectors are represented by their coefficient vectors, paired with vectors
  by the plain dot product;
* the flat operator of a form sends ``u`` to the covector ``v -> omega(u, v)``,
  i.e. its matrix is ``omega.T``;
* subspaces carry explicit basis matrices with basis vectors in columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

# Relative cutoff for every rank decision made from singular values.
RANK_TOL = 1e-10
# Relative antisymmetry tolerance enforced by the SkewForm constructor.
SKEW_TOL = 1e-12


class DimensionMismatchError(ValueError):
    """Operands live on different model spaces or have incompatible shapes."""


class DegenerateFormError(ValueError):
    """The operation needed an invertible form and did not get one."""


def _as_matrix(a, rows: int, cols: int, what: str) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.shape != (rows, cols):
        raise DimensionMismatchError(
            "%s must have shape (%d, %d), got %r" % (what, rows, cols, m.shape)
        )
    m.flags.writeable = False
    return m


def _as_vector(a, dim: int, what: str = "vector") -> np.ndarray:
    v = np.asarray(a, dtype=float)
    if v.shape != (dim,):
        raise DimensionMismatchError(
            "%s must have shape (%d,), got %r" % (what, dim, v.shape)
        )
    return v


def orthonormal_columns(m: np.ndarray, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis for the column space of ``m``, as columns.

    Rank is decided by singular values relative to the largest one, so the
    result may have fewer columns than ``m``.
    """
    if m.shape[1] == 0:
        return m.copy()
    u, s, _ = np.linalg.svd(m, full_matrices=False)
    if s[0] == 0.0:
        return np.zeros((m.shape[0], 0))
    rank = int(np.count_nonzero(s > rank_tol * s[0]))
    return u[:, :rank]


def null_space_basis(m: np.ndarray, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Orthonormal basis (columns) of the kernel of ``m``."""
    rows, cols = m.shape
    if cols == 0:
        return np.zeros((0, 0))
    if rows == 0 or not np.any(m):
        return np.eye(cols)
    _, s, vt = np.linalg.svd(m)
    rank = int(np.count_nonzero(s > rank_tol * s[0])) if s.size else 0
    return vt[rank:].T


def matrix_rank(m: np.ndarray, rank_tol: float = RANK_TOL) -> int:
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > rank_tol * s[0]))


def column_space_contains(
    big: np.ndarray, small: np.ndarray, rank_tol: float = RANK_TOL
) -> bool:
    """Whether ``col(small)`` is contained in ``col(big)``."""
    if small.shape[1] == 0:
        return True
    q = orthonormal_columns(big, rank_tol)
    residual = small - q @ (q.T @ small)
    scale = max(1.0, float(np.linalg.norm(small)))
    return float(np.linalg.norm(residual)) <= rank_tol * scale


def column_spaces_equal(
    a: np.ndarray, b: np.ndarray, rank_tol: float = RANK_TOL
) -> bool:
    return column_space_contains(a, b, rank_tol) and column_space_contains(
        b, a, rank_tol
    )


@dataclass(frozen=True, eq=False)
class ModelSpace:
    """R^dim with a fixed positive definite gram matrix.

    ``gram=None`` means the standard inner product and enables cheaper norm
    paths.
    """

    dim: int
    gram: np.ndarray | None = None
    label: str = ""

    def __post_init__(self) -> None:
        if not isinstance(self.dim, (int, np.integer)) or self.dim < 1:
            raise ValueError("dim must be a positive integer, got %r" % (self.dim,))
        object.__setattr__(self, "dim", int(self.dim))
        if self.gram is not None:
            g = _as_matrix(self.gram, self.dim, self.dim, "gram")
            sym_defect = np.linalg.norm(g - g.T)
            if sym_defect > 1e-12 * max(1.0, np.linalg.norm(g)):
                raise ValueError("gram matrix is not symmetric")
            if np.linalg.eigvalsh(g)[0] <= 0.0:
                raise ValueError("gram matrix is not positive definite")
            object.__setattr__(self, "gram", g)

    @property
    def has_identity_gram(self) -> bool:
        return self.gram is None

    @cached_property
    def gram_matrix(self) -> np.ndarray:
        if self.gram is None:
            return np.eye(self.dim)
        return self.gram

    @cached_property
    def _gram_eig(self) -> tuple[np.ndarray, np.ndarray]:
        return np.linalg.eigh(self.gram_matrix)

    @cached_property
    def gram_inv(self) -> np.ndarray:
        if self.gram is None:
            return np.eye(self.dim)
        w, v = self._gram_eig
        return (v / w) @ v.T

    @cached_property
    def gram_inv_sqrt(self) -> np.ndarray:
        if self.gram is None:
            return np.eye(self.dim)
        w, v = self._gram_eig
        return (v / np.sqrt(w)) @ v.T

    def inner(self, u, v) -> float:
        u = _as_vector(u, self.dim)
        v = _as_vector(v, self.dim)
        if self.gram is None:
            return float(u @ v)
        return float(u @ self.gram @ v)

    def norm(self, u) -> float:
        u = _as_vector(u, self.dim)
        if self.gram is None:
            return float(np.linalg.norm(u))
        return float(np.sqrt(max(u @ self.gram @ u, 0.0)))

    def dual_norm(self, xi) -> float:
        """Operator norm of the covector ``xi`` against ``norm``."""
        xi = _as_vector(xi, self.dim, "covector")
        if self.gram is None:
            return float(np.linalg.norm(xi))
        return float(np.sqrt(max(xi @ self.gram_inv @ xi, 0.0)))

    def compatible_with(self, other: "ModelSpace") -> bool:
        if self.dim != other.dim:
            return False
        if self.gram is None and other.gram is None:
            return True
        return bool(
            np.allclose(
                self.gram_matrix, other.gram_matrix, rtol=1e-12, atol=1e-14
            )
        )


def _require_same_space(a: ModelSpace, b: ModelSpace, what: str) -> None:
    if not a.compatible_with(b):
        raise DimensionMismatchError("%s: model spaces do not match" % what)


@dataclass(frozen=True, eq=False)
class SkewForm:
    """Constant antisymmetric bilinear form on a model space."""

    space: ModelSpace
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = _as_matrix(self.matrix, self.space.dim, self.space.dim, "form matrix")
        defect = np.linalg.norm(m + m.T)
        scale = np.linalg.norm(m)
        if scale > 0.0 and defect > SKEW_TOL * scale:
            raise ValueError(
                "form matrix is not antisymmetric (relative defect %.3e)"
                % (defect / scale)
            )
        object.__setattr__(self, "matrix", m)

    def __call__(self, u, v) -> float:
        u = _as_vector(u, self.space.dim)
        v = _as_vector(v, self.space.dim)
        return float(u @ self.matrix @ v)


@dataclass(frozen=True, eq=False)
class Subspace:
    """Subspace of a model space, spanned by the columns of ``basis``.

    The basis must have full column rank; zero columns give the zero
    subspace.
    """

    ambient: ModelSpace
    basis: np.ndarray

    def __post_init__(self) -> None:
        b = np.array(self.basis, dtype=float)
        if b.ndim != 2 or b.shape[0] != self.ambient.dim:
            raise DimensionMismatchError(
                "basis must have shape (%d, k), got %r" % (self.ambient.dim, b.shape)
            )
        if b.shape[1] > 0:
            s = np.linalg.svd(b, compute_uv=False)
            if s[0] == 0.0 or s[-1] <= RANK_TOL * s[0]:
                raise ValueError("basis columns are not linearly independent")
        b.flags.writeable = False
        object.__setattr__(self, "basis", b)

    @classmethod
    def zero(cls, ambient: ModelSpace) -> "Subspace":
        return cls(ambient, np.zeros((ambient.dim, 0)))

    @classmethod
    def full(cls, ambient: ModelSpace) -> "Subspace":
        return cls(ambient, np.eye(ambient.dim))

    @classmethod
    def span(cls, ambient: ModelSpace, vectors) -> "Subspace":
        """Subspace spanned by a sequence of vectors (possibly dependent)."""
        cols = np.column_stack([_as_vector(v, ambient.dim) for v in vectors])
        return cls(ambient, orthonormal_columns(cols))

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    @cached_property
    def orthonormal(self) -> np.ndarray:
        return orthonormal_columns(self.basis)

    def contains(self, other: "Subspace", rank_tol: float = RANK_TOL) -> bool:
        _require_same_space(self.ambient, other.ambient, "contains")
        return column_space_contains(self.basis, other.basis, rank_tol)

    def equals(self, other: "Subspace", rank_tol: float = RANK_TOL) -> bool:
        return self.contains(other, rank_tol) and other.contains(self, rank_tol)


@dataclass(frozen=True, eq=False)
class LinearMap:
    """Linear map between model spaces; ``matrix`` is (target.dim, source.dim)."""

    source: ModelSpace
    target: ModelSpace
    matrix: np.ndarray

    def __post_init__(self) -> None:
        m = _as_matrix(
            self.matrix, self.target.dim, self.source.dim, "map matrix"
        )
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls, space: ModelSpace) -> "LinearMap":
        return cls(space, space, np.eye(space.dim))

    def __call__(self, u) -> np.ndarray:
        return self.matrix @ _as_vector(u, self.source.dim)

    def compose(self, inner: "LinearMap") -> "LinearMap":
        """The map ``self o inner``."""
        _require_same_space(inner.target, self.source, "compose")
        return LinearMap(inner.source, self.target, self.matrix @ inner.matrix)


@dataclass(frozen=True)
class NondegeneracyReport:
    nondegenerate: bool
    smallest_singular_value: float


@dataclass(frozen=True)
class ConditioningReport:
    kappa: float
    sigma_min: float
    sigma_max: float


@dataclass(frozen=True)
class WeakIsometryReport:
    """Outcome of :func:`check_weak_isometry`.

    ``transversality_defect`` is the largest principal cosine between the
    kernel and the symplectic orthogonal of the kernel (0.0 when they only
    meet at the origin), ``direct_sum_defect`` counts the directions missing
    from their sum.
    """

    ok: bool
    ker_dim: int
    transversality_defect: float
    pullback_residual: float
    dense_range: bool
    direct_sum_defect: int


def flat_operator(form: SkewForm) -> LinearMap:
    """Map ``u`` to the covector ``v -> form(u, v)``; matrix is ``form.matrix.T``."""
    return LinearMap(form.space, form.space, form.matrix.T.copy())


def check_weak_nondegenerate(
    form: SkewForm, tol: float = RANK_TOL
) -> NondegeneracyReport:
    """Injectivity of the flat operator, decided on the smallest singular value."""
    s = np.linalg.svd(form.matrix, compute_uv=False)
    smallest = float(s[-1])
    return NondegeneracyReport(nondegenerate=smallest > tol, smallest_singular_value=smallest)


def darboux_constant_form(l_dim: int) -> SkewForm:
    """Canonical constant form on R^(2l) = R^l x R^l.

    Pairs ``(u, eta)`` with ``(v, xi)`` as ``eta . v - xi . u``; the matrix is
    ``[[0, -I], [I, 0]]`` in block form.
    """
    if not isinstance(l_dim, (int, np.integer)) or l_dim < 1:
        raise ValueError("l_dim must be a positive integer, got %r" % (l_dim,))
    l_dim = int(l_dim)
    omega = np.zeros((2 * l_dim, 2 * l_dim))
    eye = np.eye(l_dim)
    omega[:l_dim, l_dim:] = -eye
    omega[l_dim:, :l_dim] = eye
    return SkewForm(ModelSpace(2 * l_dim, label="darboux-%d" % (2 * l_dim)), omega)


def omega_dual_norm(form: SkewForm, u) -> float:
    """Dual norm of the covector ``form(u, .)``."""
    u = _as_vector(u, form.space.dim)
    return form.space.dual_norm(form.matrix.T @ u)


def weakness_conditioning(form: SkewForm) -> ConditioningReport:
    """Singular value spread of the form after gram normalisation.

    The form matrix is conjugated by ``gram^(-1/2)`` so that the reported
    ``kappa = sigma_max / sigma_min`` measures how far the flat operator is
    from an isometry onto its image in the norms of the space.  Raises
    :class:`DegenerateFormError` when the form is singular at ``RANK_TOL``.
    """
    gis = form.space.gram_inv_sqrt
    if form.space.has_identity_gram:
        normalized = form.matrix
    else:
        normalized = gis @ form.matrix @ gis
    s = np.linalg.svd(normalized, compute_uv=False)
    if s[0] == 0.0 or s[-1] <= RANK_TOL * s[0]:
        raise DegenerateFormError("degenerate form: conditioning is undefined")
    return ConditioningReport(
        kappa=float(s[0] / s[-1]), sigma_min=float(s[-1]), sigma_max=float(s[0])
    )


def symplectic_orthogonal(
    form: SkewForm, k: Subspace, rank_tol: float = RANK_TOL
) -> Subspace:
    """All vectors pairing to zero with every element of ``k`` under ``form``."""
    _require_same_space(form.space, k.ambient, "symplectic_orthogonal")
    if k.dim == 0:
        return Subspace.full(form.space)
    rows = k.basis.T @ form.matrix
    return Subspace(form.space, null_space_basis(rows, rank_tol))


def restrict_form(form: SkewForm, k: Subspace) -> SkewForm:
    """Pull the form back to ``k`` in the coordinates of its basis.

    The restricted model space inherits the gram matrix ``B.T G B`` so norms
    of coefficient vectors agree with ambient norms of the vectors they
    represent.
    """
    _require_same_space(form.space, k.ambient, "restrict_form")
    if k.dim == 0:
        raise ValueError("cannot restrict a form to the zero subspace")
    b = k.basis
    gram = b.T @ form.space.gram_matrix @ b
    gram = 0.5 * (gram + gram.T)
    sub_matrix = b.T @ form.matrix @ b
    sub_matrix = 0.5 * (sub_matrix - sub_matrix.T)
    return SkewForm(ModelSpace(k.dim, gram), sub_matrix)


def pullback_form(map_: LinearMap, form: SkewForm) -> SkewForm:
    """The form ``(u, v) -> form(map u, map v)`` on the source space."""
    _require_same_space(map_.target, form.space, "pullback_form")
    m = map_.matrix.T @ form.matrix @ map_.matrix
    m = 0.5 * (m - m.T)
    return SkewForm(map_.source, m)


def check_weak_isometry(
    map_: LinearMap,
    form_src: SkewForm,
    form_tgt: SkewForm,
    tol: float = RANK_TOL,
    rank_tol: float = RANK_TOL,
) -> WeakIsometryReport:
    """Whether ``map_`` is a surjective form-preserving map off its kernel.

    Checks three things: the map has dense (here: full) range, the kernel
    meets its symplectic orthogonal only at the origin, and the pullback of
    the target form agrees with the source form on that symplectic
    orthogonal.  The pullback residual is the spectral norm of the mismatch
    compressed to the orthogonal.
    """
    _require_same_space(map_.source, form_src.space, "check_weak_isometry")
    _require_same_space(map_.target, form_tgt.space, "check_weak_isometry")
    src_dim = map_.source.dim

    sing = np.linalg.svd(map_.matrix, compute_uv=False)
    if sing.size == 0 or sing[0] == 0.0:
        rank = 0
    else:
        rank = int(np.count_nonzero(sing > rank_tol * sing[0]))
    dense_range = rank == map_.target.dim

    ker_basis = null_space_basis(map_.matrix, rank_tol)
    ker_dim = ker_basis.shape[1]
    ker = Subspace(map_.source, ker_basis)
    kperp = symplectic_orthogonal(form_src, ker, rank_tol)

    stacked = np.hstack([ker_basis, kperp.basis])
    stacked_rank = matrix_rank(stacked, rank_tol)
    meet_dim = ker_dim + kperp.dim - stacked_rank
    direct_sum_defect = src_dim - stacked_rank

    if meet_dim == 0 or ker_dim == 0 or kperp.dim == 0:
        transversality_defect = 0.0
    else:
        cos = np.linalg.svd(
            ker.orthonormal.T @ kperp.orthonormal, compute_uv=False
        )
        transversality_defect = float(min(cos[0], 1.0))

    q = kperp.orthonormal
    mismatch = map_.matrix.T @ form_tgt.matrix @ map_.matrix - form_src.matrix
    compressed = q.T @ mismatch @ q
    if compressed.size == 0:
        pullback_residual = 0.0
    else:
        pullback_residual = float(np.linalg.svd(compressed, compute_uv=False)[0])

    ok = dense_range and meet_dim == 0 and pullback_residual <= tol
    return WeakIsometryReport(
        ok=ok,
        ker_dim=ker_dim,
        transversality_defect=transversality_defect,
        pullback_residual=pullback_residual,
        dense_range=dense_range,
        direct_sum_defect=direct_sum_defect,
    )
