"""Weak symplectic towers: finite-dimensional checks, Moser charts, experiments."""

from symptower.linalg import (
    LinearMap,
    ModelSpace,
    SkewForm,
    Subspace,
    check_weak_isometry,
    check_weak_nondegenerate,
    darboux_constant_form,
    pullback_form,
    restrict_form,
    symplectic_orthogonal,
    weakness_conditioning,
)
from symptower.tower import (
    FormSequence,
    Thread,
    Tower,
    block_decompose,
    build_tower,
    check_compatible_sequence,
    check_symplectic_submersion,
    classify_tower,
    induce_level_form,
    limit_form_eval,
)
from symptower.moser import (
    FormField,
    IntegratorConfig,
    MoserFamily,
    MoserReport,
    assemble_projective_darboux,
    moser_flow,
    radial_primitive,
    uniform_bound_check,
    validity_radius,
    verify_darboux_chart,
)
from symptower.models import (
    MarsdenSpec,
    make_counterexample_tower,
    make_loop_tower,
    make_marsden_field,
    make_product_tower,
    make_quadratic_field,
    shrink_experiment,
)

__all__ = [
    "FormField",
    "FormSequence",
    "IntegratorConfig",
    "LinearMap",
    "MarsdenSpec",
    "ModelSpace",
    "MoserFamily",
    "MoserReport",
    "SkewForm",
    "Subspace",
    "Thread",
    "Tower",
    "assemble_projective_darboux",
    "block_decompose",
    "build_tower",
    "check_compatible_sequence",
    "check_symplectic_submersion",
    "check_weak_isometry",
    "check_weak_nondegenerate",
    "classify_tower",
    "darboux_constant_form",
    "induce_level_form",
    "limit_form_eval",
    "make_counterexample_tower",
    "make_loop_tower",
    "make_marsden_field",
    "make_product_tower",
    "make_quadratic_field",
    "moser_flow",
    "pullback_form",
    "radial_primitive",
    "restrict_form",
    "shrink_experiment",
    "symplectic_orthogonal",
    "uniform_bound_check",
    "validity_radius",
    "verify_darboux_chart",
    "weakness_conditioning",
]

__version__ = "0.1.0"
