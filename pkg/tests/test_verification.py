import numpy as np
import pytest

from mimic_icl.core import numerics as nx
from mimic_icl.core.errors import VerificationError
from mimic_icl.core.numerics import Tensor
from mimic_icl.core.verification import (
    GRAD_TOLERANCE,
    SuiteResult,
    VerificationReport,
    default_op_cases,
    grad_op_suite,
    grad_variant_suite,
    identity_suite,
    model_identity_suite,
    mu_bounds_suite,
    run_verification,
    zero_shift_suite,
)


def doubled_exp(a):
    """exp whose adjoint is off by a factor of two."""
    a = nx.as_tensor(a)
    out = np.exp(a.data)
    return Tensor._from_op(out, (a,), lambda g: (2.0 * g * out,), "bad_exp")


def test_identity_suite_passes():
    result = identity_suite(np.random.default_rng(0), n=50)
    assert result.passed and result.cases == 50
    assert result.max_error <= 1e-9


def test_model_identity_suite_covers_every_query_row(model):
    result = model_identity_suite(np.random.default_rng(6), model)
    assert result.name == "model_decomposition"
    assert result.passed, result.failures
    # two layers, two heads, two query rows
    assert result.cases == 8


def test_mu_contract_suite_passes():
    assert mu_bounds_suite(np.random.default_rng(1), n=50).passed


def test_zero_shift_suite_passes():
    result = zero_shift_suite(np.random.default_rng(2))
    assert result.passed, result.failures


def test_every_default_op_passes():
    result = grad_op_suite(np.random.default_rng(3))
    assert result.passed, result.failures
    assert result.cases == len(default_op_cases(np.random.default_rng(3)))


def test_corrupted_adjoint_is_named():
    result = grad_op_suite(
        np.random.default_rng(4),
        ops={
            "exp": (lambda x: nx.tsum(nx.exp(x)), (3,)),
            "bad_exp": (lambda x: nx.tsum(doubled_exp(x)), (3,)),
        },
    )
    assert not result.passed
    assert len(result.failures) == 1
    assert result.failures[0].startswith("bad_exp")
    assert result.max_error > GRAD_TOLERANCE


@pytest.mark.slow
def test_variant_gradients_match_finite_differences():
    result = grad_variant_suite(np.random.default_rng(5), points=5)
    assert result.passed, result.failures


def test_report_raises_with_failing_suite_names():
    report = VerificationReport([
        SuiteResult("decomposition_identity", True, 0.0, 1e-9, 1),
        SuiteResult("gradient_ops", False, 1.0, 1e-4, 2, ["bad_exp (relative error 1.00e+00)"]),
    ])
    assert not report.passed
    assert report.to_dict()["passed"] is False
    with pytest.raises(VerificationError, match="bad_exp"):
        report.raise_for_failures()


def test_run_verification_flags_a_bad_op():
    report = run_verification(
        seed=0, identity_instances=10,
        ops={"bad_exp": (lambda x: nx.tsum(doubled_exp(x)), (2,))},
        include_variants=False,
    )
    names = {s.name: s.passed for s in report.suites}
    assert names["decomposition_identity"] and names["model_decomposition"]
    assert names["mu_contract"] and names["zero_shift_equivalence"]
    assert not names["gradient_ops"]
    assert not report.passed
