import math

import numpy as np
import pytest

from loadcouple.exceptions import UtilityDomainError, ValidationError
from loadcouple.schemas import DemandAllocation, UtilityKind, UtilityWeights
from loadcouple.utility import (
    Admissibility,
    admissibility_check,
    get_registered_utilities,
    get_utility,
    register_utility,
    sum_utility,
    utility_inverse,
    utility_value,
)


@register_utility(name="Reciprocal", title="Negative reciprocal")
def reciprocal(d):
    """U(d) = -1/d"""
    return -1.0 / d


@register_utility(title="Square root")
def square_root(d):
    return np.sqrt(d)


def test_builtin_utilities_are_registered():
    registry = get_registered_utilities()
    for kind in UtilityKind:
        assert kind.value in registry
    assert get_utility(UtilityKind.DLOG) is registry["dlog"]
    assert get_utility("LOG").name == "log"


def test_unknown_utility_is_rejected():
    with pytest.raises(ValidationError):
        get_utility("cubic")


@pytest.mark.parametrize(
    "kind, d, expected",
    [
        ("lin", 0.0, 0.0),
        ("lin", 2.5, 2.5),
        ("log", math.e, 1.0),
        ("dlog", math.e - 1.0, 0.0),
    ],
)
def test_values_and_inverses(kind, d, expected):
    assert utility_value(kind, d) == pytest.approx(expected, abs=1e-15)
    if d > 0:
        assert utility_inverse(kind, expected) == pytest.approx(d, rel=1e-14)


def test_vector_evaluation_keeps_shape():
    values = utility_value("log", np.array([1.0, math.e]))
    assert isinstance(values, np.ndarray)
    np.testing.assert_allclose(values, [0.0, 1.0])


@pytest.mark.parametrize("kind, low", [("log", -5.0), ("dlog", -5.0), ("lin", 1e-6)])
def test_inverse_round_trip(rng, kind, low):
    y = rng.uniform(low, 2.0, 1000)
    np.testing.assert_allclose(utility_value(kind, utility_inverse(kind, y)), y, rtol=0, atol=1e-12)


@pytest.mark.parametrize("kind", ["lin", "log", "dlog"])
def test_utilities_and_inverses_are_increasing(kind):
    d = np.linspace(1e-3, 10.0, 1000)
    assert np.all(np.diff(utility_value(kind, d)) > 0)
    y = np.linspace(0.01 if kind == "lin" else -5.0, 2.0, 1000)
    assert np.all(np.diff(utility_inverse(kind, y)) > 0)


def test_dlog_inverse_is_log_convex():
    y = np.linspace(-3.0, 1.5, 451)
    log_g = np.log(utility_inverse("dlog", y))
    assert np.all(np.diff(log_g, 2) > 0)


def test_domain_errors():
    with pytest.raises(UtilityDomainError):
        utility_value("log", 0.0)
    with pytest.raises(UtilityDomainError):
        utility_value("dlog", np.array([0.1, -1.0]))
    with pytest.raises(UtilityDomainError):
        utility_value("lin", -0.1)
    with pytest.raises(UtilityDomainError):
        utility_inverse("lin", 0.0)
    with pytest.raises(ValueError):
        utility_value("log", float("nan"))


def test_dlog_inverse_derivatives_match_numeric_fallback():
    dlog = get_utility("dlog")
    y = np.array([-2.0, 0.0, 0.5])
    g, g1, g2 = dlog.inverse_derivatives(y)
    np.testing.assert_allclose(g, np.expm1(np.exp(y)))
    np.testing.assert_allclose(g1, 1.0 / dlog.first(g), rtol=1e-12)
    np.testing.assert_allclose(g2, -dlog.second(g) * g1**3, rtol=1e-10)
    assert g1[1] == pytest.approx(math.e)


def test_custom_utility_uses_numeric_fallbacks():
    utility = get_utility("reciprocal")
    assert utility.title == "Negative reciprocal"
    assert utility.description == "U(d) = -1/d"
    assert utility.first(2.0) == pytest.approx(0.25, rel=1e-8)
    assert utility.second(2.0) == pytest.approx(-0.25, rel=1e-4)
    assert utility.invert(-0.5) == pytest.approx(2.0, rel=1e-12)
    g, g1, _ = utility.inverse_derivatives(np.array([-0.5]))
    assert g1[0] == pytest.approx(4.0, rel=1e-6)


def test_registration_uses_function_name():
    assert get_utility("square_root").title == "Square root"
    assert square_root(4.0) == 2.0


def test_duplicate_registration_is_rejected():
    with pytest.raises(ValueError):
        register_utility(name="log")(np.log)


def test_sum_utility_aggregates_weights(two_cell_topology):
    weights = UtilityWeights(regular=[1.0, 2.0], complementary=[0.5, 0.25])
    demands = DemandAllocation(regular=[math.e, math.e], complementary=[1.0])
    assert sum_utility(two_cell_topology, weights, demands, "log") == pytest.approx(3.0)
    assert sum_utility(two_cell_topology, weights, demands, "lin") == pytest.approx(
        math.e + 2.0 * math.e + 0.75
    )


def test_log_sits_on_the_admissibility_boundary():
    report = admissibility_check("log")
    assert report.verdict is Admissibility.NOT_ADMISSIBLE
    assert report.on_boundary
    assert report.inverse_log_convex is False
    assert report.grid_points == 200


def test_dlog_is_strictly_admissible():
    report = admissibility_check(UtilityKind.DLOG)
    assert report.verdict is Admissibility.STRICTLY_ADMISSIBLE
    assert report.inverse_log_convex is True
    assert report.max_criterion < 0


def test_lin_is_not_admissible():
    report = admissibility_check("lin")
    assert report.verdict is Admissibility.NOT_ADMISSIBLE
    assert not report.on_boundary
    assert report.max_criterion == pytest.approx(1.0)


def test_custom_utilities_are_checked_numerically():
    assert admissibility_check("reciprocal").verdict is Admissibility.STRICTLY_ADMISSIBLE
    assert admissibility_check("square_root").verdict is Admissibility.NOT_ADMISSIBLE


def test_admissibility_on_custom_grid():
    report = admissibility_check("dlog", grid=np.array([5.0, 0.5, 1.0]))
    assert report.grid_points == 3
    assert report.verdict is Admissibility.STRICTLY_ADMISSIBLE


def test_admissibility_outside_domain_is_inconclusive():
    report = admissibility_check("log", grid=np.array([-1.0, 1.0]))
    assert report.verdict is Admissibility.INCONCLUSIVE
    assert report.max_criterion is None
