import numpy as np
import pytest

from loadcouple.exceptions import ScenarioValidationError
from loadcouple.schemas import (
    DemandAllocation,
    DemandCap,
    Mode,
    NetworkName,
    Topology,
    User,
    UtilityWeights,
)
from loadcouple.topology import (
    coupling_template,
    get_network,
    networks_of,
    require_valid,
    restrict_users,
    validate_topology,
)

from .conftest import make_topology


def test_valid_topology_has_no_issues(two_cell_topology):
    caps = DemandCap.uniform(two_cell_topology, 0.1)
    assert validate_topology(two_cell_topology, caps) == []


def test_empty_cell_is_reported():
    topology = Topology(
        regular_cells=["bs0", "bs1"],
        complementary_cells=["ap0"],
        users=[User(regular_cell=0, complementary_cell=0)],
        regular_powers=[1.0, 1.0],
        complementary_powers=[1.0],
        noise=1.0,
        gains=[[1.0], [0.5], [1.0]],
    )
    issues = validate_topology(topology, DemandCap(caps=[0.1]))
    assert any(issue.message == "empty cell" and "bs1" in issue.entity for issue in issues)


def test_zero_gain_is_reported():
    topology = make_topology([[1.0, 0.0], [0.5, 1.0], [1.0, 1.0]], regular=[0, 1], complementary=[0, 0])
    issues = validate_topology(topology, DemandCap(caps=[0.1, 0.1]))
    assert [issue.entity for issue in issues] == ["gain[0][1]"]
    assert "non-positive gain" in issues[0].message


def test_negative_power_and_cap_are_reported(two_cell_topology):
    topology = two_cell_topology.model_copy(update={"regular_powers": [1.0, -2.0]})
    issues = validate_topology(topology, DemandCap(caps=[0.1, -1.0]))
    fields = {issue.field for issue in issues}
    assert fields == {"regular_powers", "caps"}


def test_unknown_cell_index_is_reported(two_cell_topology):
    users = list(two_cell_topology.users)
    users[1] = users[1].model_copy(update={"complementary_cell": 3})
    topology = two_cell_topology.model_copy(update={"users": users})
    issues = validate_topology(topology, DemandCap(caps=[0.1, 0.1]))
    assert any(issue.field == "complementary_cell" for issue in issues)


def test_require_valid_raises_with_issues():
    topology = make_topology([[1.0, 0.0], [0.5, 1.0], [1.0, 1.0]], regular=[0, 1], complementary=[0, 0])
    with pytest.raises(ScenarioValidationError) as exc:
        require_valid(topology, DemandCap(caps=[0.1, 0.1]))
    assert len(exc.value.issues) == 1
    assert exc.value.exit_code == 2


def test_shape_mismatch_is_rejected_on_construction():
    with pytest.raises(ValueError):
        make_topology([[1.0, 1.0]] * 3, regular=[0, 0], complementary=[0, 0])


def test_wifi_mode_splits_networks(two_cell_topology):
    regular, complementary = networks_of(two_cell_topology)
    assert regular.name is NetworkName.REGULAR
    assert complementary.name is NetworkName.COMPLEMENTARY
    assert (regular.n_cells, complementary.n_cells) == (2, 1)
    assert complementary.offset == 2
    np.testing.assert_array_equal(regular.serving, [0, 1])


def test_small_cell_mode_merges_networks():
    topology = make_topology(
        [[1.0, 0.25], [0.5, 1.0], [1.0, 1.0]],
        regular=[0, 1],
        complementary=[0, 0],
        mode=Mode.SMALL_CELL,
    )
    (merged,) = networks_of(topology)
    assert merged.name is NetworkName.MERGED
    assert merged.n_cells == 3
    assert merged.n_links == 4
    np.testing.assert_array_equal(merged.serving, [0, 1, 2, 2])
    np.testing.assert_array_equal(merged.users, [0, 1, 0, 1])
    with pytest.raises(KeyError):
        get_network(topology, "regular")


def test_template_matches_hand_evaluation(two_cell_topology):
    template = get_network(two_cell_topology, "regular").template
    np.testing.assert_allclose(template, [[0.0, 0.5], [0.25, 0.0]])


def test_template_sums_over_cell_members():
    gains = np.array([[1.0, 2.0], [0.5, 0.5]])
    template = coupling_template(gains, np.array([0, 0]), 2)
    assert template[0, 1] == pytest.approx(0.5 + 0.25)
    assert template[1, 0] == 0.0


def test_networks_are_cached_and_read_only(two_cell_topology):
    first = networks_of(two_cell_topology)
    assert networks_of(two_cell_topology) is first
    with pytest.raises(ValueError):
        first[0].template[0, 1] = 1.0


def test_topology_equality_ignores_cached_arrays(two_cell_topology):
    copy = two_cell_topology.model_copy()
    networks_of(two_cell_topology)
    assert copy == two_cell_topology


def test_restrict_users_keeps_selected_columns():
    topology = make_topology(
        [[1.0, 0.9, 0.2], [0.3, 0.4, 1.0], [1.0, 1.0, 1.0]],
        regular=[0, 0, 1],
        complementary=[0, 0, 0],
    )
    reduced = restrict_users(topology, np.array([True, False, True]))
    assert reduced.n_users == 2
    np.testing.assert_array_equal(reduced.gain_matrix[:, 1], [0.2, 1.0, 1.0])
    assert reduced.regular_index.tolist() == [0, 1]


def test_aggregated_weights_and_user_totals(two_cell_topology):
    weights = UtilityWeights(regular=[1.0, 2.0], complementary=[0.5, 0.25])
    k, k_comp = weights.aggregate(two_cell_topology)
    np.testing.assert_allclose(k, [1.0, 2.0])
    np.testing.assert_allclose(k_comp, [0.75])

    demands = DemandAllocation(regular=[0.2, 0.4], complementary=[0.1])
    np.testing.assert_allclose(demands.user_totals(two_cell_topology), [0.3, 0.5])
    violations = demands.cap_violations(two_cell_topology, DemandCap(caps=[0.3, 0.45]))
    assert [v.entity for v in violations] == ["user[1]"]


def test_negative_demands_are_rejected():
    with pytest.raises(ValueError):
        DemandAllocation(regular=[-0.1], complementary=[0.1])
