import itertools

import numpy as np
import pytest

from GridNetwork import (Action, GridSpec, OccupancyMap, Trajectory, UNREACHABLE, actions_of, build_network,
                         cell_center, discretize, format_occupancy_map, load_occupancy_map, move_op,
                         parse_occupancy_text, random_walk, replay, shortest_distance, trajectory_from_raw,
                         write_occupancy_map)
from TrepPlatform import ConfigError, ContractError, DataError, RangeError
from conftest import WALLED_MAP, WALLED_WALLS, network_from_text, open_grid


def test_discretize_examples():
    spec = GridSpec((0.0, 0.0), 3.0, 10, 10)
    assert discretize((7.5, 1.0), spec) == (0, 2)
    assert discretize((0.0, 0.0), spec) == (0, 0)
    # a point on a shared edge belongs to the lower cell
    assert discretize((3.0, 6.0), spec) == (1, 0)
    assert discretize((30.0, 30.0), spec) == (9, 9)


def test_discretize_outside_extent():
    spec = GridSpec((0.0, 0.0), 3.0, 2, 2)
    with pytest.raises(RangeError):
        discretize((6.1, 1.0), spec)
    with pytest.raises(RangeError):
        discretize((-0.1, 1.0), spec)


def test_cell_center_lies_in_its_cell():
    spec = GridSpec((10.0, -5.0), 2.0, 4, 3)
    for cell in itertools.product(range(3), range(4)):
        assert discretize(cell_center(cell, spec), spec) == cell


def test_move_op_edges():
    spec = GridSpec(cell_size=1.0, width=3, height=3)
    assert move_op((0, 0), Action.N, spec) is None
    assert move_op((0, 0), Action.SE, spec) == (1, 1)
    assert move_op((1, 1), Action.STAY, spec) == (1, 1)
    with pytest.raises(ContractError):
        move_op((5, 5), Action.N, spec)


def test_walled_map_reachable_cells(walled_net):
    v0, v1, v2, v4 = (0, 0), (1, 0), (2, 0), (0, 1)
    assert walled_net.rcells(v1) == {v0, v1, v2, v4}
    mask = walled_net.mask(v1)
    assert mask[Action.E] == 0
    assert mask[Action.STAY] == 1
    assert mask.sum() == 4


def test_wall_severs_both_directions(walled_net):
    assert not walled_net.has_edge((1, 0), (1, 1))
    assert not walled_net.has_edge((1, 1), (1, 0))


def test_walled_map_path_actions(walled_net):
    traj = Trajectory(((2, 0), (2, 0), (1, 0), (0, 0), (0, 1), (0, 2)))
    assert actions_of(traj, walled_net) == (Action.STAY, Action.N, Action.N, Action.E, Action.E)
    walled_net.validate(traj)


def test_no_corner_cutting():
    net = network_from_text("..\n#.\n")
    # (0,0) -> (1,1) would cut past the blocked (1,0)
    assert not net.has_edge((0, 0), (1, 1))
    assert net.has_edge((0, 0), (0, 1))


def test_stay_always_legal():
    net = network_from_text("#.#\n###\n")
    assert net.legal_actions((0, 1)) == [Action.STAY]


def _oracle_adjacency(blocked, walls, height, width):
    free = [(r, c) for r in range(height) for c in range(width) if (r, c) not in blocked]
    index = {cell: i for i, cell in enumerate(free)}
    severed = {frozenset(w) for w in walls}
    n = len(free)
    adj = np.zeros((n, n), dtype=bool)
    for (r, c) in free:
        for dr in (-1, 0, 1):
            for dc in (-1, 0, 1):
                t = (r + dr, c + dc)
                if t not in index:
                    continue
                if t != (r, c) and frozenset(((r, c), t)) in severed:
                    continue
                if dr and dc and ((r + dr, c) not in index or (r, c + dc) not in index):
                    continue
                adj[index[(r, c)], index[t]] = True
    return free, adj


def _floyd_warshall(adj):
    n = len(adj)
    dist = np.where(adj, 1.0, np.inf)
    np.fill_diagonal(dist, 0.0)
    for k in range(n):
        dist = np.minimum(dist, dist[:, [k]] + dist[[k], :])
    return dist


def test_distances_and_masks_match_oracle_on_random_maps():
    rng = np.random.default_rng(7)
    for _ in range(100):
        height, width = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        blocked = {(r, c) for r in range(height) for c in range(width) if rng.random() < 0.25}
        if len(blocked) == height * width:
            blocked.pop()
        free_cells = [(r, c) for r in range(height) for c in range(width) if (r, c) not in blocked]
        walls = set()
        for cell in free_cells:
            if rng.random() < 0.1 and cell[1] + 1 < width:
                walls.add((cell, (cell[0], cell[1] + 1)))
        occupancy = OccupancyMap(frozenset(blocked), frozenset(walls))
        net = build_network(occupancy, GridSpec((0.0, 0.0), 1.0, width, height))

        free, adj = _oracle_adjacency(blocked, walls, height, width)
        assert list(net.cells) == free
        for i, cell in enumerate(free):
            assert net.rcells(cell) == {free[j] for j in np.flatnonzero(adj[i])}
        np.testing.assert_array_equal(np.asarray(net.distances), _floyd_warshall(adj))


def test_shortest_distance_unreachable():
    net = network_from_text(".#.\n.#.\n")
    assert shortest_distance(net, (0, 0), (0, 2)) == UNREACHABLE
    assert shortest_distance(net, (0, 0), (1, 0)) == 1
    with pytest.raises(DataError):
        net.shortest_path((0, 0), (0, 2))


def test_distance_rows_are_computed_per_source_on_demand():
    net = open_grid(3, 4)
    table = net.distances
    assert table.shape == (12, 12)
    assert table[0, 11] == 3
    assert set(table._rows) == {0}
    sources, targets = net.vertices([(0, 0), (2, 3), (0, 0)]), net.vertices([(0, 1), (2, 0)])
    block = table[np.ix_(sources, targets)]
    np.testing.assert_array_equal(block, [[1, 2], [2, 3], [1, 2]])
    assert set(table._rows) == {0, 11}
    with pytest.raises(ContractError):
        table.row(12)


def test_empty_network_is_a_config_error():
    with pytest.raises(ConfigError):
        network_from_text("##\n##\n")


def test_parse_errors_name_the_line():
    with pytest.raises(DataError, match="row 2"):
        parse_occupancy_text("...\n..\n")
    with pytest.raises(DataError, match="walls line 1"):
        parse_occupancy_text("..\n", "0,0 0,1\n")


def test_wall_outside_grid_rejected():
    occupancy, height, width = parse_occupancy_text("..\n", "0,0-4,4\n")
    with pytest.raises(ConfigError):
        build_network(occupancy, GridSpec(cell_size=1.0, width=width, height=height))


def test_map_files_normalize(tmp_path):
    (tmp_path / "in.txt").write_text("..#\n...\n")
    (tmp_path / "in_walls.txt").write_text("\n0,0-0,1\n")
    occupancy, height, width = load_occupancy_map(str(tmp_path / "in.txt"), str(tmp_path / "in_walls.txt"))
    write_occupancy_map(occupancy, height, width, str(tmp_path / "map.txt"), str(tmp_path / "walls.txt"))
    assert (tmp_path / "map.txt").read_text() == "..#\n...\n"
    assert (tmp_path / "walls.txt").read_text() == "0,0-0,1\n"
    assert format_occupancy_map(occupancy, height, width) == ("..#\n...\n", "0,0-0,1\n")


def test_map_hash_depends_on_walls():
    assert network_from_text(WALLED_MAP, WALLED_WALLS).hash != network_from_text(WALLED_MAP).hash
    assert network_from_text(WALLED_MAP, WALLED_WALLS).hash == network_from_text(WALLED_MAP, WALLED_WALLS).hash


def test_sub_trajectory_bounds():
    traj = Trajectory(((0, 0), (0, 1), (0, 2)))
    assert traj.sub(2, 3).cells == ((0, 1), (0, 2))
    assert traj.sub(1, 1).cells == ((0, 0),)
    with pytest.raises(ContractError):
        traj.sub(0, 2)
    with pytest.raises(ContractError):
        traj.sub(2, 4)


def test_actions_replay_back_to_cells():
    net = open_grid(6, 6)
    traj = random_walk(net, (2, 2), 20, 3)
    assert replay(traj.cells[0], actions_of(traj), net.spec) == traj.cells
    assert net.is_valid(traj)


def test_actions_of_rejects_jumps():
    with pytest.raises(ContractError):
        actions_of(Trajectory(((0, 0), (0, 2))))


def test_trajectory_from_raw_repeats_and_bridges():
    net = open_grid(1, 6)
    samples = [(0.0, (1.0, 1.0)), (2.0, (1.5, 1.0)), (4.0, (10.0, 1.0))]
    traj = trajectory_from_raw(samples, net)
    # (0,3) is three cells from (0,0): the gap is bridged through (0,1), (0,2)
    assert traj.cells == ((0, 0), (0, 0), (0, 1), (0, 2), (0, 3))
    assert traj.actions == (Action.STAY, Action.E, Action.E, Action.E)


def test_trajectory_from_raw_reports_rows():
    net = network_from_text("..#\n")
    with pytest.raises(DataError, match="row 2"):
        trajectory_from_raw([(0.0, (1.0, 1.0)), (0.0, (4.0, 1.0))], net)
    with pytest.raises(DataError, match="row 7"):
        trajectory_from_raw([(0.0, (1.0, 1.0)), (1.0, (8.0, 1.0))], net, row_numbers=[6, 7])
    with pytest.raises(RangeError, match="row 1"):
        trajectory_from_raw([(0.0, (100.0, 1.0))], net)
