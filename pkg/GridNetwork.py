import math
from dataclasses import dataclass, field
from enum import IntEnum
from functools import cached_property
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np

import TrepPlatform
from TrepPlatform import ConfigError, ContractError, DataError, RangeError

# Grid cells are (row, col); row 0 is the first line of a map file and grows
# with the y coordinate, col grows with x. North is row - 1.
Cell = Tuple[int, int]

UNREACHABLE = math.inf


class Action(IntEnum):
    N = 0
    NE = 1
    E = 2
    SE = 3
    S = 4
    SW = 5
    W = 6
    NW = 7
    STAY = 8


NUM_ACTIONS = len(Action)

ACTION_OFFSETS: Dict[Action, Tuple[int, int]] = {
    Action.N: (-1, 0),
    Action.NE: (-1, 1),
    Action.E: (0, 1),
    Action.SE: (1, 1),
    Action.S: (1, 0),
    Action.SW: (1, -1),
    Action.W: (0, -1),
    Action.NW: (-1, -1),
    Action.STAY: (0, 0),
}

OFFSET_ACTIONS: Dict[Tuple[int, int], Action] = {offset: action for action, offset in ACTION_OFFSETS.items()}


def is_diagonal(action: Action) -> bool:
    dr, dc = ACTION_OFFSETS[action]
    return dr != 0 and dc != 0


@dataclass(frozen=True)
class GridSpec:
    origin: Tuple[float, float] = (0.0, 0.0)
    cell_size: float = 3.0  # alpha, meters
    width: int = 1
    height: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'origin', (float(self.origin[0]), float(self.origin[1])))
        if not self.cell_size > 0:
            raise ConfigError("cell_size must be positive")
        if self.width < 1 or self.height < 1:
            raise ConfigError("grid width and height must be positive cell counts")

    def in_bounds(self, cell: Cell) -> bool:
        row, col = cell
        return 0 <= row < self.height and 0 <= col < self.width

    def extent(self) -> Tuple[float, float, float, float]:
        x0, y0 = self.origin
        return x0, y0, x0 + self.width * self.cell_size, y0 + self.height * self.cell_size


def _axis_index(offset: float, cell_size: float) -> int:
    # Cells are (lo, hi] so a point on a shared edge belongs to the lower index;
    # the grid's own lower edge belongs to cell 0.
    return max(math.ceil(offset / cell_size) - 1, 0)


def discretize(point: Tuple[float, float], spec: GridSpec) -> Cell:
    x, y = float(point[0]), float(point[1])
    xmin, ymin, xmax, ymax = spec.extent()
    if not (xmin <= x <= xmax and ymin <= y <= ymax):
        raise RangeError(f"point ({x}, {y}) lies outside the grid extent {spec.extent()}")
    col = _axis_index(x - xmin, spec.cell_size)
    row = _axis_index(y - ymin, spec.cell_size)
    return min(row, spec.height - 1), min(col, spec.width - 1)


def cell_center(cell: Cell, spec: GridSpec) -> Tuple[float, float]:
    row, col = cell
    return (spec.origin[0] + (col + 0.5) * spec.cell_size,
            spec.origin[1] + (row + 0.5) * spec.cell_size)


def move_op(v: Cell, a: Action, spec: GridSpec) -> Optional[Cell]:
    if not spec.in_bounds(v):
        raise ContractError(f"cell {v} is outside the grid")
    dr, dc = ACTION_OFFSETS[Action(a)]
    target = (v[0] + dr, v[1] + dc)
    return target if spec.in_bounds(target) else None


@dataclass(frozen=True)
class OccupancyMap:
    blocked_cells: FrozenSet[Cell] = frozenset()
    wall_segments: FrozenSet[Tuple[Cell, Cell]] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, 'blocked_cells', frozenset(tuple(c) for c in self.blocked_cells))
        object.__setattr__(self, 'wall_segments', frozenset((tuple(a), tuple(b)) for a, b in self.wall_segments))

    def validate(self, spec: GridSpec):
        for cell in self.blocked_cells:
            if not spec.in_bounds(cell):
                raise ConfigError(f"blocked cell {cell} is outside the grid")
        for a, b in self.wall_segments:
            if not (spec.in_bounds(a) and spec.in_bounds(b)):
                raise ConfigError(f"wall segment {a}-{b} references a cell outside the grid")

    @cached_property
    def severed(self) -> FrozenSet[FrozenSet[Cell]]:
        # Walls cut both directions of a transition.
        return frozenset(frozenset(pair) for pair in self.wall_segments)


def parse_occupancy_text(grid_text: str, walls_text: str = "") -> Tuple[OccupancyMap, int, int]:
    """
    Parse the occupancy map format: one row per line, '.' free and '#' blocked.
    Wall segments come one per line as 'r1,c1-r2,c2'. Returns (map, height, width).
    """
    rows = [line.rstrip() for line in grid_text.splitlines() if line.strip()]
    if not rows:
        raise DataError("occupancy map has no rows")
    width = len(rows[0])
    blocked = set()
    for r, line in enumerate(rows):
        if len(line) != width:
            raise DataError(f"map row {r + 1} has {len(line)} cells, expected {width}")
        for c, ch in enumerate(line):
            if ch == '#':
                blocked.add((r, c))
            elif ch != '.':
                raise DataError(f"map row {r + 1} column {c + 1}: unexpected character {ch!r}")

    walls = set()
    for lineno, line in enumerate(walls_text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        try:
            left, right = line.split('-')
            r1, c1 = (int(v) for v in left.split(','))
            r2, c2 = (int(v) for v in right.split(','))
        except ValueError:
            raise DataError(f"walls line {lineno}: expected 'r1,c1-r2,c2', got {line!r}")
        walls.add(((r1, c1), (r2, c2)))

    return OccupancyMap(frozenset(blocked), frozenset(walls)), len(rows), width


def load_occupancy_map(map_path: str, walls_path: Optional[str] = None) -> Tuple[OccupancyMap, int, int]:
    try:
        with open(map_path, encoding="utf-8") as f:
            grid_text = f.read()
        walls_text = ""
        if walls_path:
            with open(walls_path, encoding="utf-8") as f:
                walls_text = f.read()
    except FileNotFoundError as e:
        raise DataError(f"map file not found: {e.filename}")
    return parse_occupancy_text(grid_text, walls_text)


def format_occupancy_map(occupancy: OccupancyMap, height: int, width: int) -> Tuple[str, str]:
    grid_lines = []
    for r in range(height):
        grid_lines.append("".join('#' if (r, c) in occupancy.blocked_cells else '.' for c in range(width)))
    wall_lines = [f"{a[0]},{a[1]}-{b[0]},{b[1]}" for a, b in sorted(occupancy.wall_segments)]
    return "\n".join(grid_lines) + "\n", "\n".join(wall_lines) + ("\n" if wall_lines else "")


def write_occupancy_map(occupancy: OccupancyMap, height: int, width: int, map_path: str,
                        walls_path: Optional[str] = None):
    grid_text, walls_text = format_occupancy_map(occupancy, height, width)
    with open(map_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(grid_text)
    if walls_path:
        with open(walls_path, "w", encoding="utf-8", newline="\n") as f:
            f.write(walls_text)


def map_hash(occupancy: OccupancyMap, spec: GridSpec) -> str:
    grid_text, walls_text = format_occupancy_map(occupancy, spec.height, spec.width)
    return TrepPlatform.sha256_text(repr(spec.origin), repr(spec.cell_size), grid_text, walls_text)


@dataclass(frozen=True)
class Trajectory:
    cells: Tuple[Cell, ...]
    actions: Optional[Tuple[Action, ...]] = None
    label: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'cells', tuple((int(r), int(c)) for r, c in self.cells))
        if len(self.cells) < 1:
            raise ContractError("a trajectory needs at least one cell")
        if self.actions is not None:
            object.__setattr__(self, 'actions', tuple(Action(a) for a in self.actions))
            if len(self.actions) != len(self.cells) - 1:
                raise ContractError(f"trajectory of {len(self.cells)} cells needs {len(self.cells) - 1} actions, "
                                    f"got {len(self.actions)}")

    def __len__(self):
        return len(self.cells)

    def sub(self, s: int, e: int) -> 'Trajectory':
        """X_{s..e}, 1-based and inclusive."""
        if not 1 <= s <= e <= len(self.cells):
            raise ContractError(f"sub-trajectory bounds {s}..{e} outside 1..{len(self.cells)}")
        actions = self.actions[s - 1:e - 1] if self.actions is not None else None
        return Trajectory(self.cells[s - 1:e], actions, self.label)

    def with_actions(self) -> 'Trajectory':
        if self.actions is not None:
            return self
        return Trajectory(self.cells, actions_of(self), self.label)


class DistanceTable:
    """
    Shortest-path hop counts indexed like an (N, N) array: table[u, v] or
    table[np.ix_(us, vs)]. Each source row is one BFS, run on first use and kept,
    so memory grows with the number of distinct sources queried rather than N^2 up front.
    """

    def __init__(self, graph: nx.DiGraph, size: int):
        self.graph = graph
        self.size = size
        self._rows: Dict[int, np.ndarray] = {}

    @property
    def shape(self) -> Tuple[int, int]:
        return self.size, self.size

    def row(self, source: int) -> np.ndarray:
        row = self._rows.get(source)
        if row is None:
            if not 0 <= source < self.size:
                raise ContractError(f"vertex {source} is outside the road network")
            row = np.full(self.size, UNREACHABLE)
            for target, hops in nx.single_source_shortest_path_length(self.graph, source).items():
                row[target] = hops
            row.setflags(write=False)
            self._rows[source] = row
        return row

    def __getitem__(self, key):
        sources, targets = key
        sources = np.asarray(sources)
        if sources.ndim == 0:
            return self.row(int(sources))[targets]
        unique, inverse = np.unique(sources, return_inverse=True)
        block = np.stack([self.row(int(s)) for s in unique])
        return block[inverse.reshape(sources.shape), targets]

    def __array__(self, dtype=None, copy=None):
        full = np.stack([self.row(v) for v in range(self.size)])
        return full if dtype is None else full.astype(dtype)


class RoadNetwork:
    """
    Directed graph of traversable cells. Vertices are numbered 0..N-1 in row-major
    order; successor[v, a] is the vertex reached by action a or -1 when illegal.
    Immutable after construction.
    """

    def __init__(self, spec: GridSpec, occupancy: OccupancyMap, cells: List[Cell], successor: np.ndarray):
        self.spec = spec
        self.occupancy = occupancy
        self.cells: Tuple[Cell, ...] = tuple(cells)
        self.index: Dict[Cell, int] = {cell: i for i, cell in enumerate(self.cells)}
        self.successor = successor
        self.successor.setflags(write=False)
        masks = (successor >= 0).astype(np.float64)
        masks.setflags(write=False)
        self.masks = masks
        self.graph = nx.DiGraph()
        self.graph.add_nodes_from(range(len(self.cells)))
        for v in range(len(self.cells)):
            for a in range(NUM_ACTIONS):
                if successor[v, a] >= 0:
                    self.graph.add_edge(v, int(successor[v, a]))
        self.hash = map_hash(occupancy, spec)

    def __len__(self):
        return len(self.cells)

    def __contains__(self, cell) -> bool:
        return tuple(cell) in self.index

    def vertex(self, cell: Cell) -> int:
        try:
            return self.index[tuple(cell)]
        except KeyError:
            raise ContractError(f"cell {cell} is not a vertex of the road network")

    def vertices(self, cells: Iterable[Cell]) -> np.ndarray:
        return np.array([self.vertex(c) for c in cells], dtype=np.int64)

    def rcells(self, cell: Cell) -> FrozenSet[Cell]:
        v = self.vertex(cell)
        return frozenset(self.cells[u] for u in self.successor[v] if u >= 0)

    def neighbors(self, cell: Cell) -> List[Cell]:
        """Cells one legal move away, excluding the cell itself."""
        v = self.vertex(cell)
        return [self.cells[u] for u in sorted(set(int(u) for u in self.successor[v])) if u >= 0 and u != v]

    def mask(self, cell: Cell) -> np.ndarray:
        return self.masks[self.vertex(cell)]

    def legal_actions(self, cell: Cell) -> List[Action]:
        v = self.vertex(cell)
        return [Action(a) for a in range(NUM_ACTIONS) if self.successor[v, a] >= 0]

    def step(self, cell: Cell, action: Action) -> Cell:
        target = self.successor[self.vertex(cell), int(action)]
        if target < 0:
            raise ContractError(f"action {Action(action).name} is illegal at cell {cell}")
        return self.cells[target]

    def edges(self) -> List[Tuple[Cell, Cell]]:
        return [(self.cells[u], self.cells[v]) for u, v in self.graph.edges]

    def has_edge(self, u: Cell, v: Cell) -> bool:
        return tuple(u) in self.index and tuple(v) in self.index and \
            self.graph.has_edge(self.index[tuple(u)], self.index[tuple(v)])

    @cached_property
    def distances(self) -> 'DistanceTable':
        """Hop distances d[u, v] by BFS; UNREACHABLE where no directed path exists."""
        return DistanceTable(self.graph, len(self.cells))

    def shortest_path(self, u: Cell, v: Cell) -> List[Cell]:
        try:
            path = nx.shortest_path(self.graph, self.vertex(u), self.vertex(v))
        except nx.NetworkXNoPath:
            raise DataError(f"no legal path from {u} to {v}")
        return [self.cells[i] for i in path]

    def is_valid(self, traj: Trajectory) -> bool:
        try:
            self.validate(traj)
            return True
        except (DataError, ContractError):
            return False

    def validate(self, traj: Trajectory):
        for t, cell in enumerate(traj.cells):
            if cell not in self.index:
                raise DataError(f"trajectory cell {t + 1} {cell} is not a vertex of the road network")
        for t in range(len(traj.cells) - 1):
            if not self.has_edge(traj.cells[t], traj.cells[t + 1]):
                raise DataError(f"step {t + 1}: {traj.cells[t]} -> {traj.cells[t + 1]} is not a legal transition")
            if traj.actions is not None and self.step(traj.cells[t], traj.actions[t]) != traj.cells[t + 1]:
                raise DataError(f"step {t + 1}: action {traj.actions[t].name} does not lead to {traj.cells[t + 1]}")


def build_network(occupancy: OccupancyMap, spec: GridSpec) -> RoadNetwork:
    occupancy.validate(spec)
    cells = [(r, c) for r in range(spec.height) for c in range(spec.width)
             if (r, c) not in occupancy.blocked_cells]
    if not cells:
        raise ConfigError("the occupancy map leaves no traversable cell")
    traversable = set(cells)
    index = {cell: i for i, cell in enumerate(cells)}
    severed = occupancy.severed

    successor = np.full((len(cells), NUM_ACTIONS), -1, dtype=np.int64)
    for v, cell in enumerate(cells):
        for action in Action:
            target = move_op(cell, action, spec)
            if target is None or target not in traversable:
                continue
            if target != cell and frozenset((cell, target)) in severed:
                continue
            if is_diagonal(action):
                dr, dc = ACTION_OFFSETS[action]
                # no corner cutting: both orthogonal flanks must be traversable
                if (cell[0] + dr, cell[1]) not in traversable or (cell[0], cell[1] + dc) not in traversable:
                    continue
            successor[v, action] = index[target]
    return RoadNetwork(spec, occupancy, cells, successor)


def network_from_files(map_path: str, walls_path: Optional[str] = None, cell_size: float = 3.0,
                       origin: Tuple[float, float] = (0.0, 0.0)) -> RoadNetwork:
    occupancy, height, width = load_occupancy_map(map_path, walls_path)
    return build_network(occupancy, GridSpec(tuple(origin), cell_size, width, height))


def shortest_distance(net: RoadNetwork, u: Cell, v: Cell):
    """Hop count of the shortest directed path u -> v, or UNREACHABLE."""
    hops = net.distances[net.vertex(u), net.vertex(v)]
    return UNREACHABLE if math.isinf(hops) else int(hops)


def random_walk(net: RoadNetwork, start: Cell, length: int, rng_seed) -> Trajectory:
    if length < 1:
        raise ContractError("walk length must be at least 1")
    rng = TrepPlatform.as_rng(rng_seed)
    v = net.vertex(start)
    cells = [net.cells[v]]
    actions = []
    for _ in range(length - 1):
        legal = np.flatnonzero(net.successor[v] >= 0)
        a = int(rng.choice(legal))
        v = int(net.successor[v, a])
        actions.append(Action(a))
        cells.append(net.cells[v])
    return Trajectory(tuple(cells), tuple(actions))


def random_start(net: RoadNetwork, rng: np.random.Generator) -> Cell:
    return net.cells[int(rng.integers(len(net.cells)))]


def actions_of(traj: Trajectory, net: Optional[RoadNetwork] = None) -> Tuple[Action, ...]:
    actions = []
    for t in range(len(traj.cells) - 1):
        (r1, c1), (r2, c2) = traj.cells[t], traj.cells[t + 1]
        action = OFFSET_ACTIONS.get((r2 - r1, c2 - c1))
        if action is None:
            raise ContractError(f"step {t + 1}: {traj.cells[t]} -> {traj.cells[t + 1]} is not a single move")
        if net is not None and net.step(traj.cells[t], action) != traj.cells[t + 1]:
            raise ContractError(f"step {t + 1}: {traj.cells[t]} -> {traj.cells[t + 1]} is illegal on the network")
        actions.append(action)
    return tuple(actions)


def replay(start: Cell, actions: Sequence[Action], spec: GridSpec) -> Tuple[Cell, ...]:
    cells = [tuple(start)]
    for a in actions:
        nxt = move_op(cells[-1], a, spec)
        if nxt is None:
            raise ContractError(f"action {Action(a).name} leaves the grid at {cells[-1]}")
        cells.append(nxt)
    return tuple(cells)


def trajectory_from_raw(samples: Sequence[Tuple[float, Tuple[float, float]]], net: RoadNetwork,
                        spec: Optional[GridSpec] = None, label: Optional[str] = None,
                        row_numbers: Optional[Sequence[int]] = None) -> Trajectory:
    """
    Turn (timestamp, (x, y)) samples into a legal trajectory: repeated cells become
    STAY steps and gaps are bridged with a shortest legal path.
    """
    spec = spec or net.spec
    if not samples:
        raise DataError("no samples to build a trajectory from")
    cells: List[Cell] = []
    previous_time = None
    for i, (timestamp, point) in enumerate(samples):
        row = row_numbers[i] if row_numbers is not None else i + 1
        if previous_time is not None and not timestamp > previous_time:
            raise DataError(f"row {row}: timestamps must be strictly increasing")
        previous_time = timestamp
        try:
            cell = discretize(point, spec)
        except RangeError as e:
            raise RangeError(f"row {row}: {e}")
        if cell not in net:
            raise DataError(f"row {row}: sample {tuple(point)} falls in blocked cell {cell}")
        if cells and cell != cells[-1] and not net.has_edge(cells[-1], cell):
            try:
                bridge = net.shortest_path(cells[-1], cell)
            except DataError:
                raise DataError(f"row {row}: cell {cell} cannot be reached from {cells[-1]}")
            cells.extend(bridge[1:-1])
        cells.append(cell)
    traj = Trajectory(tuple(cells), None, label)
    return Trajectory(traj.cells, actions_of(traj, net), label)
