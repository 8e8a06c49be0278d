import re
from dataclasses import dataclass
from typing import FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml
from yaml.loader import SafeLoader

import TrepPlatform
from TrepPlatform import ContractError, DataError, RangeError, ScenarioError
from GridNetwork import Cell, RoadNetwork, Trajectory, actions_of, discretize, trajectory_from_raw

Region = FrozenSet[Cell]


@dataclass(frozen=True)
class GroupTemplate:
    label: str
    start: Region
    waypoints: Tuple[Region, ...]
    dwell: Tuple[int, int] = (0, 0)  # STAY steps added at each waypoint, inclusive range
    noise: float = 0.0  # per-step probability of a one-cell detour and return

    def __post_init__(self):
        object.__setattr__(self, 'start', frozenset(tuple(c) for c in self.start))
        object.__setattr__(self, 'waypoints', tuple(frozenset(tuple(c) for c in w) for w in self.waypoints))
        object.__setattr__(self, 'dwell', tuple(int(d) for d in self.dwell))
        if not self.start or not all(self.waypoints):
            raise ScenarioError(f"group {self.label}: regions must not be empty")
        if not self.waypoints:
            raise ScenarioError(f"group {self.label}: at least one waypoint region is needed")
        if not 0 <= self.dwell[0] <= self.dwell[1]:
            raise ScenarioError(f"group {self.label}: dwell range must satisfy 0 <= low <= high")
        if not 0 <= self.noise < 1:
            raise ScenarioError(f"group {self.label}: noise rate must lie in [0, 1)")


@dataclass(frozen=True)
class ScenarioSpec:
    groups: Tuple[GroupTemplate, ...]
    per_group: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'groups', tuple(self.groups))
        if not self.groups:
            raise ScenarioError("a scenario needs at least one group")
        if self.per_group < 1:
            raise ScenarioError("per_group must be positive")
        labels = [g.label for g in self.groups]
        if len(set(labels)) != len(labels):
            raise ScenarioError("group labels must be distinct")


def _region(cells) -> Region:
    return frozenset((int(r), int(c)) for r, c in cells)


def load_scenario(path: str) -> ScenarioSpec:
    """
    Scenario YAML or JSON: {"per_group": n, "seed": s, "groups": [{"label": ..., "start": [[r, c], ...],
    "waypoints": [[[r, c], ...], ...], "dwell": [lo, hi], "noise": p}, ...]}
    """
    try:
        with open(path, encoding="utf-8") as f:
            raw = yaml.load(f, Loader=SafeLoader)
        groups = tuple(GroupTemplate(str(g["label"]), _region(g["start"]),
                                     tuple(_region(w) for w in g["waypoints"]),
                                     tuple(g.get("dwell", (0, 0))), float(g.get("noise", 0.0)))
                       for g in raw["groups"])
        return ScenarioSpec(groups, int(raw.get("per_group", 10)), int(raw.get("seed", 0)))
    except FileNotFoundError:
        raise DataError(f"scenario file not found: {path}")
    except (KeyError, TypeError, ValueError, yaml.YAMLError) as e:
        raise ScenarioError(f"scenario file {path} is malformed: {e}")


def _region_near(net: RoadNetwork, anchor: Tuple[float, float], radius: int) -> Region:
    r0, c0 = anchor
    cells = [cell for cell in net.cells if abs(cell[0] - r0) <= radius and abs(cell[1] - c0) <= radius]
    if cells:
        return frozenset(cells)
    nearest = min(net.cells, key=lambda cell: ((cell[0] - r0) ** 2 + (cell[1] - c0) ** 2, cell))
    return frozenset([nearest])


def default_scenario(net: RoadNetwork, per_group: int = 10, seed: int = 0, noise: float = 0.05) -> ScenarioSpec:
    """
    Six groups on any map: three route families (west-east, north-south and an
    L-shaped route over the north-east corner), each walked in both directions,
    the return variant lingering at its waypoints.
    """
    height, width = net.spec.height, net.spec.width
    radius = max(1, min(height, width) // 8)
    top, mid_r, bottom = radius, (height - 1) / 2, height - 1 - radius
    left, mid_c, right = radius, (width - 1) / 2, width - 1 - radius

    def near(r, c):
        return _region_near(net, (r, c), radius)

    west, east, north, south = near(mid_r, left), near(mid_r, right), near(top, mid_c), near(bottom, mid_c)
    north_west, north_east, south_east = near(top, left), near(top, right), near(bottom, right)
    centre = near(mid_r, mid_c)
    linger = (1, 3)
    groups = (
        GroupTemplate("west-east", west, (centre, east), (0, 0), noise),
        GroupTemplate("east-west", east, (centre, west), linger, noise),
        GroupTemplate("north-south", north, (centre, south), (0, 0), noise),
        GroupTemplate("south-north", south, (centre, north), linger, noise),
        GroupTemplate("corner-out", north_west, (north_east, south_east), (0, 0), noise),
        GroupTemplate("corner-back", south_east, (north_east, north_west), linger, noise),
    )
    return ScenarioSpec(groups, per_group, seed)


def _pick(region: Region, net: RoadNetwork, rng: np.random.Generator, label: str) -> Cell:
    cells = sorted(region)
    missing = [cell for cell in cells if cell not in net]
    if missing:
        raise ScenarioError(f"group {label}: region cell {missing[0]} is not traversable")
    return cells[int(rng.integers(len(cells)))]


def add_detours(cells: Sequence[Cell], net: RoadNetwork, noise: float, rng: np.random.Generator) -> List[Cell]:
    """With probability noise before each step, step to a random neighbor and straight back."""
    out = [tuple(cells[0])]
    for cell in cells[1:]:
        if noise > 0 and rng.random() < noise:
            here = out[-1]
            options = [n for n in net.neighbors(here) if net.has_edge(n, here)]
            if options:
                out.extend([options[int(rng.integers(len(options)))], here])
        out.append(tuple(cell))
    return out


def generate_synthetic(net: RoadNetwork, spec: ScenarioSpec) -> List[Trajectory]:
    rng = np.random.default_rng(spec.seed)
    corpus = []
    for group in spec.groups:
        for _ in range(spec.per_group):
            path = [_pick(group.start, net, rng, group.label)]
            for region in group.waypoints:
                target = _pick(region, net, rng, group.label)
                try:
                    path.extend(net.shortest_path(path[-1], target)[1:])
                except DataError:
                    raise ScenarioError(f"group {group.label}: waypoint {target} is unreachable from {path[-1]}")
                path.extend([target] * int(rng.integers(group.dwell[0], group.dwell[1] + 1)))
            cells = add_detours(path, net, group.noise, rng)
            traj = Trajectory(tuple(cells), None, group.label)
            corpus.append(Trajectory(traj.cells, actions_of(traj, net), group.label))
    TrepPlatform.log(f"Generated {len(corpus)} trajectories in {len(spec.groups)} groups.")
    return corpus


def perturb_corpus(corpus: Sequence[Trajectory], net: RoadNetwork, noise: float, seed=0) -> List[Trajectory]:
    """Copies of the corpus with random one-cell detours, labels kept."""
    if not 0 <= noise < 1:
        raise ContractError("noise rate must lie in [0, 1)")
    rng = TrepPlatform.as_rng(seed)
    perturbed = []
    for traj in corpus:
        traj = Trajectory(tuple(add_detours(traj.cells, net, noise, rng)), None, traj.label)
        perturbed.append(Trajectory(traj.cells, actions_of(traj, net), traj.label))
    return perturbed


def format_corpus_line(traj: Trajectory) -> str:
    label = traj.label if traj.label is not None else ""
    if any(ch in label for ch in "\t\r\n"):
        raise DataError(f"label {label!r} cannot be written to a corpus file: it holds a tab or line break")
    return label + "\t" + ",".join(f"{r}:{c}" for r, c in traj.cells)


def write_corpus(path: str, corpus: Sequence[Trajectory]):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for traj in corpus:
            f.write(format_corpus_line(traj) + "\n")


def read_corpus(path: str, net: Optional[RoadNetwork] = None) -> List[Trajectory]:
    """Corpus file: one trajectory per line, `label<TAB>row:col,row:col,...`."""
    corpus = []
    try:
        with open(path, encoding="utf-8") as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise DataError(f"corpus file not found: {path}")
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            label, cells_text = line.split("\t")
            cells = tuple(tuple(int(v) for v in item.split(":")) for item in cells_text.split(","))
            if any(len(cell) != 2 for cell in cells):
                raise ValueError("cells are row:col")
            traj = Trajectory(cells, None, label or None)
        except ValueError as e:
            raise DataError(f"{path} line {lineno}: {e}")
        if net is not None:
            try:
                net.validate(traj)
            except DataError as e:
                raise DataError(f"{path} line {lineno}: {e}")
            traj = Trajectory(traj.cells, actions_of(traj, net), traj.label)
        corpus.append(traj)
    if not corpus:
        raise DataError(f"corpus file {path} holds no trajectories")
    return corpus


@dataclass
class AtcCorpus:
    trajectories: List[Trajectory]
    dropped_blocked: int
    dropped_bounds: int
    dropped_short: int


def _nearest_samples(times: np.ndarray, interval: float) -> Tuple[np.ndarray, np.ndarray]:
    """Target times t0, t0 + interval, ... and, for each, the index of the nearest sample (earlier on ties)."""
    targets = times[0] + interval * np.arange(int(np.floor((times[-1] - times[0]) / interval)) + 1)
    right = np.searchsorted(times, targets, side="left").clip(0, len(times) - 1)
    left = (right - 1).clip(0, len(times) - 1)
    pick = np.where(np.abs(times[left] - targets) <= np.abs(times[right] - targets), left, right)
    return targets, pick


def ingest_atc(path: str, net: RoadNetwork, config: TrepPlatform.TrepConfig) -> AtcCorpus:
    """
    Read an ATC-style CSV (timestamp seconds, person id, x, y in the configured
    unit), keep one sample per resample interval per person and turn each person's
    samples into a trajectory. Rows in blocked cells and outside atc_bounds are dropped.
    """
    try:
        frame = pd.read_csv(path, header=None, dtype=str, skip_blank_lines=False)
    except FileNotFoundError:
        raise DataError(f"ATC file not found: {path}")
    except pd.errors.EmptyDataError:
        raise DataError(f"ATC file {path} is empty")
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        where = f"line {match.group(1)}" if match else "unparsable row"
        raise DataError(f"{path} {where}: malformed row ({str(e).strip()})")
    # row i of the frame is physical line i + 1; blank lines stay as all-NaN rows until here
    frame.index = np.arange(1, len(frame) + 1)
    frame = frame.dropna(how="all")
    if frame.empty:
        raise DataError(f"ATC file {path} is empty")
    ts_col, id_col, x_col, y_col = config.atc_columns
    if max(config.atc_columns) >= frame.shape[1]:
        raise DataError(f"ATC file {path} has {frame.shape[1]} columns, config needs index {max(config.atc_columns)}")

    data = pd.DataFrame({
        "line": frame.index.to_numpy(),
        "timestamp": pd.to_numeric(frame[ts_col], errors="coerce"),
        "person": frame[id_col].str.strip(),
        "x": pd.to_numeric(frame[x_col], errors="coerce") * config.atc_unit_scale,
        "y": pd.to_numeric(frame[y_col], errors="coerce") * config.atc_unit_scale,
    })
    bad = data[data[["timestamp", "x", "y"]].isna().any(axis=1) | data["person"].isna()]
    if len(bad):
        raise DataError(f"{path} line {int(bad['line'].iloc[0])}: malformed row")

    dropped_bounds = 0
    if config.atc_bounds is not None:
        xmin, ymin, xmax, ymax = config.atc_bounds
        inside = data["x"].between(xmin, xmax) & data["y"].between(ymin, ymax)
        dropped_bounds = int((~inside).sum())
        data = data[inside]

    cells = []
    for line, x, y in zip(data["line"], data["x"], data["y"]):
        try:
            cells.append(discretize((x, y), net.spec))
        except RangeError as e:
            raise RangeError(f"{path} line {line}: {e}")
    blocked = np.array([cell not in net for cell in cells], dtype=bool)
    dropped_blocked = int(blocked.sum())
    if dropped_blocked:
        TrepPlatform.logger.warning(f"{path}: dropped {dropped_blocked} rows in blocked cells")
    data = data[~blocked]

    trajectories = []
    dropped_short = 0
    for person, rows in data.sort_values(["person", "timestamp", "line"], kind="mergesort").groupby("person", sort=True):
        times = rows["timestamp"].to_numpy(dtype=np.float64)
        targets, pick = _nearest_samples(times, config.resample_interval)
        if len(targets) < config.atc_min_length:
            dropped_short += 1
            continue
        points = rows[["x", "y"]].to_numpy()[pick]
        lines = rows["line"].to_numpy()[pick]
        samples = [(float(t), (float(p[0]), float(p[1]))) for t, p in zip(targets, points)]
        try:
            trajectories.append(trajectory_from_raw(samples, net, label=str(person), row_numbers=[int(n) for n in lines]))
        except DataError as e:
            raise type(e)(f"{path} person {person}: {e}")
    if not trajectories:
        raise DataError(f"no trajectory survived ingestion of {path}")
    TrepPlatform.log(f"Ingested {len(trajectories)} trajectories from {path}.")
    return AtcCorpus(trajectories, dropped_blocked, dropped_bounds, dropped_short)
