"""Feeder data model: buses, branches, loads, and file ingestion.

A feeder file is a YAML document with exactly three top-level keys::

    buses:
      - {id: 1, phases: ABC, kind: source, base_voltage_v: 2400.0}
    branches:
      - {from: 1, to: 2, phases: ABC,
         impedance: [[[0.3, 0.6], [0.0, 0.0], [0.0, 0.0]],
                     [[0.0, 0.0], [0.3, 0.6], [0.0, 0.0]],
                     [[0.0, 0.0], [0.0, 0.0], [0.3, 0.6]]]}
    loads:
      - {bus: 2, power: {A: [20000.0, 8000.0]}}

``impedance`` is a |phases| x |phases| matrix of ``[r_ohm, x_ohm]`` pairs
(mutual coupling on the off-diagonals). Bus ids may be arbitrary integers;
ingestion remaps them to contiguous indices 0..N-1 in sorted-id order and
keeps the original id as ``label``. Unknown keys are rejected.

The graph must be a tree (radial) with exactly one source bus.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
import yaml

PHASES = "ABC"

BUS_KINDS = ("source", "load", "zero_injection", "junction")


class FeederValidationError(ValueError):
    """A feeder file parsed but violates a structural invariant."""


class FeederParseError(ValueError):
    """A feeder file is malformed (bad YAML, missing/unknown keys)."""


@dataclass(frozen=True, order=True)
class PhaseSet:
    """Non-empty subset of the phases A, B, C, kept in canonical order."""

    phases: str

    def __post_init__(self):
        canon = "".join(p for p in PHASES if p in self.phases)
        if not canon or canon != self.phases:
            raise FeederValidationError(
                f"phase set {self.phases!r} must be a non-empty ordered subset of 'ABC'"
            )

    def __iter__(self):
        return iter(self.phases)

    def __len__(self):
        return len(self.phases)

    def __contains__(self, phase):
        return phase in self.phases

    def issubset(self, other: "PhaseSet") -> bool:
        return all(p in other.phases for p in self.phases)

    def index(self, phase: str) -> int:
        return self.phases.index(phase)

    @staticmethod
    def parse(text: str) -> "PhaseSet":
        if not isinstance(text, str) or not text:
            raise FeederParseError(f"invalid phases field: {text!r}")
        canon = "".join(p for p in PHASES if p in text.upper())
        if len(canon) != len(text):
            raise FeederParseError(f"invalid phases field: {text!r}")
        return PhaseSet(canon)


@dataclass(frozen=True)
class Bus:
    index: int
    label: int
    phases: PhaseSet
    kind: str
    base_voltage: float


@dataclass
class Branch:
    index: int
    from_bus: int
    to_bus: int
    phases: PhaseSet
    series_impedance: np.ndarray  # complex, |phases| x |phases|

    @property
    def admittance(self) -> np.ndarray:
        return np.linalg.inv(self.series_impedance)


@dataclass
class Load:
    bus: int
    power: dict  # phase -> complex S in W + jvar (constant-power)


class FeederModel:
    """Validated, immutable radial feeder.

    Exposes the adjacency structure, unique tree distances, and the fixed
    state-slot ordering (bus-major, phase-minor) used everywhere else.
    """

    def __init__(self, buses, branches, loads):
        self.buses: list[Bus] = buses
        self.branches: list[Branch] = branches
        self.loads: list[Load] = loads
        self._validate()

        self.n_buses = len(buses)
        self.source = next(b.index for b in buses if b.kind == "source")
        self.base_voltage = buses[self.source].base_voltage

        self._neighbors = [set() for _ in buses]
        self._branch_at = [[] for _ in buses]
        for br in branches:
            self._neighbors[br.from_bus].add(br.to_bus)
            self._neighbors[br.to_bus].add(br.from_bus)
            self._branch_at[br.from_bus].append(br.index)
            self._branch_at[br.to_bus].append(br.index)

        # state slots: (bus, phase) bus-major, phase-minor
        self.slots: list[tuple[int, str]] = [
            (b.index, p) for b in buses for p in b.phases
        ]
        self._slot_index = {bp: s for s, bp in enumerate(self.slots)}
        self.n_slots = len(self.slots)

        # apparent-power base used to scale injection noise floors
        self.power_base = sum(
            abs(s) for ld in loads for s in ld.power.values()
        ) or 1.0e3

        self._label_to_index = {b.label: b.index for b in buses}
        self.loads_by_bus: dict[int, Load] = {ld.bus: ld for ld in loads}

    # -- lookups ---------------------------------------------------------

    def bus_by_label(self, label: int) -> int:
        try:
            return self._label_to_index[label]
        except KeyError:
            raise KeyError(f"unknown bus label {label!r}") from None

    def slot_index(self, bus: int, phase: str) -> int:
        return self._slot_index[(bus, phase)]

    def neighbors(self, bus: int) -> set[int]:
        return self._neighbors[bus]

    def branches_at(self, bus: int) -> list[Branch]:
        return [self.branches[i] for i in self._branch_at[bus]]

    # -- derived structure -----------------------------------------------

    def adjacency_pattern(self) -> np.ndarray:
        """Boolean N x N admittance sparsity pattern (diagonal included)."""
        a = np.eye(self.n_buses, dtype=bool)
        for br in self.branches:
            a[br.from_bus, br.to_bus] = True
            a[br.to_bus, br.from_bus] = True
        return a

    def graph_distance(self, a: int, b: int) -> int:
        """Hop count along the unique tree path between buses a and b."""
        for bus in (a, b):
            if not 0 <= bus < self.n_buses:
                raise KeyError(f"unknown bus id {bus}")
        if a == b:
            return 0
        dist = {a: 0}
        queue = deque([a])
        while queue:
            u = queue.popleft()
            for v in self._neighbors[u]:
                if v not in dist:
                    dist[v] = dist[u] + 1
                    if v == b:
                        return dist[v]
                    queue.append(v)
        raise KeyError(f"no path between buses {a} and {b}")

    def bfs_order(self) -> list[tuple[int, int | None]]:
        """(bus, parent) pairs in BFS order from the source."""
        order = [(self.source, None)]
        seen = {self.source}
        queue = deque([self.source])
        while queue:
            u = queue.popleft()
            for v in sorted(self._neighbors[u]):
                if v not in seen:
                    seen.add(v)
                    order.append((v, u))
                    queue.append(v)
        return order

    def branch_between(self, a: int, b: int) -> Branch:
        for br in self.branches_at(a):
            if {br.from_bus, br.to_bus} == {a, b}:
                return br
        raise KeyError(f"no branch between buses {a} and {b}")

    # -- validation --------------------------------------------------------

    def _validate(self):
        buses, branches, loads = self.buses, self.branches, self.loads
        if not buses:
            raise FeederValidationError("feeder has no buses")
        sources = [b for b in buses if b.kind == "source"]
        if len(sources) != 1:
            raise FeederValidationError(
                f"multiple sources: feeder must have exactly one source bus, got {len(sources)}"
            )
        if len(branches) != len(buses) - 1:
            raise FeederValidationError(
                f"cycle or disconnection: |branches| = {len(branches)} != |buses| - 1 = {len(buses) - 1}"
            )
        nbr = [set() for _ in buses]
        for br in branches:
            if br.from_bus == br.to_bus:
                raise FeederValidationError(f"self-loop at bus {br.from_bus}")
            if br.to_bus in nbr[br.from_bus]:
                raise FeederValidationError(
                    f"cycle: duplicate branch between {br.from_bus} and {br.to_bus}"
                )
            nbr[br.from_bus].add(br.to_bus)
            nbr[br.to_bus].add(br.from_bus)
            for end in (br.from_bus, br.to_bus):
                if not br.phases.issubset(buses[end].phases):
                    raise FeederValidationError(
                        f"phase mismatch: branch {br.from_bus}-{br.to_bus} phases "
                        f"{br.phases.phases} not a subset of bus {end} phases "
                        f"{buses[end].phases.phases}"
                    )
            z = br.series_impedance
            n = len(br.phases)
            if z.shape != (n, n):
                raise FeederValidationError(
                    f"impedance of branch {br.from_bus}-{br.to_bus} must be {n}x{n}"
                )
            if not np.allclose(z, z.T):
                raise FeederValidationError(
                    f"impedance of branch {br.from_bus}-{br.to_bus} is not symmetric"
                )
            if np.any(np.real(np.diag(z)) <= 0):
                raise FeederValidationError(
                    f"impedance of branch {br.from_bus}-{br.to_bus} needs positive "
                    "resistance on the diagonal"
                )
        # connectivity (cycle + count check above makes this the tree check)
        seen = {0}
        queue = deque([0])
        while queue:
            u = queue.popleft()
            for v in nbr[u]:
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        if len(seen) != len(buses):
            missing = sorted(set(range(len(buses))) - seen)
            raise FeederValidationError(f"disconnected bus(es): {missing}")
        # phase continuity from the source so the sweep is well defined
        src = next(b.index for b in buses if b.kind == "source")
        parent_phases = {src: buses[src].phases}
        queue = deque([src])
        while queue:
            u = queue.popleft()
            for v in nbr[u]:
                if v not in parent_phases:
                    br_ph = next(
                        br.phases
                        for br in branches
                        if {br.from_bus, br.to_bus} == {u, v}
                    )
                    if not br_ph.issubset(parent_phases[u]):
                        raise FeederValidationError(
                            f"phase mismatch: branch {u}-{v} carries phases absent "
                            "on the path to the source"
                        )
                    parent_phases[v] = br_ph
                    queue.append(v)
        seen_load_buses = set()
        for ld in loads:
            if ld.bus in seen_load_buses:
                raise FeederValidationError(f"duplicate load entry for bus {ld.bus}")
            seen_load_buses.add(ld.bus)
            bus = buses[ld.bus]
            if bus.kind == "zero_injection":
                raise FeederValidationError(
                    f"zero-injection bus {bus.label} has an attached load"
                )
            for p in ld.power:
                if p not in bus.phases:
                    raise FeederValidationError(
                        f"load on bus {bus.label} uses phase {p} absent at the bus"
                    )

    # -- (de)serialization -------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "buses": [
                {
                    "id": b.label,
                    "phases": b.phases.phases,
                    "kind": b.kind,
                    "base_voltage_v": float(b.base_voltage),
                }
                for b in self.buses
            ],
            "branches": [
                {
                    "from": self.buses[br.from_bus].label,
                    "to": self.buses[br.to_bus].label,
                    "phases": br.phases.phases,
                    "impedance": [
                        [[float(z.real), float(z.imag)] for z in row]
                        for row in br.series_impedance
                    ],
                }
                for br in self.branches
            ],
            "loads": [
                {
                    "bus": self.buses[ld.bus].label,
                    "power": {
                        p: [float(s.real), float(s.imag)]
                        for p, s in sorted(ld.power.items())
                    },
                }
                for ld in sorted(self.loads, key=lambda l: l.bus)
            ],
        }

    def __eq__(self, other):
        return isinstance(other, FeederModel) and self.to_dict() == other.to_dict()


def _require_keys(entry: dict, required: set, optional: set, what: str):
    if not isinstance(entry, dict):
        raise FeederParseError(f"{what} entry must be a mapping, got {entry!r}")
    keys = set(entry)
    if not required <= keys:
        raise FeederParseError(f"{what} entry missing keys {sorted(required - keys)}")
    unknown = keys - required - optional
    if unknown:
        raise FeederParseError(f"{what} entry has unknown keys {sorted(unknown)}")


def feeder_from_dict(doc: dict) -> FeederModel:
    if not isinstance(doc, dict):
        raise FeederParseError("feeder document must be a mapping")
    unknown = set(doc) - {"buses", "branches", "loads"}
    if unknown:
        raise FeederParseError(f"unknown top-level keys {sorted(unknown)}")
    if "buses" not in doc or "branches" not in doc:
        raise FeederParseError("feeder document needs 'buses' and 'branches'")

    raw_buses = doc["buses"] or []
    labels = []
    for entry in raw_buses:
        _require_keys(entry, {"id", "phases", "kind", "base_voltage_v"}, set(), "bus")
        labels.append(int(entry["id"]))
    if len(set(labels)) != len(labels):
        raise FeederParseError("duplicate bus ids")
    index_of = {lab: i for i, lab in enumerate(sorted(labels))}

    buses = [None] * len(labels)
    for entry in raw_buses:
        kind = entry["kind"]
        if kind not in BUS_KINDS:
            raise FeederParseError(f"unknown bus kind {kind!r}")
        idx = index_of[int(entry["id"])]
        buses[idx] = Bus(
            index=idx,
            label=int(entry["id"]),
            phases=PhaseSet.parse(entry["phases"]),
            kind=kind,
            base_voltage=float(entry["base_voltage_v"]),
        )

    branches = []
    for k, entry in enumerate(doc["branches"] or []):
        _require_keys(entry, {"from", "to", "phases", "impedance"}, set(), "branch")
        phases = PhaseSet.parse(entry["phases"])
        try:
            z = np.array(
                [[complex(r, x) for r, x in row] for row in entry["impedance"]]
            )
        except (TypeError, ValueError) as exc:
            raise FeederParseError(f"bad impedance in branch entry {k}: {exc}") from exc
        for end in ("from", "to"):
            if int(entry[end]) not in index_of:
                raise FeederParseError(f"branch references unknown bus {entry[end]}")
        branches.append(
            Branch(
                index=k,
                from_bus=index_of[int(entry["from"])],
                to_bus=index_of[int(entry["to"])],
                phases=phases,
                series_impedance=z,
            )
        )

    loads = []
    for entry in doc.get("loads") or []:
        _require_keys(entry, {"bus", "power"}, set(), "load")
        if int(entry["bus"]) not in index_of:
            raise FeederParseError(f"load references unknown bus {entry['bus']}")
        if not isinstance(entry["power"], dict):
            raise FeederParseError("load 'power' must map phase -> [p_w, q_var]")
        power = {}
        for p, pq in entry["power"].items():
            if p not in PHASES:
                raise FeederParseError(f"load phase {p!r} not one of 'ABC'")
            pw, qv = pq
            power[p] = complex(float(pw), float(qv))
        loads.append(Load(bus=index_of[int(entry["bus"])], power=power))

    return FeederModel(buses, branches, loads)


def load_feeder(path) -> FeederModel:
    """Parse and validate a feeder file; raises on any schema violation."""
    with open(path) as fh:
        try:
            doc = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise FeederParseError(f"cannot parse {path}: {exc}") from exc
    return feeder_from_dict(doc)


def dump_feeder(model: FeederModel, path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(model.to_dict(), fh, sort_keys=False)
