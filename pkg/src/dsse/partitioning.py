"""Vertex-cut partitioning at PMU buses and sparsity-mask construction.

Removing the PMU buses splits the radial feeder into components; each
component plus its adjacent PMU buses is one partition (PMU buses belong
to every partition they border). An edge joining two PMU buses that share
no component forms its own two-bus partition so every branch lives in at
least one partition.

Depth bookkeeping:

* ``hop_diameter`` -- max pairwise hop distance inside the partition's
  induced subgraph. It bounds how many weight layers information needs to
  cross the partition, so it drives the off-diagonal mask lifetime.
* ``diameter`` -- the partition's resolution depth: equal to hop_diameter,
  except that a multi-bus partition containing a non-PMU bus gets a floor
  of 2 (one layer to reach the PMU-anchored information, one to refine the
  local estimate). A bus's output is emitted after the deepest partition
  containing it resolves. On the six-bus example with a PMU at the fourth
  bus this yields depths [3, 2, 2], a three-layer network, and masks whose
  second layer drops exactly the four PMU-to-leaf connections while the
  leaves keep their diagonal refinement entries.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from dsse.grid_model import FeederModel


@dataclass(frozen=True)
class Partition:
    buses: frozenset
    pmus: frozenset  # boundary PMU buses contained in this partition

    def __contains__(self, bus):
        return bus in self.buses


@dataclass
class MaskPlan:
    """Per-layer bus-granularity sparsity masks plus output routing.

    ``masks[t-1]`` gates the weight matrix feeding layer ``t`` (layer 0 is
    the input); ``exit_layer[b]`` is the layer whose activations feed bus
    b's readout; ``block_width`` is the hidden channel count per bus.
    """

    adjacency: np.ndarray  # bool (N, N)
    depth: int
    masks: list  # depth bool arrays (N, N)
    exit_layer: np.ndarray  # int (N,)
    block_width: int
    pruned: bool

    @property
    def n_buses(self) -> int:
        return self.adjacency.shape[0]

    def signature(self) -> str:
        import hashlib

        payload = json.dumps(
            {
                "adjacency": self.adjacency.astype(int).tolist(),
                "masks": [m.astype(int).tolist() for m in self.masks],
                "exit_layer": self.exit_layer.tolist(),
                "block_width": self.block_width,
                "pruned": self.pruned,
            }
        ).encode()
        return hashlib.sha256(payload).hexdigest()


@dataclass(frozen=True)
class ParamCount:
    pawnn_params: int
    p2n2_params: int


def partition_at_pmus(model: FeederModel, pmu_buses) -> list:
    """Split the feeder at its PMU buses (vertex cut)."""
    pmus = sorted(set(pmu_buses))
    if not pmus:
        raise ValueError("pmu_buses must be non-empty")
    for b in pmus:
        if not 0 <= b < model.n_buses:
            raise KeyError(f"invalid pmu bus id {b}")
    pmu_set = set(pmus)

    partitions = []
    seen = set()
    for start in range(model.n_buses):
        if start in seen or start in pmu_set:
            continue
        comp = {start}
        boundary = set()
        stack = [start]
        while stack:
            u = stack.pop()
            for v in model.neighbors(u):
                if v in pmu_set:
                    boundary.add(v)
                elif v not in comp:
                    comp.add(v)
                    stack.append(v)
        seen |= comp
        partitions.append(
            Partition(buses=frozenset(comp | boundary), pmus=frozenset(boundary))
        )
    # PMU-PMU edges form their own partitions so every branch is covered
    for br in model.branches:
        if br.from_bus in pmu_set and br.to_bus in pmu_set:
            pair = frozenset({br.from_bus, br.to_bus})
            partitions.append(Partition(buses=pair, pmus=pair))
    # isolated single-bus feeder with a PMU
    covered = set().union(*(p.buses for p in partitions)) if partitions else set()
    for b in range(model.n_buses):
        if b not in covered:
            partitions.append(Partition(buses=frozenset({b}), pmus=frozenset({b} & pmu_set)))
    return partitions


def _hop_diameter(model: FeederModel, buses: frozenset) -> int:
    """All-pairs max hop distance on the induced subgraph (tree-exact)."""
    if len(buses) <= 1:
        return 0
    best = 0
    for a in buses:
        dist = {a: 0}
        stack = [a]
        while stack:
            u = stack.pop()
            for v in model.neighbors(u):
                if v in buses and v not in dist:
                    dist[v] = dist[u] + 1
                    stack.append(v)
        best = max(best, max(dist.values()))
    return best


def resolution_depth(model: FeederModel, part: Partition) -> int:
    """Layer index after which the partition's buses are fully resolved."""
    hop = _hop_diameter(model, part.buses)
    if len(part.buses) == 1:
        return 0
    if part.buses == part.pmus:
        return hop
    return max(hop, 2)


def partition_diameters(partitions, model: FeederModel) -> list:
    """Per-partition resolution depth (hop diameter with the non-PMU floor)."""
    return [resolution_depth(model, p) for p in partitions]


def build_mask_plan(
    model: FeederModel,
    partitions,
    block_width: int = 8,
    prune: bool = True,
) -> MaskPlan:
    """Masks and output routing for a pruned (or unpruned) network.

    With ``prune=False`` every layer keeps the full adjacency pattern and
    all buses exit at the last layer (the unpruned physics-aware variant).
    """
    if block_width < 1:
        raise ValueError("block_width must be >= 1")
    n = model.n_buses
    adjacency = model.adjacency_pattern()
    depths = [resolution_depth(model, p) for p in partitions]
    hops = [_hop_diameter(model, p.buses) for p in partitions]
    depth = max(1, max(depths, default=1))

    exit_layer = np.zeros(n, dtype=int)
    for part, d in zip(partitions, depths):
        for b in part.buses:
            exit_layer[b] = max(exit_layer[b], d)
    exit_layer = np.maximum(exit_layer, 1)

    if not prune:
        return MaskPlan(
            adjacency=adjacency,
            depth=depth,
            masks=[adjacency.copy() for _ in range(depth)],
            exit_layer=np.full(n, depth, dtype=int),
            block_width=block_width,
            pruned=False,
        )

    masks = []
    for t in range(1, depth + 1):
        mask = np.zeros((n, n), dtype=bool)
        for part, hop in zip(partitions, hops):
            if t <= hop:
                for i in part.buses:
                    for j in part.buses:
                        if i != j and adjacency[i, j]:
                            mask[i, j] = True
        for b in range(n):
            if t <= exit_layer[b]:
                mask[b, b] = True
        masks.append(mask)
    return MaskPlan(
        adjacency=adjacency,
        depth=depth,
        masks=masks,
        exit_layer=exit_layer,
        block_width=block_width,
        pruned=True,
    )


def count_params(plan: MaskPlan) -> ParamCount:
    """Unmasked weight + bias counts for the pruned plan and its unpruned twin.

    Each allowed bus pair contributes an F x F block; each bus with any
    allowed incoming entry at a layer contributes F biases.
    """
    f = plan.block_width

    def layer_params(mask):
        weights = int(mask.sum()) * f * f
        biases = int(mask.any(axis=1).sum()) * f
        return weights + biases

    pawnn = plan.depth * layer_params(plan.adjacency)
    pruned = sum(layer_params(m) for m in plan.masks)
    return ParamCount(pawnn_params=pawnn, p2n2_params=pruned)


def export_mask_plan(plan: MaskPlan, path) -> None:
    """Portable sparse export: per-layer (layer, from, to) triplets + routing."""
    doc = {
        "n_buses": plan.n_buses,
        "depth": plan.depth,
        "block_width": plan.block_width,
        "pruned": plan.pruned,
        "exit_layer": plan.exit_layer.tolist(),
        "entries": [
            [t + 1, int(i), int(j)]
            for t, mask in enumerate(plan.masks)
            for i, j in zip(*np.nonzero(mask))
        ],
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)


def load_mask_plan(path) -> MaskPlan:
    with open(path) as fh:
        doc = json.load(fh)
    n = doc["n_buses"]
    masks = [np.zeros((n, n), dtype=bool) for _ in range(doc["depth"])]
    for t, i, j in doc["entries"]:
        masks[t - 1][i, j] = True
    adjacency = masks[0].copy()
    return MaskPlan(
        adjacency=adjacency,
        depth=doc["depth"],
        masks=masks,
        exit_layer=np.array(doc["exit_layer"], dtype=int),
        block_width=doc["block_width"],
        pruned=doc["pruned"],
    )
