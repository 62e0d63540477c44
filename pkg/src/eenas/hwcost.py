"""Analytical cost engine for a heterogeneous multi-core edge accelerator.

The modeled device has identical systolic compute cores (a rows x cols MAC
array mapping output x input channels), an optional pooling core, an optional
SIMD core for elementwise work, a per-core SRAM scratchpad, one off-chip link
shared at a fixed bits/cycle rate, and a hop-counted NoC.

Per layer: array utilization follows from how the channel dimensions tile
the array; compute cycles are MACs over the effective throughput; off-chip
streaming (weights always, activations when not locally resident) stalls the
layer; compute and streaming overlap under double buffering while NoC
transfers serialize. Energy sums MAC work (quadratic in bit width), SRAM
staging of incoming data, off-chip traffic, and per-hop NoC traffic.

Energy-latency products over a set of layers always take the form
(sum of energies) * (sum of cycles) over exactly that set.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .arch import EennArchitecture
from .workload import LayerGraph, LayerNode, expand_layers


class CostModelError(ValueError):
    """Invalid accelerator description or cost query."""


def _ceil_div(a: int, b: int) -> int:
    return -(-a // b)


@dataclass(frozen=True)
class AcceleratorSpec:
    """Accelerator description. Defaults model a quad-core edge tensor
    accelerator: 4 x 512 MACs/cycle (16x32 arrays), pooling and SIMD cores,
    2 MiB SRAM per core, a 64 bits/cycle off-chip link. Energy constants are
    literature-scaled placeholders, fully configurable."""

    compute_cores: int = 4
    macs_per_cycle: int = 512
    array_rows: int = 16
    array_cols: int = 32
    pool_core: bool = True
    simd_core: bool = True
    sram_bytes_per_core: int = 2 * 1024 * 1024
    offchip_bits_per_cycle: int = 64
    noc_bits_per_cycle: int = 64
    e_mac8_pj: float = 0.2
    e_sram_pj_bit: float = 0.05
    e_dram_pj_bit: float = 3.0
    e_noc_pj_bit_hop: float = 0.1
    hop_table: tuple[tuple[int, ...], ...] | None = None

    def __post_init__(self):
        positive = (
            self.compute_cores,
            self.macs_per_cycle,
            self.array_rows,
            self.array_cols,
            self.sram_bytes_per_core,
            self.offchip_bits_per_cycle,
            self.noc_bits_per_cycle,
        )
        if any(v < 1 for v in positive):
            raise CostModelError("counts and bandwidths must be positive")
        if any(
            not (v > 0)
            for v in (
                self.e_mac8_pj,
                self.e_sram_pj_bit,
                self.e_dram_pj_bit,
                self.e_noc_pj_bit_hop,
            )
        ):
            raise CostModelError("energy constants must be positive")
        if self.array_rows * self.array_cols != self.macs_per_cycle:
            raise CostModelError("array rows*cols must equal MACs per cycle")
        if self.hop_table is not None:
            n = self.n_cores
            if len(self.hop_table) != n or any(len(r) != n for r in self.hop_table):
                raise CostModelError("hop table must be n_cores x n_cores")
            for i in range(n):
                if self.hop_table[i][i] != 0:
                    raise CostModelError("hop table diagonal must be zero")
                if any(h < 1 for j, h in enumerate(self.hop_table[i]) if j != i):
                    raise CostModelError("off-diagonal hop counts must be >= 1")

    @property
    def n_cores(self) -> int:
        return self.compute_cores + int(self.pool_core) + int(self.simd_core)

    @property
    def sram_bits(self) -> int:
        return self.sram_bytes_per_core * 8

    def core_kind(self, core: int) -> str:
        if 0 <= core < self.compute_cores:
            return "compute"
        pool_id = self.compute_cores
        if self.pool_core and core == pool_id:
            return "pool"
        simd_id = self.compute_cores + int(self.pool_core)
        if self.simd_core and core == simd_id:
            return "simd"
        raise CostModelError(f"no core with id {core}")

    def hops(self, src: int, dst: int) -> int:
        if src == dst:
            return 0
        if self.hop_table is not None:
            return self.hop_table[src][dst]
        return 1

    def compatible_cores(self, layer_kind: str) -> tuple[int, ...]:
        if layer_kind in ("conv", "depthwise-conv", "linear"):
            return tuple(range(self.compute_cores))
        if layer_kind == "pool":
            if not self.pool_core:
                raise CostModelError("no pooling core for a pool layer")
            return (self.compute_cores,)
        if layer_kind in ("elementwise-add", "softmax"):
            if not self.simd_core:
                raise CostModelError(f"no SIMD core for a {layer_kind} layer")
            return (self.compute_cores + int(self.pool_core),)
        raise CostModelError(f"unknown layer kind {layer_kind!r}")

    def e_mac_pj(self, bits: int) -> float:
        return self.e_mac8_pj * (bits / 8.0) ** 2

    def to_json(self) -> dict:
        data = {
            "compute_cores": self.compute_cores,
            "macs_per_cycle": self.macs_per_cycle,
            "array_rows": self.array_rows,
            "array_cols": self.array_cols,
            "pool_core": self.pool_core,
            "simd_core": self.simd_core,
            "sram_bytes_per_core": self.sram_bytes_per_core,
            "offchip_bits_per_cycle": self.offchip_bits_per_cycle,
            "noc_bits_per_cycle": self.noc_bits_per_cycle,
            "e_mac8_pj": self.e_mac8_pj,
            "e_sram_pj_bit": self.e_sram_pj_bit,
            "e_dram_pj_bit": self.e_dram_pj_bit,
            "e_noc_pj_bit_hop": self.e_noc_pj_bit_hop,
        }
        if self.hop_table is not None:
            data["hop_table"] = [list(r) for r in self.hop_table]
        return data

    @classmethod
    def from_json(cls, data: dict) -> "AcceleratorSpec":
        kwargs = dict(data)
        if "hop_table" in kwargs and kwargs["hop_table"] is not None:
            kwargs["hop_table"] = tuple(tuple(int(h) for h in r) for r in kwargs["hop_table"])
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise CostModelError(f"bad accelerator field: {exc}") from exc

    @classmethod
    def load(cls, path: str) -> "AcceleratorSpec":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


@dataclass(frozen=True)
class TensorSource:
    """Where one of a layer's input tensors lives: a producing core, or
    off-chip when ``core`` is None."""

    bits: int
    core: int | None


@dataclass(frozen=True)
class LayerCost:
    """Energy/latency of one layer on one core, with the full breakdown."""

    energy_pj: float
    cycles: int
    compute_energy_pj: float
    sram_energy_pj: float
    dram_energy_pj: float
    noc_energy_pj: float
    compute_cycles: int
    stall_cycles: int
    transfer_cycles: int
    utilization: float
    spilled: bool = False


def array_utilization(layer: LayerNode, spec: AcceleratorSpec) -> float:
    """Fraction of the MAC array doing useful work. Output channels map to
    rows, input channels to columns; depthwise layers feed a single input
    channel per output, leaving the columns idle. Non-matrix layers use
    their core fully."""
    if layer.kind not in ("conv", "depthwise-conv", "linear"):
        return 1.0
    cin, cout = _matrix_dims(layer)
    r = _ceil_div(cout, spec.array_rows)
    c = _ceil_div(cin, spec.array_cols)
    return (cout / (spec.array_rows * r)) * (cin / (spec.array_cols * c))


def _matrix_dims(layer: LayerNode) -> tuple[int, int]:
    if layer.kind == "conv":
        return layer.input_shape[-1], layer.output_shape[-1]
    if layer.kind == "depthwise-conv":
        return 1, layer.output_shape[-1]
    if layer.kind == "linear":
        return layer.input_shape[0], layer.output_shape[0]
    raise CostModelError(f"{layer.kind} has no matrix mapping")


def layer_cost(
    layer: LayerNode,
    core: int,
    spec: AcceleratorSpec,
    inputs: Sequence[TensorSource],
) -> LayerCost:
    """Cost of running ``layer`` on ``core`` given where its inputs live.

    Weights always stream from off-chip. Inputs resident on the same core
    are free; inputs from another core cross the NoC and are staged into
    SRAM; off-chip inputs stream over the shared link. If the working set
    exceeds the scratchpad, activations fall back to full off-chip
    streaming (flagged, never an error).
    """
    kind = spec.core_kind(core)
    needed = spec.compatible_cores(layer.kind)
    if core not in needed:
        raise CostModelError(
            f"layer kind {layer.kind!r} cannot run on a {kind} core"
        )

    if layer.macs:
        cin, cout = _matrix_dims(layer)
        r = _ceil_div(cout, spec.array_rows)
        c = _ceil_div(cin, spec.array_cols)
        # ceil(MACs / (macs_per_cycle * utilization)), kept in integers.
        compute_cycles = _ceil_div(layer.macs * r * c, cout * cin)
    else:
        compute_cycles = 0

    weight_bits = layer.params * layer.bits
    dram_bits = weight_bits
    sram_bits = weight_bits
    noc_bit_hops = 0
    act_in_bits = 0
    for src in inputs:
        act_in_bits += src.bits
        if src.core is None:
            dram_bits += src.bits
            sram_bits += src.bits
        elif src.core != core:
            noc_bit_hops += src.bits * spec.hops(src.core, core)
            sram_bits += src.bits
    out_bits = layer.output_bits

    spilled = act_in_bits + out_bits + weight_bits > spec.sram_bits
    if spilled:
        # Working set exceeds the scratchpad: stream all activations
        # through off-chip memory instead of holding them locally.
        dram_bits = weight_bits + act_in_bits + out_bits
        sram_bits = dram_bits
        noc_bit_hops = 0

    stall_cycles = _ceil_div(dram_bits, spec.offchip_bits_per_cycle) if dram_bits else 0
    transfer_cycles = (
        _ceil_div(noc_bit_hops, spec.noc_bits_per_cycle) if noc_bit_hops else 0
    )

    compute_energy = layer.macs * spec.e_mac_pj(layer.bits)
    sram_energy = sram_bits * spec.e_sram_pj_bit
    dram_energy = dram_bits * spec.e_dram_pj_bit
    noc_energy = noc_bit_hops * spec.e_noc_pj_bit_hop

    return LayerCost(
        energy_pj=compute_energy + sram_energy + dram_energy + noc_energy,
        cycles=max(compute_cycles, stall_cycles) + transfer_cycles,
        compute_energy_pj=compute_energy,
        sram_energy_pj=sram_energy,
        dram_energy_pj=dram_energy,
        noc_energy_pj=noc_energy,
        compute_cycles=compute_cycles,
        stall_cycles=stall_cycles,
        transfer_cycles=transfer_cycles,
        utilization=array_utilization(layer, spec),
        spilled=spilled,
    )


@dataclass(frozen=True)
class TransferRecord:
    producer: int
    consumer: int
    bits: int
    hops: int


@dataclass(frozen=True)
class AllocationPlan:
    """Layer-to-core assignment with a dependency-respecting schedule."""

    assignment: tuple[int, ...]
    start: tuple[int, ...]
    end: tuple[int, ...]
    transfers: tuple[TransferRecord, ...]
    makespan: int
    layer_costs: tuple[LayerCost, ...]


def _input_sources(
    graph: LayerGraph, idx: int, cores: Sequence[int]
) -> list[TensorSource]:
    producers = graph.producers(idx)
    if not producers:
        node = graph.nodes[idx]
        elems = 1
        for d in node.input_shape:
            elems *= d
        return [TensorSource(bits=elems * node.bits, core=None)]
    return [
        TensorSource(bits=graph.nodes[p].output_bits, core=cores[p])
        for p in producers
    ]


def schedule(
    graph: LayerGraph, spec: AcceleratorSpec, assignment: Sequence[int]
) -> AllocationPlan:
    """Schedule a fixed assignment: each layer starts when its core is free
    and its producers have finished."""
    if len(assignment) != len(graph.nodes):
        raise CostModelError("assignment length must match the node count")
    cores = list(assignment)
    free = [0] * spec.n_cores
    start = [0] * len(graph.nodes)
    end = [0] * len(graph.nodes)
    costs: list[LayerCost] = []
    transfers: list[TransferRecord] = []
    for idx, node in enumerate(graph.nodes):
        core = cores[idx]
        cost = layer_cost(node, core, spec, _input_sources(graph, idx, cores))
        ready = max((end[p] for p in graph.producers(idx)), default=0)
        start[idx] = max(free[core], ready)
        end[idx] = start[idx] + cost.cycles
        free[core] = end[idx]
        costs.append(cost)
        for p in graph.producers(idx):
            if cores[p] != core:
                transfers.append(
                    TransferRecord(
                        producer=p,
                        consumer=idx,
                        bits=graph.nodes[p].output_bits,
                        hops=spec.hops(cores[p], core),
                    )
                )
    return AllocationPlan(
        assignment=tuple(cores),
        start=tuple(start),
        end=tuple(end),
        transfers=tuple(transfers),
        makespan=max(end, default=0),
        layer_costs=tuple(costs),
    )


def _greedy_assignment(graph: LayerGraph, spec: AcceleratorSpec) -> list[int]:
    cores = [-1] * len(graph.nodes)
    free = [0] * spec.n_cores
    end = [0] * len(graph.nodes)
    for idx, node in enumerate(graph.nodes):
        best_core = -1
        best_finish = None
        ready = max((end[p] for p in graph.producers(idx)), default=0)
        for core in spec.compatible_cores(node.kind):
            cost = layer_cost(node, core, spec, _input_sources(graph, idx, cores))
            finish = max(free[core], ready) + cost.cycles
            if best_finish is None or finish < best_finish:
                best_finish = finish
                best_core = core
        cores[idx] = best_core
        end[idx] = best_finish
        free[best_core] = best_finish
    return cores


def allocate(
    graph: LayerGraph,
    spec: AcceleratorSpec,
    mode: str = "greedy",
    seed: int = 0,
    generations: int = 24,
    population: int = 16,
) -> AllocationPlan:
    """Assign layers to cores and schedule them.

    Greedy mode places each layer on the compatible core finishing it
    earliest (ties to the lowest core id). Genetic mode refines whole
    assignment vectors against the schedule makespan with a seeded GA whose
    initial population contains the greedy solution, so it never does worse.
    Both modes are deterministic.
    """
    if not graph.nodes:
        raise CostModelError("cannot allocate an empty graph")
    greedy = _greedy_assignment(graph, spec)
    if mode == "greedy":
        return schedule(graph, spec, greedy)
    if mode != "genetic":
        raise CostModelError(f"unknown allocation mode {mode!r}")

    choices = [spec.compatible_cores(n.kind) for n in graph.nodes]
    if all(len(c) == 1 for c in choices):
        return schedule(graph, spec, greedy)
    rng = np.random.default_rng(seed)

    def random_assignment() -> list[int]:
        return [c[int(rng.integers(0, len(c)))] for c in choices]

    def fitness(assign: list[int]) -> int:
        return schedule(graph, spec, assign).makespan

    pool = [greedy] + [random_assignment() for _ in range(population - 1)]
    scores = [fitness(a) for a in pool]
    mutation = 1.0 / len(graph.nodes)
    for _ in range(generations):
        order = sorted(range(len(pool)), key=lambda i: (scores[i], i))
        elite = [pool[order[0]], pool[order[1]]]
        children = list(elite)
        while len(children) < population:
            picks = rng.integers(0, len(pool), size=3)
            pa = pool[min(picks, key=lambda i: (scores[i], i))]
            picks = rng.integers(0, len(pool), size=3)
            pb = pool[min(picks, key=lambda i: (scores[i], i))]
            child = [
                pa[g] if rng.random() < 0.5 else pb[g] for g in range(len(pa))
            ]
            for g, opts in enumerate(choices):
                if len(opts) > 1 and rng.random() < mutation:
                    child[g] = opts[int(rng.integers(0, len(opts)))]
            children.append(child)
        pool = children
        scores = [fitness(a) for a in pool]
    best = min(range(len(pool)), key=lambda i: (scores[i], i))
    return schedule(graph, spec, pool[best])


def et_subnetwork(
    costs: Sequence[LayerCost], graph: LayerGraph, exit_index: int
) -> float:
    """Energy-delay product of everything executed up to ``exit_index``:
    (sum of E_k) * (sum of T_k) over the backbone to its mount plus every
    head through that exit."""
    needed = graph.nodes_for_exit(exit_index)
    if len(costs) != len(graph.nodes) or any(costs[i] is None for i in needed):
        raise CostModelError("per-layer costs missing for the requested exit")
    energy = sum(costs[i].energy_pj for i in needed)
    cycles = sum(costs[i].cycles for i in needed)
    return energy * cycles


def et_avg(et_per_exit: Sequence[float], exit_ratios: Sequence[float]) -> float:
    """Exit-ratio-weighted mean energy-delay product."""
    if len(et_per_exit) != len(exit_ratios):
        raise CostModelError("need one exit ratio per exit")
    total = math.fsum(exit_ratios)
    if abs(total - 1.0) > 1e-9 or any(r < 0 for r in exit_ratios):
        raise CostModelError("exit ratios must be nonnegative and sum to 1")
    return math.fsum(e * r for e, r in zip(et_per_exit, exit_ratios))


def overhead_ratio(
    costs: Sequence[LayerCost], graph: LayerGraph, exit_index: int
) -> float:
    """Energy-delay product of exit ``i``'s head over that of the backbone
    segment between mounts ``i`` and ``i+1``. A zero-cost segment reports
    infinite overhead (it can never satisfy a finite cap)."""
    m = graph.exit_count
    if not 1 <= exit_index <= m - 1:
        raise CostModelError("overhead is defined for exits 1..m-1")
    head = graph.head_nodes(exit_index)
    segment = graph.backbone_segment(exit_index + 1)
    head_et = sum(costs[i].energy_pj for i in head) * sum(
        costs[i].cycles for i in head
    )
    seg_et = sum(costs[i].energy_pj for i in segment) * sum(
        costs[i].cycles for i in segment
    )
    if seg_et == 0:
        return math.inf
    return head_et / seg_et


@dataclass(frozen=True)
class HwCostReport:
    """Full cost picture of one architecture on one accelerator."""

    graph: LayerGraph
    layer_costs: tuple[LayerCost, ...]
    et_per_exit: tuple[float, ...]
    et_avg: float | None
    overheads: tuple[float, ...]
    plan: AllocationPlan

    @property
    def max_overhead(self) -> float:
        return max(self.overheads, default=0.0)


def cost_report(
    arch: EennArchitecture,
    spec: AcceleratorSpec,
    exit_ratios: Sequence[float] | None = None,
    mode: str = "greedy",
    num_classes: int = 10,
    seed: int = 0,
) -> HwCostReport:
    """Expand, allocate, and aggregate: per-layer costs, per-exit
    energy-delay products, head overheads, and (given exit ratios) the
    weighted average."""
    graph = expand_layers(arch, num_classes=num_classes)
    plan = allocate(graph, spec, mode=mode, seed=seed)
    costs = plan.layer_costs
    m = graph.exit_count
    et_values = tuple(et_subnetwork(costs, graph, i) for i in range(1, m + 1))
    overheads = tuple(overhead_ratio(costs, graph, i) for i in range(1, m))
    avg = et_avg(et_values, exit_ratios) if exit_ratios is not None else None
    return HwCostReport(
        graph=graph,
        layer_costs=costs,
        et_per_exit=et_values,
        et_avg=avg,
        overheads=overheads,
        plan=plan,
    )
