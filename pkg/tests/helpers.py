"""Shared builders and independent oracles for the test suite."""

import numpy as np

from eenas.arch import BackboneSpec, BlockSpec
from eenas.hwcost import LayerCost
from eenas.workload import LayerGraph, LayerNode


def chain_backbone(n_mounts: int, channels: int = 8, size: int = 8) -> BackboneSpec:
    """A plain conv chain with one mounting point after each labeled block;
    n_mounts - 1 optional mounts plus the final one."""
    blocks = [BlockSpec("conv2d", 1, channels, 1)]
    blocks += [
        BlockSpec("conv2d", 1, channels, 1, (f"M{i}",)) for i in range(n_mounts)
    ]
    return BackboneSpec(
        blocks=tuple(blocks), input_shape=(size, size, 3), kernel=3, padding=1
    )


def spearman(a, b) -> float:
    ra = np.argsort(np.argsort(np.asarray(a)))
    rb = np.argsort(np.argsort(np.asarray(b)))
    return float(np.corrcoef(ra, rb)[0, 1])


def flat_cost(energy: float, cycles: int) -> LayerCost:
    """A LayerCost carrying only totals, for aggregation-level tests."""
    return LayerCost(
        energy_pj=energy,
        cycles=cycles,
        compute_energy_pj=energy,
        sram_energy_pj=0.0,
        dram_energy_pj=0.0,
        noc_energy_pj=0.0,
        compute_cycles=cycles,
        stall_cycles=0,
        transfer_cycles=0,
        utilization=1.0,
    )


def staged_graph(backbone_macs, head_macs, bits: int = 8) -> LayerGraph:
    """A hand-built graph of one backbone conv per stage with a one-node
    head after each stage; stage i belongs to exit i+1."""
    assert len(backbone_macs) == len(head_macs)
    nodes = []
    edges = []
    prev = -1
    for i, (bm, hm) in enumerate(zip(backbone_macs, head_macs), start=1):
        nodes.append(
            LayerNode(
                name=f"s{i}.conv",
                kind="conv",
                input_shape=(4, 4, 8),
                output_shape=(4, 4, 8),
                macs=bm,
                params=16,
                bits=bits,
                owner=("backbone", i),
            )
        )
        trunk = len(nodes) - 1
        if prev >= 0:
            edges.append((prev, trunk))
        nodes.append(
            LayerNode(
                name=f"x{i}.fc",
                kind="linear",
                input_shape=(128,),
                output_shape=(10,),
                macs=hm,
                params=hm + 10,
                bits=bits,
                owner=("exit", i),
            )
        )
        edges.append((trunk, len(nodes) - 1))
        prev = trunk
    return LayerGraph(nodes=tuple(nodes), edges=tuple(edges))


def conv_macs_elementwise(h, w, cin, cout, kernel, stride, padding) -> int:
    """Count MACs one kernel tap at a time (padding taps included, as in
    standard MAC accounting)."""
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    total = 0
    for _y in range(ho):
        for _x in range(wo):
            for _co in range(cout):
                for _ky in range(kernel):
                    for _kx in range(kernel):
                        for _ci in range(cin):
                            total += 1
    return total


def depthwise_macs_elementwise(h, w, channels, kernel, stride, padding) -> int:
    ho = (h + 2 * padding - kernel) // stride + 1
    wo = (w + 2 * padding - kernel) // stride + 1
    total = 0
    for _y in range(ho):
        for _x in range(wo):
            for _c in range(channels):
                for _ky in range(kernel):
                    for _kx in range(kernel):
                        total += 1
    return total


def linear_macs_elementwise(n_in, n_out) -> int:
    total = 0
    for _o in range(n_out):
        for _i in range(n_in):
            total += 1
    return total
