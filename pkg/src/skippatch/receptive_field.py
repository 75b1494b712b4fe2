"""Receptive-field analysis of layer graphs.

``analyze`` folds the standard recurrence along every input-to-output path::

    rf'     = rf + (k - 1) * jump
    jump'   = jump * stride
    offset' = offset + ((k - 1) / 2 - pad_left) * jump

starting from ``(1, 1, 1/2)`` at the input (pixel ``i`` spans ``[i, i + 1)``).
Non-convolution nodes leave the statistics unchanged. Offsets follow the
horizontal padding; every graph built here pads rows and columns alike.

``empirical_rf`` is the independent check: it runs the graph with positive
constant kernels and no nonlinearities, backpropagates from one output pixel
and measures the bounding box of the nonzero input gradient.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .architectures import LayerGraph, forward
from .autodiff import Tape, Tensor


class GraphError(ValueError):
    pass


@dataclass(frozen=True)
class RFStat:
    rf: int
    jump: int
    offset: Fraction

    def interval(self, index: int = 0) -> tuple[Fraction, Fraction]:
        """Input-coordinate span ``[start, end)`` of output pixel ``index``."""
        center = self.offset + index * self.jump
        return center - Fraction(self.rf, 2), center + Fraction(self.rf, 2)


@dataclass(frozen=True)
class RFReport:
    paths: tuple[tuple[tuple[str, ...], RFStat], ...]

    @property
    def rf_set(self) -> list[int]:
        return sorted({s.rf for _, s in self.paths})

    @property
    def jump(self) -> int:
        return self.paths[0][1].jump

    @property
    def max_rf(self) -> int:
        return max(s.rf for _, s in self.paths)

    @property
    def union_rf(self) -> int:
        """Side of the union of all path fields for one output pixel."""
        spans = [s.interval() for _, s in self.paths]
        return int(max(e for _, e in spans) - min(s for s, _ in spans))

    def table(self) -> str:
        rows = ["path\trf\tjump\toffset"]
        for path, s in self.paths:
            rows.append(f"{'>'.join(path)}\t{s.rf}\t{s.jump}\t{s.offset}")
        rows.append("rf_set\t" + ",".join(str(r) for r in self.rf_set))
        return "\n".join(rows)


def _step(stat: RFStat, k: int, stride: int, pad_left: int) -> RFStat:
    return RFStat(stat.rf + (k - 1) * stat.jump, stat.jump * stride,
                  stat.offset + (Fraction(k - 1, 2) - pad_left) * stat.jump)


def analyze(graph: LayerGraph, exclude: Iterable[str] = ()) -> RFReport:
    """Per-path receptive fields of ``graph``; paths through ``exclude`` ids are dropped."""
    skip = set(exclude)
    per_node: dict[str, list[tuple[tuple[str, ...], RFStat]]] = {}
    for layer in graph.layers:
        if layer.id in skip:
            per_node[layer.id] = []
            continue
        if layer.kind == "input":
            per_node[layer.id] = [((layer.id,), RFStat(1, 1, Fraction(1, 2)))]
            continue
        if layer.kind == "conv_transpose":
            raise GraphError(f"layer {layer.id}: receptive-field analysis covers convolutions only")
        incoming = [(p, s) for src in layer.inputs for p, s in per_node[src]]
        if len(layer.inputs) > 1 and incoming:
            p0, s0 = incoming[0]
            for p, s in incoming[1:]:
                if s.jump != s0.jump:
                    raise GraphError(
                        f"mismatched jump at {layer.id}: path {'>'.join(p0)} has jump {s0.jump}, "
                        f"path {'>'.join(p)} has jump {s.jump}")
        if layer.kind == "conv":
            per_node[layer.id] = [(p + (layer.id,), _step(s, layer.k, layer.stride, layer.pad[0]))
                                  for p, s in incoming]
        else:
            per_node[layer.id] = [(p + (layer.id,), s) for p, s in incoming]
    paths = per_node[graph.output]
    if not paths:
        raise GraphError("no path reaches the output")
    return RFReport(tuple(paths))


@dataclass(frozen=True)
class EmpiricalRF:
    sides: tuple[tuple[int, int], ...]  # (height, width) of the gradient support, per input channel
    expected: tuple[int, int]           # analytic extent, clipped to the image
    clipped: bool

    @property
    def side(self) -> int:
        return self.sides[0][0]

    @property
    def matches(self) -> bool:
        return all(s == self.expected for s in self.sides)


def _support_params(graph: LayerGraph, zero: set[str]) -> dict[str, Tensor]:
    params = {}
    for name, shape in graph.param_shapes().items():
        lid = name.rsplit(".", 1)[0]
        if name.endswith(".weight"):
            fan = int(np.prod(shape[1:])) if graph.layer(lid).kind == "conv" else shape[0] * shape[2] * shape[3]
            value = 0.0 if lid in zero else 1.0 / fan
            params[name] = Tensor(np.full(shape, value))
        else:
            params[name] = Tensor(np.zeros(shape))
    return params


def expected_extent(report: RFReport, pixel: tuple[int, int], resolution: int) -> tuple[tuple[int, int], bool]:
    """Analytic bounding-box extent of one output pixel's field, clipped to the image."""
    extents = []
    clipped = False
    for idx in pixel:
        spans = [s.interval(idx) for _, s in report.paths]
        lo, hi = min(a for a, _ in spans), max(b for _, b in spans)
        if lo < 0 or hi > resolution:
            clipped = True
        extents.append(int(min(hi, resolution) - max(lo, 0)))
    return (extents[0], extents[1]), clipped


def empirical_rf(graph: LayerGraph, output_pixel: tuple[int, int], resolution: int,
                 zero_layers: Sequence[str] = ()) -> EmpiricalRF:
    """Measure the input support of one output pixel by backpropagation.

    Kernels of ``zero_layers`` are set to zero, isolating the remaining paths.
    """
    if len(graph.input_ids) != 1:
        raise GraphError("empirical_rf supports single-input graphs")
    zero = set(zero_layers)
    inp = graph.layer(graph.input_ids[0])
    x = Tensor(np.ones((1, inp.out_channels, resolution, resolution)), requires_grad=True)
    params = _support_params(graph, zero)
    with Tape() as tape:
        out = forward(graph, params, x, linear=True)
        r, c = output_pixel
        if not (0 <= r < out.shape[2] and 0 <= c < out.shape[3]):
            raise ValueError(f"output pixel {output_pixel} outside the {out.shape[2]}×{out.shape[3]} map")
        pick = np.zeros(out.shape)
        pick[:, :, r, c] = 1.0
        loss = ad.sum_all(ad.mul(out, Tensor(pick)))
    tape.backward(loss)

    sides = []
    for ch in range(inp.out_channels):
        nz = np.argwhere(x.grad[0, ch] > 0)
        if nz.size == 0:
            sides.append((0, 0))
            continue
        sides.append((int(nz[:, 0].max() - nz[:, 0].min() + 1), int(nz[:, 1].max() - nz[:, 1].min() + 1)))

    report = analyze(graph, exclude=zero)
    expected, clipped = expected_extent(report, output_pixel, resolution)
    return EmpiricalRF(tuple(sides), expected, clipped)
