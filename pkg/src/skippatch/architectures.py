"""Layer graphs for the mask generator, the U-Net generator and the patch discriminators.

A :class:`LayerGraph` is the single description used both to run a network and
to analyse its receptive fields. Convolution layers carry their own
normalization and activation, applied in that order after the convolution.

Text form (``LayerGraph.to_text``), one layer per line, whitespace separated::

    id  kind  k  s  l,r,t,b  ch  norm  act  inputs

``inputs`` is a comma-separated id list or ``-``; ``ch`` is ``0`` for layers
that inherit their channel count. Lines starting with ``#`` are comments. The
last layer is the network output.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import SeededRng

KINDS = ("input", "conv", "conv_transpose", "concat", "instance_norm", "pointwise", "channel_softmax")
NORMS = ("none", "instance")
ACTIVATIONS = ("none", "relu", "leaky_relu", "sigmoid", "softmax")
LEAKY_SLOPE = 0.2
INIT_STD = 0.02
NOISE_CHANNELS = 8
MASK_SCHEDULE = (256, 256, 128, 64, 32, 3)
SAME_K4 = (1, 2, 1, 2)


@dataclass(frozen=True)
class LayerSpec:
    id: str
    kind: str
    k: int = 1
    stride: int = 1
    pad: tuple[int, int, int, int] = (0, 0, 0, 0)
    out_channels: int = 0
    norm: str = "none"
    activation: str = "none"
    inputs: tuple[str, ...] = ()

    @property
    def is_conv(self) -> bool:
        return self.kind in ("conv", "conv_transpose")


@dataclass(frozen=True)
class LayerGraph:
    name: str
    layers: tuple[LayerSpec, ...]
    channels: dict = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        chans: dict[str, int] = {}
        for layer in self.layers:
            if layer.kind not in KINDS:
                raise ValueError(f"layer {layer.id}: unknown kind {layer.kind!r}")
            if layer.norm not in NORMS:
                raise ValueError(f"layer {layer.id}: unknown norm {layer.norm!r}")
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {layer.id}: unknown activation {layer.activation!r}")
            if layer.id in chans:
                raise ValueError(f"duplicate layer id {layer.id!r}")
            for src in layer.inputs:
                if src not in chans:
                    raise ValueError(f"layer {layer.id}: input {src!r} is not defined before it")
            if layer.kind == "input":
                if layer.inputs or layer.out_channels < 1:
                    raise ValueError(f"input layer {layer.id} needs channels and no inputs")
                chans[layer.id] = layer.out_channels
                continue
            if not layer.inputs:
                raise ValueError(f"layer {layer.id} has no inputs")
            if layer.kind == "concat":
                ch = sum(chans[s] for s in layer.inputs)
            else:
                if len(layer.inputs) != 1:
                    raise ValueError(f"layer {layer.id}: kind {layer.kind} takes exactly one input")
                ch = layer.out_channels if layer.is_conv else chans[layer.inputs[0]]
            if layer.is_conv and (layer.out_channels < 1 or layer.k < 1 or layer.stride < 1):
                raise ValueError(f"layer {layer.id}: conv needs positive k, stride and channels")
            if layer.kind == "conv_transpose" and len(set(layer.pad)) != 1:
                raise ValueError(f"layer {layer.id}: transposed conv padding must be symmetric, got {layer.pad}")
            if not layer.is_conv and layer.out_channels not in (0, ch):
                raise ValueError(f"layer {layer.id}: declares {layer.out_channels} channels, inputs give {ch}")
            chans[layer.id] = ch
        if not self.layers or self.layers[-1].kind == "input":
            raise ValueError("graph needs an output layer")
        object.__setattr__(self, "channels", chans)

    @property
    def output(self) -> str:
        return self.layers[-1].id

    @property
    def input_ids(self) -> list[str]:
        return [l.id for l in self.layers if l.kind == "input"]

    def layer(self, layer_id: str) -> LayerSpec:
        for l in self.layers:
            if l.id == layer_id:
                return l
        raise KeyError(layer_id)

    def conv_layers(self) -> list[LayerSpec]:
        return [l for l in self.layers if l.is_conv]

    def in_channels(self, layer: LayerSpec) -> int:
        return sum(self.channels[s] for s in layer.inputs)

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for l in self.conv_layers():
            cin = self.in_channels(l)
            if l.kind == "conv":
                shapes[f"{l.id}.weight"] = (l.out_channels, cin, l.k, l.k)
            else:
                shapes[f"{l.id}.weight"] = (cin, l.out_channels, l.k, l.k)
            shapes[f"{l.id}.bias"] = (l.out_channels,)
        return shapes

    def param_count(self) -> int:
        return sum(int(np.prod(s)) for s in self.param_shapes().values())

    def to_text(self) -> str:
        lines = [f"# graph {self.name}", "# id kind k s l,r,t,b ch norm act inputs"]
        for l in self.layers:
            pad = ",".join(str(p) for p in l.pad)
            ins = ",".join(l.inputs) if l.inputs else "-"
            lines.append(f"{l.id} {l.kind} {l.k} {l.stride} {pad} {l.out_channels} {l.norm} {l.activation} {ins}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, name: str = "graph") -> "LayerGraph":
        layers = []
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# graph "):
                    name = line[len("# graph "):].strip()
                continue
            parts = line.split()
            if len(parts) != 9:
                raise ValueError(f"line {lineno}: expected 9 fields, got {len(parts)}: {raw!r}")
            lid, kind, k, s, pad, ch, norm, act, ins = parts
            try:
                pads = tuple(int(p) for p in pad.split(","))
                if len(pads) != 4:
                    raise ValueError
                layers.append(LayerSpec(lid, kind, int(k), int(s), pads, int(ch), norm, act,
                                        () if ins == "-" else tuple(ins.split(","))))
            except ValueError as exc:
                raise ValueError(f"line {lineno}: malformed layer {raw!r}") from exc
        return cls(name, tuple(layers))


def _conv(lid, src, ch, k=4, s=2, pad=(1, 1, 1, 1), norm="instance", act="leaky_relu"):
    return LayerSpec(lid, "conv", k, s, tuple(pad), ch, norm, act, (src,))


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def build_mask_generator(resolution: int = 512, noise_side: int = 8) -> LayerGraph:
    """Noise ``8 × s × s`` to a 3-channel per-pixel simplex at ``resolution``."""
    ratio, rem = divmod(resolution, noise_side)
    if rem or not _is_pow2(ratio) or ratio < 2:
        raise ValueError(f"resolution {resolution} must be noise_side ({noise_side}) times 2^d, d >= 1")
    depth = ratio.bit_length() - 1
    if depth > len(MASK_SCHEDULE):
        raise ValueError(f"resolution {resolution} needs {depth} upsampling blocks; at most "
                         f"{len(MASK_SCHEDULE)} are defined")
    schedule = MASK_SCHEDULE[-depth:]
    layers = [LayerSpec("z", "input", out_channels=NOISE_CHANNELS)]
    src = "z"
    for i, ch in enumerate(schedule, 1):
        last = i == depth
        layers.append(LayerSpec(f"up{i}", "conv_transpose", 4, 2, (1, 1, 1, 1), ch,
                                "none" if last else "instance", "softmax" if last else "relu", (src,)))
        src = f"up{i}"
    return LayerGraph(f"mask_generator_r{resolution}", tuple(layers))


def build_unet_generator(resolution: int = 512, base_channels: int = 16, in_channels: int = 3) -> LayerGraph:
    """U-Net from a mask to a 1-channel image in (0, 1)."""
    if not _is_pow2(resolution) or resolution < 8:
        raise ValueError(f"U-Net resolution must be a power of two >= 8, got {resolution}")
    levels = resolution.bit_length() - 1
    chans = [min(base_channels * 2 ** i, base_channels * 32) for i in range(levels)]
    layers = [LayerSpec("x", "input", out_channels=in_channels)]
    src = "x"
    for i in range(levels):
        # first block and the 1x1 bottleneck stay un-normalized
        norm = "none" if i in (0, levels - 1) else "instance"
        layers.append(_conv(f"enc{i + 1}", src, chans[i], norm=norm))
        src = f"enc{i + 1}"
    for i in range(levels - 2, -1, -1):
        layers.append(LayerSpec(f"dec{i + 1}", "conv_transpose", 4, 2, (1, 1, 1, 1), chans[i],
                                "instance", "relu", (src,)))
        layers.append(LayerSpec(f"cat{i + 1}", "concat", inputs=(f"dec{i + 1}", f"enc{i + 1}")))
        src = f"cat{i + 1}"
    layers.append(LayerSpec("out", "conv_transpose", 4, 2, (1, 1, 1, 1), 1, "none", "sigmoid", (src,)))
    return LayerGraph(f"unet_r{resolution}_b{base_channels}", tuple(layers))


def _check_disc_resolution(resolution: int) -> None:
    if resolution < 8 or resolution % 8:
        raise ValueError(f"discriminator resolution must be a positive multiple of 8, got {resolution}")


def build_patch_discriminator(variant: str = "p70", in_channels: int = 3, resolution: int = 512) -> LayerGraph:
    _check_disc_resolution(resolution)
    layers = [LayerSpec("x", "input", out_channels=in_channels), _conv("T1", "x", 16, norm="none")]
    if variant == "p70":
        layers += [
            _conv("T2", "T1", 32),
            _conv("T3", "T2", 64),
            _conv("T4", "T3", 64, s=1, pad=SAME_K4),
            _conv("T5", "T4", 64, s=1, pad=SAME_K4),
            _conv("head", "T5", 1, k=1, s=1, pad=(0, 0, 0, 0), norm="none", act="sigmoid"),
        ]
    elif variant == "p16":
        layers += [
            _conv("T2", "T1", 32, k=3),
            _conv("T3", "T2", 64, k=3),
            _conv("head", "T3", 1, k=1, s=1, pad=(0, 0, 0, 0), norm="none", act="sigmoid"),
        ]
    else:
        raise ValueError(f"unknown patch variant {variant!r}; expected 'p70' or 'p16'")
    return LayerGraph(f"{variant}_c{in_channels}_r{resolution}", tuple(layers))


def build_skip_patch_discriminator(in_channels: int = 3, resolution: int = 512) -> LayerGraph:
    """Trunk of field 70 plus skip paths of field 16, 20 and 32, fused by a 1x1 head."""
    _check_disc_resolution(resolution)
    layers = (
        LayerSpec("x", "input", out_channels=in_channels),
        _conv("T1", "x", 16, norm="none"),
        _conv("T2", "T1", 32),
        _conv("T3", "T2", 64),
        _conv("T4", "T3", 64, s=1, pad=SAME_K4),
        _conv("T5", "T4", 64, s=1, pad=SAME_K4),
        _conv("S1a", "T1", 16, k=3),
        _conv("S1b", "S1a", 16, k=3),
        _conv("S2", "S1a", 16, k=4),
        _conv("S3a", "S1a", 16, k=1, pad=(0, 0, 0, 0)),
        _conv("S3b", "S3a", 16, k=4, s=1, pad=SAME_K4),
        LayerSpec("fuse", "concat", inputs=("S1b", "S2", "S3b", "T5")),
        _conv("head", "fuse", 1, k=1, s=1, pad=(0, 0, 0, 0), norm="none", act="sigmoid"),
    )
    return LayerGraph(f"skip_c{in_channels}_r{resolution}", layers)


def build_discriminator(variant: str, in_channels: int, resolution: int) -> LayerGraph:
    if variant == "skip":
        return build_skip_patch_discriminator(in_channels, resolution)
    return build_patch_discriminator(variant, in_channels, resolution)


def init_params(graph: LayerGraph, rng: SeededRng, std: float = INIT_STD) -> dict[str, Tensor]:
    """Normal(0, std) kernels and zero biases, drawn in layer order."""
    params = {}
    for name, shape in graph.param_shapes().items():
        if name.endswith(".weight"):
            params[name] = Tensor(rng.normal(shape, 0.0, std), requires_grad=True)
        else:
            params[name] = Tensor(np.zeros(shape), requires_grad=True)
    return params


def _activate(x: Tensor, act: str, linear: bool) -> Tensor:
    if linear or act == "none":
        return x
    if act == "softmax":
        return ad.channel_softmax(x)
    return ad.pointwise(x, act, LEAKY_SLOPE)


def forward(graph: LayerGraph, params: Mapping[str, Tensor], inputs, linear: bool = False) -> Tensor:
    """Run ``graph`` on ``inputs`` (a tensor, or a mapping from input id to tensor).

    ``linear=True`` drops every normalization and activation; the receptive-field
    oracle runs in this mode.
    """
    if isinstance(inputs, Tensor):
        ids = graph.input_ids
        if len(ids) != 1:
            raise ValueError(f"graph {graph.name} has inputs {ids}; pass a mapping")
        inputs = {ids[0]: inputs}
    values: dict[str, Tensor] = {}
    for layer in graph.layers:
        try:
            values[layer.id] = _run_layer(graph, layer, params, inputs, values, linear)
        except ShapeError as exc:
            raise ShapeError(f"layer {layer.id!r}: {exc}") from exc
    return values[graph.output]


def _run_layer(graph, layer, params, inputs, values, linear):
    if layer.kind == "input":
        if layer.id not in inputs:
            raise ShapeError("missing network input")
        x = inputs[layer.id]
        if x.ndim not in (3, 4) or x.shape[-3] != layer.out_channels:
            raise ShapeError(f"expected {layer.out_channels} input channels, got shape {x.shape}")
        return x
    srcs = [values[s] for s in layer.inputs]
    if layer.kind == "concat":
        return ad.concat_channels(srcs)
    x = srcs[0]
    if layer.kind == "instance_norm":
        return x if linear else ad.instance_norm(x)
    if layer.kind == "pointwise":
        return _activate(x, layer.activation, linear)
    if layer.kind == "channel_softmax":
        return x if linear else ad.channel_softmax(x)
    w, b = params[f"{layer.id}.weight"], params[f"{layer.id}.bias"]
    if layer.kind == "conv":
        y = ad.conv2d(x, w, b, layer.stride, layer.pad)
    else:
        y = ad.conv_transpose2d(x, w, b, layer.stride, layer.pad[0])
    if layer.norm == "instance" and not linear:
        y = ad.instance_norm(y)
    return _activate(y, layer.activation, linear)
