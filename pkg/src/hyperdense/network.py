"""Multi-stream densely connected 3-D FCNs: wiring, forward/backward, parameter counts.

Blocks are named ``s{stream}L{layer}``.  ``L0`` blocks are the raw modalities
(stream ``m`` carries modality ``m``); stream ``0`` is the joint path used by
the early-fusion variants.  The fully-convolutional head is ``fc1..fcK`` and the
classifier ``cls``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .tensor import (
    ConvKernelBank,
    GradientBundle,
    center_crop,
    channel_split,
    conv3d_backward,
    conv3d_valid,
    cross_entropy_loss,
    dropout_mask,
    prelu,
    prelu_backward,
    voxel_softmax,
)

FUSION_MODES = ("single_dense", "dual_dense", "dual_single", "hyper_dense")
PERMUTATION_RULES = ("own_first", "canonical", "random")

BASE_CONV = (25, 25, 25, 50, 50, 50, 75, 75, 75)
BASE_FC = (400, 200, 150)


def block_name(stream: int, layer: int) -> str:
    return f"s{stream}L{layer}"


def parse_block(name: str) -> tuple[int, int]:
    s, l = name[1:].split("L")
    return int(s), int(l)


@dataclass(frozen=True)
class PermutationSpec:
    """Ordering of concatenated blocks per (layer, stream).

    ``own_first``: at each depth the consuming stream's block comes first, the
    remaining streams follow in ascending order.  ``canonical``: ascending
    stream order at each depth.  ``random``: a seeded shuffle of all blocks.
    Depths are always listed most recent first before the shuffle.
    """

    rule: str = "own_first"
    seed: int = 0

    def __post_init__(self):
        if self.rule not in PERMUTATION_RULES:
            raise ValueError(f"unknown permutation rule {self.rule!r}")

    def order(self, layer: int, stream: int, blocks: Sequence[tuple[int, int]]):
        blocks = sorted(blocks, key=lambda b: (-b[1], b[0]))
        if self.rule == "own_first":
            return sorted(blocks, key=lambda b: (-b[1], b[0] != stream, b[0]))
        if self.rule == "random":
            rng = np.random.default_rng([self.seed, layer, stream])
            return [blocks[i] for i in rng.permutation(len(blocks))]
        return blocks


@dataclass(frozen=True)
class ArchitectureSpec:
    fusion_mode: str = "hyper_dense"
    num_modalities: int = 2
    conv_kernels: tuple[int, ...] = BASE_CONV
    fc_kernels: tuple[int, ...] = BASE_FC
    num_classes: int = 4
    permutation: PermutationSpec = field(default_factory=PermutationSpec)
    dropout_rate: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "conv_kernels", tuple(int(k) for k in self.conv_kernels))
        object.__setattr__(self, "fc_kernels", tuple(int(k) for k in self.fc_kernels))
        if isinstance(self.permutation, str):
            object.__setattr__(self, "permutation", PermutationSpec(self.permutation))
        elif isinstance(self.permutation, dict):
            object.__setattr__(self, "permutation", PermutationSpec(**self.permutation))
        if self.fusion_mode not in FUSION_MODES:
            raise ValueError(f"unknown fusion_mode {self.fusion_mode!r}")
        if not self.conv_kernels or min(self.conv_kernels) < 1:
            raise ValueError("conv_kernels must be a non-empty list of positive integers")
        if self.fc_kernels and min(self.fc_kernels) < 1:
            raise ValueError("fc_kernels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def depth(self) -> int:
        return len(self.conv_kernels)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_kernels"] = list(self.conv_kernels)
        d["fc_kernels"] = list(self.fc_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown architecture keys: {sorted(extra)}")
        return cls(**d)


def _preset(mode, conv=BASE_CONV, fc=BASE_FC, modalities=2, classes=4):
    return ArchitectureSpec(mode, modalities, conv, fc, classes)


PRESETS: dict[str, ArchitectureSpec] = {
    "single-path": _preset("single_dense"),
    "single-path-wide": _preset("single_dense", (50, 50, 50, 75, 75, 75, 150, 150, 150)),
    "dual-path": _preset("dual_dense"),
    "dual-path-wide": _preset("dual_dense", (40, 40, 40, 70, 70, 70, 100, 100, 100)),
    "dual-single": _preset("dual_single"),
    "dual-single-wide": _preset("dual_single", (25, 50, 50, 100, 100, 100, 150, 150, 150)),
    "hyperdense-2mod": _preset("hyper_dense"),
    "hyperdense-3mod": _preset("hyper_dense", modalities=3),
    "reduced-hyperdense": _preset(
        "hyper_dense", (8, 8, 8, 12, 12, 12, 16, 16, 16), (64, 32, 16)
    ),
}


def tiny_spec(fusion_mode="hyper_dense", num_modalities=2, **kw) -> ArchitectureSpec:
    """Three 2-kernel conv layers, one 4-kernel fc layer, two classes (7^3 -> 1^3)."""
    return ArchitectureSpec(fusion_mode, num_modalities, (2, 2, 2), (4,), 2, **kw)


def resolve_spec(arch: str | dict | ArchitectureSpec) -> ArchitectureSpec:
    """Preset name, path to a JSON spec, dict, or spec instance."""
    if isinstance(arch, ArchitectureSpec):
        return arch
    if isinstance(arch, dict):
        return ArchitectureSpec.from_dict(arch)
    if arch in PRESETS:
        return PRESETS[arch]
    path = Path(arch)
    if path.suffix == ".json" and path.exists():
        return ArchitectureSpec.from_dict(json.loads(path.read_text()))
    raise ValueError(f"unknown architecture {arch!r}; presets: {', '.join(PRESETS)}")


@dataclass
class Node:
    name: str
    kind: str  # "conv", "fc" or "classifier"
    stream: int | None
    layer: int
    sources: list[str]
    source_channels: list[int]
    out_channels: int
    kernel_size: int
    activation: bool = True
    dropout: bool = False

    @property
    def in_channels(self) -> int:
        return sum(self.source_channels)


def wire(spec: ArchitectureSpec) -> list[Node]:
    """Compile the connectivity of ``spec`` into nodes in execution order."""
    mode, m, depth = spec.fusion_mode, spec.num_modalities, spec.depth
    if m < 1 or (mode != "single_dense" and m < 2):
        raise ValueError(f"fusion_mode {mode!r} does not support {m} modalities")
    if mode == "dual_single" and depth < 2:
        raise ValueError("dual_single needs at least two conv layers")
    perm = spec.permutation
    channels = {block_name(s, 0): 1 for s in range(1, m + 1)}
    nodes: list[Node] = []

    def visible(stream, layer):
        """Conv blocks a consumer at ``layer`` of ``stream`` sees, before permuting."""
        if mode == "hyper_dense":
            return [(t, d) for d in range(layer - 1, 0, -1) for t in range(1, m + 1)]
        if mode == "dual_dense":
            return [(stream, d) for d in range(layer - 1, 0, -1)]
        if mode == "single_dense":
            return [(0, d) for d in range(layer - 1, 0, -1)]
        merged = [(0, d) for d in range(layer - 1, 1, -1)]
        return merged + [(t, 1) for t in range(1, m + 1)]

    def add(name, kind, stream, layer, blocks, c_out, k, activation=True, dropout=False):
        srcs = [b if isinstance(b, str) else block_name(*b) for b in blocks]
        nodes.append(Node(name, kind, stream, layer, srcs, [channels[s] for s in srcs],
                          c_out, k, activation, dropout))
        channels[name] = c_out

    for layer, c_out in enumerate(spec.conv_kernels, start=1):
        if mode == "single_dense":
            streams = [0]
        elif mode == "dual_single" and layer > 1:
            streams = [0]
        else:
            streams = list(range(1, m + 1))
        for s in streams:
            if layer == 1:
                blocks = [(t, 0) for t in range(1, m + 1)] if s == 0 else [(s, 0)]
            else:
                blocks = perm.order(layer, s, visible(s, layer))
            add(block_name(s, layer), "conv", s, layer, blocks, c_out, 3)

    head = depth + 1
    if mode in ("hyper_dense", "dual_dense"):
        fc_in = []
        for s in range(1, m + 1):
            fc_in += perm.order(head, s, visible(s, head))
    else:
        fc_in = perm.order(head, 0, visible(0, head))
    prev: list = fc_in
    for i, c_out in enumerate(spec.fc_kernels, start=1):
        add(f"fc{i}", "fc", None, head, prev, c_out, 1, dropout=True)
        prev = [f"fc{i}"]
    add("cls", "classifier", None, head, prev, spec.num_classes, 1, activation=False)
    return nodes


@dataclass
class ParameterCount:
    conv_weight_count: int
    fc_weight_count: int
    full_count: int

    @property
    def total(self) -> int:
        return self.conv_weight_count + self.fc_weight_count

    def weights_only(self) -> dict:
        """Convolutional and fully-convolutional weights; no biases, no PReLU slopes."""
        return {"conv": self.conv_weight_count, "fc": self.fc_weight_count, "total": self.total}

    def to_dict(self) -> dict:
        return {**self.weights_only(), "full": self.full_count}


def count_parameters(spec: ArchitectureSpec) -> ParameterCount:
    """Weight counts (no biases, no slopes) split into conv and head, plus the full count."""
    conv = fc = full = 0
    for node in wire(spec):
        w = node.kernel_size ** 3 * node.in_channels * node.out_channels
        if node.kind == "conv":
            conv += w
        else:
            fc += w
        full += w + node.out_channels * (2 if node.activation else 1)
    return ParameterCount(conv, fc, full)


class Network:
    """Compiled graph plus its parameters (one :class:`ConvKernelBank` per node)."""

    def __init__(self, spec: ArchitectureSpec, banks: dict[str, ConvKernelBank]):
        self.spec = spec
        self.nodes = wire(spec)
        self.banks = banks
        for node in self.nodes:
            bank = banks[node.name]
            expected = (node.out_channels, node.in_channels) + (node.kernel_size,) * 3
            if bank.weights.shape != expected:
                raise ValueError(f"{node.name}: weights {bank.weights.shape} != {expected}")

    @property
    def depth(self) -> int:
        return self.spec.depth

    @property
    def dtype(self):
        return self.banks["cls"].weights.dtype

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat ``{"<node>.<field>": array}`` view; arrays are the live buffers."""
        return {
            f"{name}.{key}": arr
            for name, bank in self.banks.items()
            for key, arr in bank.arrays().items()
        }

    def astype(self, dtype) -> "Network":
        banks = {
            name: ConvKernelBank(
                b.weights.astype(dtype),
                b.bias.astype(dtype),
                None if b.slopes is None else b.slopes.astype(dtype),
            )
            for name, b in self.banks.items()
        }
        return Network(self.spec, banks)

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def build_network(spec: ArchitectureSpec, seed: int = 0, dtype=np.float64) -> Network:
    """Wire ``spec`` and He-initialise every layer deterministically from ``seed``."""
    from .trainer import he_init  # trainer depends on this module

    rng = np.random.default_rng(seed)
    banks = {}
    for node in wire(spec):
        bank = ConvKernelBank.zeros(node.out_channels, node.in_channels, node.kernel_size,
                                    node.activation, dtype)
        banks[node.name] = he_init(bank, rng)
    return Network(spec, banks)


def describe_wiring(net: Network | ArchitectureSpec) -> list[dict]:
    spec = net.spec if isinstance(net, Network) else net
    return [
        {
            "layer": n.name,
            "kind": n.kind,
            "stream": n.stream,
            "depth": n.layer,
            "sources": list(n.sources),
            "source_channels": list(n.source_channels),
            "in_channels": n.in_channels,
            "out_channels": n.out_channels,
            "kernel": n.kernel_size,
        }
        for n in wire(spec)
    ]


def _check_inputs(net: Network, inputs):
    if len(inputs) != net.spec.num_modalities:
        raise ValueError(f"expected {net.spec.num_modalities} modalities, got {len(inputs)}")
    shape = inputs[0].shape
    for x in inputs:
        if x.ndim != 5 or x.shape[1] != 1:
            raise ValueError(f"each modality must be shaped (N, 1, D, H, W), got {x.shape}")
        if x.shape != shape:
            raise ValueError(f"modality shapes differ: {x.shape} vs {shape}")
    need = 2 * net.depth + 1
    if min(shape[2:]) < need:
        raise ValueError(f"input spatial dims {shape[2:]} smaller than minimum {need}")


def _gather(node: Node, blocks):
    parts = [blocks[s] for s in node.sources]
    size = tuple(min(p.shape[i] for p in parts) for i in (2, 3, 4))
    return np.concatenate([center_crop(p, size) for p in parts], axis=1), size


def _run(net: Network, inputs, mode, seed, record):
    if mode not in ("train", "inference"):
        raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
    _check_inputs(net, inputs)
    dtype = net.dtype
    blocks = {block_name(m, 0): np.asarray(x, dtype=dtype) for m, x in enumerate(inputs, 1)}
    rng = np.random.default_rng(seed)
    rate = net.spec.dropout_rate
    cache = {}
    depth = 0
    for node in net.nodes:
        if not record and node.kind == "conv" and node.layer != depth:
            # inference only: later consumers never need more than the newest size
            depth = node.layer
            if depth > 1:
                kept = {k: v for k, v in blocks.items() if not k.endswith("L0")}
                size = tuple(min(v.shape[i] for v in kept.values()) for i in (2, 3, 4))
                blocks = {k: v if v.shape[2:] == size else
                          np.ascontiguousarray(center_crop(v, size)) for k, v in kept.items()}
        bank = net.banks[node.name]
        x, _ = _gather(node, blocks)
        z = conv3d_valid(x, bank.weights, bank.bias)
        a = prelu(z, bank.slopes) if node.activation else z
        mask = None
        if node.dropout and mode == "train" and rate > 0:
            mask = dropout_mask(a.shape, rate, int(rng.integers(2 ** 63)), dtype)
            a = a * mask
        blocks[node.name] = a
        if record:
            cache[node.name] = (z, mask)
        del x
    probs = voxel_softmax(blocks["cls"])
    return probs, blocks, cache


def forward(net: Network, inputs: Sequence[np.ndarray], mode="inference", seed=0) -> np.ndarray:
    """Class probabilities ``(N, classes, D-2L, H-2L, W-2L)`` for ``L`` conv layers."""
    probs, _, _ = _run(net, inputs, mode, seed, record=False)
    return probs


def backward(net: Network, inputs, labels, mode="train", seed=0, return_input_grads=False):
    """Forward pass, cross-entropy loss and gradients for every node.

    Returns ``(loss, grads)`` with ``grads[node] = GradientBundle``; with
    ``return_input_grads`` also a list of per-modality input gradients.
    """
    probs, blocks, cache = _run(net, inputs, mode, seed, record=True)
    loss, dlogits = cross_entropy_loss(probs, labels)
    pending = {"cls": dlogits}
    grads = {}
    for node in reversed(net.nodes):
        bank = net.banks[node.name]
        g = pending.pop(node.name)
        z, mask = cache[node.name]
        if mask is not None:
            g = g * mask
        dslopes = None
        if node.activation:
            g, dslopes = prelu_backward(z, bank.slopes, g)
        x, size = _gather(node, blocks)
        dx, dw, db = conv3d_backward(x, bank.weights, g)
        grads[node.name] = GradientBundle(dw, db, dslopes, dx)
        for src, part in zip(node.sources, channel_split(dx, node.source_channels)):
            full = blocks[src].shape
            if src not in pending:
                pending[src] = np.zeros(full, dtype=dx.dtype)
            off = [(f - s) // 2 for f, s in zip(full[2:], size)]
            pending[src][:, :, off[0]:off[0] + size[0], off[1]:off[1] + size[1],
                         off[2]:off[2] + size[2]] += part
    if return_input_grads:
        inputs_grad = [pending.get(block_name(m, 0)) for m in range(1, net.spec.num_modalities + 1)]
        return loss, grads, inputs_grad
    return loss, grads


def flat_grads(grads: dict[str, GradientBundle]) -> dict[str, np.ndarray]:
    """Flatten to the key layout of :meth:`Network.parameters`."""
    return {f"{name}.{k}": a for name, b in grads.items() for k, a in b.arrays().items()}
