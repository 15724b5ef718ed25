"""Declarative layer graphs for the four networks.

A ``NetworkDef`` is a topologically ordered node list plus name-keyed
parameter tensors and (for batch-norm) running-stat buffers.  Forward
execution walks the node list; taps are just node names whose activations
are returned alongside the output.

The four builders: a plain-conv feature extractor with a tap after every
conv (the perceptual space for attacks and purifier training), a densely
connected purifier with no input-to-output shortcut, a batch-normed conv
critic emitting one unnormalized score per image, and an independent
small classifier standing in as the attacked model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .rng import SeededRng
from .tensor import ShapeError, Tensor, as_tensor


class GraphError(ValueError):
    """Malformed network graph or unknown tap/parameter reference."""


@dataclass(frozen=True)
class LayerSpec:
    """One node: kind, incoming edges (names of earlier nodes), attributes."""

    name: str
    kind: str
    inputs: tuple[str, ...] = ()
    attrs: dict = field(default_factory=dict)


_KINDS = {"input", "conv", "lrelu", "bn", "concat", "gap", "dense", "identity"}


class NetworkDef:
    """Layer graph + named parameters/buffers + declared tap points."""

    def __init__(self, nodes, params, buffers, taps, meta=None):
        self.nodes: list[LayerSpec] = list(nodes)
        self.params: dict[str, Tensor] = dict(params)
        self.buffers: dict[str, np.ndarray] = dict(buffers)
        self.taps: tuple[str, ...] = tuple(taps)
        self.meta: dict = dict(meta or {})
        self._validate()

    def _validate(self):
        seen: set[str] = set()
        inputs = [n for n in self.nodes if n.kind == "input"]
        if len(inputs) != 1 or self.nodes[0].kind != "input":
            raise GraphError("network needs exactly one input node, first in order")
        for node in self.nodes:
            if node.kind not in _KINDS:
                raise GraphError(f"unknown node kind {node.kind!r}")
            if node.name in seen:
                raise GraphError(f"duplicate node name {node.name!r}")
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node {node.name!r} consumes {src!r} before it is defined")
            seen.add(node.name)
        for tap in self.taps:
            if tap not in seen:
                raise GraphError(f"declared tap {tap!r} is not a node")

    @property
    def input_node(self) -> str:
        return self.nodes[0].name

    @property
    def output_node(self) -> str:
        return self.nodes[-1].name

    def node(self, name: str) -> LayerSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise GraphError(f"no node named {name!r}")

    def state(self) -> dict[str, np.ndarray]:
        """Merged parameter + buffer arrays, for checkpointing."""
        out = {k: p.data for k, p in self.params.items()}
        out.update({k: b for k, b in self.buffers.items()})
        return out

    def load_state(self, state: dict[str, np.ndarray]):
        """Install arrays by name; the first mismatching name raises."""
        for name in sorted(set(self.params) | set(self.buffers)):
            if name not in state:
                raise GraphError(f"checkpoint is missing tensor {name!r}")
        for name in sorted(state):
            if name in self.params:
                p = self.params[name]
                if state[name].shape != p.data.shape:
                    raise GraphError(
                        f"shape mismatch for {name!r}: checkpoint {state[name].shape}, network {p.data.shape}")
                p.data = state[name].astype(p.dtype, copy=True)
            elif name in self.buffers:
                if state[name].shape != self.buffers[name].shape:
                    raise GraphError(
                        f"shape mismatch for {name!r}: checkpoint {state[name].shape}, network {self.buffers[name].shape}")
                self.buffers[name] = state[name].astype(self.buffers[name].dtype, copy=True)
            else:
                raise GraphError(f"checkpoint tensor {name!r} does not exist in this network")

    def clone(self) -> "NetworkDef":
        params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad) for k, p in self.params.items()}
        buffers = {k: b.copy() for k, b in self.buffers.items()}
        return NetworkDef(self.nodes, params, buffers, self.taps, self.meta)


def count_parameters(net: NetworkDef) -> int:
    return int(sum(p.size for p in net.params.values()))


def has_conv_bypass(net: NetworkDef) -> bool:
    """True if some input->output path never passes through a convolution."""
    kind = {n.name: n.kind for n in net.nodes}
    succ: dict[str, list[str]] = {n.name: [] for n in net.nodes}
    for n in net.nodes:
        for src in n.inputs:
            succ[src].append(n.name)
    frontier = [net.input_node]
    visited = {net.input_node}
    while frontier:
        u = frontier.pop()
        for v in succ[u]:
            if v in visited or kind[v] == "conv":
                continue
            visited.add(v)
            frontier.append(v)
    return net.output_node in visited


def truncate_at(net: NetworkDef, tap: str) -> NetworkDef:
    """Sub-network ending at ``tap``, sharing the same parameter tensors."""
    if tap not in {n.name for n in net.nodes}:
        raise GraphError(f"no node named {tap!r}")
    nodes = []
    for n in net.nodes:
        nodes.append(n)
        if n.name == tap:
            break
    kept = {n.name for n in nodes}
    params = {k: v for k, v in net.params.items() if k.rsplit(".", 1)[0] in kept}
    buffers = {k: v for k, v in net.buffers.items() if k.rsplit(".", 1)[0] in kept}
    taps = tuple(t for t in net.taps if t in kept)
    return NetworkDef(nodes, params, buffers, taps, net.meta)


# ---------------------------------------------------------------------------
# Forward execution


def forward(net: NetworkDef, x, taps=(), mode: str = "eval"):
    """Run the graph on an NCHW batch.

    Returns the output tensor, or ``(output, {tap: tensor})`` when taps are
    requested.  Tap tensors are exactly the activations of the named nodes.
    """
    if mode not in ("train", "eval"):
        raise GraphError(f"unknown mode {mode!r}")
    taps = tuple(taps)
    declared = set(net.taps)
    for tap in taps:
        if tap not in declared:
            raise GraphError(f"unknown tap {tap!r}; declared taps: {sorted(declared)}")

    dtype = net.meta.get("dtype", np.float32)
    x = as_tensor(x, dtype=dtype)
    values: dict[str, Tensor] = {}
    for node in net.nodes:
        if node.kind == "input":
            values[node.name] = x
            continue
        ins = [values[s] for s in node.inputs]
        if node.kind == "conv":
            w = net.params[f"{node.name}.w"]
            b = net.params[f"{node.name}.b"]
            y = T.add(T.conv2d(ins[0], w, stride=node.attrs["stride"], padding=node.attrs["padding"]), b)
        elif node.kind == "lrelu":
            y = T.leaky_relu(ins[0], node.attrs["slope"])
        elif node.kind == "bn":
            y = T.batch_norm(ins[0], net.params[f"{node.name}.gamma"], net.params[f"{node.name}.beta"],
                             net.buffers[f"{node.name}.running_mean"], net.buffers[f"{node.name}.running_var"],
                             mode=mode)
        elif node.kind == "concat":
            y = T.concat(ins, axis=1)
        elif node.kind == "gap":
            y = T.reshape(T.mean(ins[0], axis=(2, 3)), (ins[0].shape[0], ins[0].shape[1]))
        elif node.kind == "dense":
            y = T.dense(ins[0], net.params[f"{node.name}.w"], net.params[f"{node.name}.b"])
        elif node.kind == "identity":
            y = ins[0]
        else:  # pragma: no cover - guarded by _validate
            raise GraphError(f"unhandled kind {node.kind!r}")
        values[node.name] = y

    out = values[net.output_node]
    if not taps:
        return out
    return out, {t: values[t] for t in taps}


# ---------------------------------------------------------------------------
# Parameter initialization


class _Init:
    """Kaiming-style fan-in init for convs and dense layers, zero biases."""

    def __init__(self, seed: int, dtype):
        self.rng = SeededRng(seed)
        self.dtype = dtype

    def conv(self, params, name, out_ch, in_ch, k):
        std = np.sqrt(2.0 / (in_ch * k * k))
        params[f"{name}.w"] = Tensor(self.rng.normal((out_ch, in_ch, k, k), std=std, dtype=self.dtype),
                                     requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros((1, out_ch, 1, 1), dtype=self.dtype), requires_grad=True)

    def dense(self, params, name, in_dim, out_dim):
        std = np.sqrt(2.0 / in_dim)
        params[f"{name}.w"] = Tensor(self.rng.normal((in_dim, out_dim), std=std, dtype=self.dtype),
                                     requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(out_dim, dtype=self.dtype), requires_grad=True)

    def bn(self, params, buffers, name, ch):
        params[f"{name}.gamma"] = Tensor(np.ones(ch, dtype=self.dtype), requires_grad=True)
        params[f"{name}.beta"] = Tensor(np.zeros(ch, dtype=self.dtype), requires_grad=True)
        buffers[f"{name}.running_mean"] = np.zeros(ch, dtype=self.dtype)
        buffers[f"{name}.running_var"] = np.ones(ch, dtype=self.dtype)


# ---------------------------------------------------------------------------
# Builders


@dataclass(frozen=True)
class ExtractorConfig:
    """VGG-style plain-conv stack sized for 32x32 inputs.

    Channel width doubles per block; the first conv of every block after
    the first downsamples by stride 2, so block 3 sees a quarter of the
    input resolution.  A tap is declared after every conv activation;
    ``b3c3`` is the designated mid-depth perceptual tap.
    """

    in_channels: int = 3
    base_width: int = 8
    num_blocks: int = 3
    convs_per_block: int = 3
    num_classes: int = 4
    slope: float = 0.2
    dtype: type = np.float32


def build_feature_extractor(config: ExtractorConfig = ExtractorConfig(), seed: int = 0) -> NetworkDef:
    init = _Init(seed, config.dtype)
    nodes = [LayerSpec("image", "input")]
    params: dict[str, Tensor] = {}
    taps = []
    prev, prev_ch = "image", config.in_channels
    for b in range(1, config.num_blocks + 1):
        width = config.base_width * (2 ** (b - 1))
        for c in range(1, config.convs_per_block + 1):
            stride = 2 if (b > 1 and c == 1) else 1
            conv = f"b{b}c{c}_conv"
            tapname = f"b{b}c{c}"
            nodes.append(LayerSpec(conv, "conv", (prev,), {"stride": stride, "padding": 1}))
            init.conv(params, conv, width, prev_ch, 3)
            nodes.append(LayerSpec(tapname, "lrelu", (conv,), {"slope": config.slope}))
            taps.append(tapname)
            prev, prev_ch = tapname, width
    nodes.append(LayerSpec("gap", "gap", (prev,)))
    nodes.append(LayerSpec("logits", "dense", ("gap",)))
    init.dense(params, "logits", prev_ch, config.num_classes)
    meta = {"role": "extractor", "default_tap": f"b{config.num_blocks}c{config.convs_per_block}",
            "dtype": config.dtype, "config": config}
    return NetworkDef(nodes, params, {}, taps, meta)


@dataclass(frozen=True)
class PurifierConfig:
    """Restoration generator: head conv, basic blocks of dense blocks, tail conv.

    Each dense block is five 3x3 convs with leaky-relu and dense
    concatenation; the fifth conv maps back to the trunk width.  No
    normalization layers and no global input->output skip, so adversarial
    patterns cannot ride a shortcut past the convolutions.
    """

    in_channels: int = 3
    width: int = 32
    basic_blocks: int = 2
    dense_blocks: int = 3
    growth: int = 16
    slope: float = 0.2
    dtype: type = np.float32


def build_purifier(config: PurifierConfig = PurifierConfig(), seed: int = 1) -> NetworkDef:
    if config.basic_blocks < 1:
        raise GraphError("purifier needs at least one basic block")
    init = _Init(seed, config.dtype)
    nodes = [LayerSpec("image", "input")]
    params: dict[str, Tensor] = {}
    nodes.append(LayerSpec("head_conv", "conv", ("image",), {"stride": 1, "padding": 1}))
    init.conv(params, "head_conv", config.width, config.in_channels, 3)
    nodes.append(LayerSpec("head", "lrelu", ("head_conv",), {"slope": config.slope}))
    trunk = "head"
    w = config.width
    for bb in range(1, config.basic_blocks + 1):
        for db in range(1, config.dense_blocks + 1):
            base = f"bb{bb}db{db}"
            feats = [trunk]
            for c in range(1, 5):
                src = feats[0] if len(feats) == 1 else _cat(nodes, f"{base}c{c}_cat", feats)
                conv = f"{base}c{c}_conv"
                nodes.append(LayerSpec(conv, "conv", (src,), {"stride": 1, "padding": 1}))
                init.conv(params, conv, config.growth, w + (c - 1) * config.growth, 3)
                act = f"{base}c{c}"
                nodes.append(LayerSpec(act, "lrelu", (conv,), {"slope": config.slope}))
                feats.append(act)
            src = _cat(nodes, f"{base}c5_cat", feats)
            conv = f"{base}c5_conv"
            nodes.append(LayerSpec(conv, "conv", (src,), {"stride": 1, "padding": 1}))
            init.conv(params, conv, w, w + 4 * config.growth, 3)
            act = f"{base}c5"
            nodes.append(LayerSpec(act, "lrelu", (conv,), {"slope": config.slope}))
            trunk = act
    nodes.append(LayerSpec("tail", "conv", (trunk,), {"stride": 1, "padding": 1}))
    init.conv(params, "tail", config.in_channels, w, 3)
    meta = {"role": "purifier", "dtype": config.dtype, "config": config}
    net = NetworkDef(nodes, params, {}, (), meta)
    assert not has_conv_bypass(net)
    return net


def _cat(nodes, name, feats):
    nodes.append(LayerSpec(name, "concat", tuple(feats), {"axis": 1}))
    return name


@dataclass(frozen=True)
class CriticConfig:
    """Five conv blocks (conv, batch-norm, leaky-relu), pooled to one score."""

    in_channels: int = 3
    widths: tuple = (16, 32, 32, 64, 64)
    strides: tuple = (1, 2, 2, 2, 2)
    slope: float = 0.2
    dtype: type = np.float32


def build_critic(config: CriticConfig = CriticConfig(), seed: int = 2) -> NetworkDef:
    if len(config.widths) != len(config.strides):
        raise GraphError("critic widths and strides must align")
    init = _Init(seed, config.dtype)
    nodes = [LayerSpec("image", "input")]
    params: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}
    prev, prev_ch = "image", config.in_channels
    for i, (width, stride) in enumerate(zip(config.widths, config.strides), start=1):
        conv = f"blk{i}_conv"
        nodes.append(LayerSpec(conv, "conv", (prev,), {"stride": stride, "padding": 1}))
        init.conv(params, conv, width, prev_ch, 3)
        bn = f"blk{i}_bn"
        nodes.append(LayerSpec(bn, "bn", (conv,)))
        init.bn(params, buffers, bn, width)
        act = f"blk{i}"
        nodes.append(LayerSpec(act, "lrelu", (bn,), {"slope": config.slope}))
        prev, prev_ch = act, width
    nodes.append(LayerSpec("gap", "gap", (prev,)))
    nodes.append(LayerSpec("score", "dense", ("gap",)))
    init.dense(params, "score", prev_ch, 1)
    meta = {"role": "critic", "dtype": config.dtype, "config": config}
    return NetworkDef(nodes, params, buffers, (), meta)


@dataclass(frozen=True)
class ClassifierConfig:
    """Small conv classifier, architecturally independent of the extractor."""

    in_channels: int = 3
    widths: tuple = (12, 24, 32)
    num_classes: int = 4
    slope: float = 0.2
    dtype: type = np.float32


def build_toy_classifier(num_classes: int = 4, config: ClassifierConfig | None = None,
                         seed: int = 3) -> NetworkDef:
    config = config or ClassifierConfig(num_classes=num_classes)
    init = _Init(seed, config.dtype)
    nodes = [LayerSpec("image", "input")]
    params: dict[str, Tensor] = {}
    prev, prev_ch = "image", config.in_channels
    for i, width in enumerate(config.widths, start=1):
        conv = f"c{i}_conv"
        stride = 1 if i == 1 else 2
        nodes.append(LayerSpec(conv, "conv", (prev,), {"stride": stride, "padding": 1}))
        init.conv(params, conv, width, prev_ch, 3)
        act = f"c{i}"
        nodes.append(LayerSpec(act, "lrelu", (conv,), {"slope": config.slope}))
        prev, prev_ch = act, width
    nodes.append(LayerSpec("gap", "gap", (prev,)))
    nodes.append(LayerSpec("logits", "dense", ("gap",)))
    init.dense(params, "logits", prev_ch, config.num_classes)
    meta = {"role": "classifier", "dtype": config.dtype, "config": config}
    return NetworkDef(nodes, params, {}, (), meta)


def build_identity(in_channels: int = 3) -> NetworkDef:
    """Pass-through network; useful as a null purifier in tests and tables."""
    nodes = [LayerSpec("image", "input"), LayerSpec("out", "identity", ("image",))]
    return NetworkDef(nodes, {}, {}, (), {"role": "identity", "dtype": np.float32})


# ---------------------------------------------------------------------------
# Closed-form parameter counts (arithmetic oracles for the builders)


def expected_purifier_param_count(config: PurifierConfig) -> int:
    w, g = config.width, config.growth
    count = (config.in_channels * 9 + 1) * w            # head
    per_dense = 0
    for c in range(1, 5):
        per_dense += ((w + (c - 1) * g) * 9 + 1) * g
    per_dense += ((w + 4 * g) * 9 + 1) * w              # fifth conv back to trunk width
    count += per_dense * config.basic_blocks * config.dense_blocks
    count += (w * 9 + 1) * config.in_channels           # tail
    return count


def expected_extractor_param_count(config: ExtractorConfig) -> int:
    count = 0
    prev = config.in_channels
    for b in range(1, config.num_blocks + 1):
        width = config.base_width * (2 ** (b - 1))
        for _ in range(config.convs_per_block):
            count += (prev * 9 + 1) * width
            prev = width
    count += (prev + 1) * config.num_classes
    return count
