"""Network graph: layer specs, forward inference, feature taps, channel groups.

A NetGraph is an immutable, topologically ordered DAG of layers with weights
resident as float32 numpy arrays.  Supported layer kinds are dense, conv2d,
batchnorm, relu, avgpool, globalavgpool, add, and flatten, which is enough
for MLPs, VGG-style stacks, and small residual blocks.  The special producer
name "input" denotes the network input.

Forward execution is a pure function of (weights, batch): repeated calls are
bit-identical.  Batchnorm always runs in inference mode on stored running
statistics.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, TapError

INPUT = "input"

LAYER_KINDS = (
    "dense",
    "conv2d",
    "batchnorm",
    "relu",
    "avgpool",
    "globalavgpool",
    "add",
    "flatten",
)

# Layers that define a new channel space.  Everything else passes its
# producer's channels through unchanged (flatten expands them spatially).
CHANNEL_KINDS = ("dense", "conv2d")

TAP_STAGES = ("pre-activation", "post-batchnorm", "post-activation")


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list[str]
    params: dict = field(default_factory=dict)
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    def channel_count(self) -> int:
        if self.kind == "dense":
            return self.weights["weight"].shape[0]
        if self.kind == "conv2d":
            return self.weights["weight"].shape[0]
        raise ValueError(f"layer {self.name!r} ({self.kind}) has no channels")


@dataclass
class ChannelGroup:
    """Channels across layers that must be pruned jointly.

    kind is "shortcut-sum" for groups discovered from add layers and
    "depthwise-couple" for explicit couplings given in the manifest.
    Groups tied to the network input or the classifier are kept for
    bookkeeping but flagged non-prunable.
    """

    members: list[str]
    kind: str = "shortcut-sum"
    prunable: bool = True


@dataclass(frozen=True)
class FeatureTap:
    """Where to read feature maps for a channel-defining layer."""

    layer: str
    stage: str = "post-activation"

    def __post_init__(self):
        if self.stage not in TAP_STAGES:
            raise TapError(f"unknown tap stage {self.stage!r}")


@dataclass
class Dataset:
    """N input samples with integer class labels in [0, num_classes)."""

    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        from .errors import DatasetError

        if len(self.inputs) != len(self.labels):
            raise DatasetError("inputs and labels disagree on sample count")
        if len(self.inputs) < 1:
            raise DatasetError("dataset is empty")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise DatasetError(
                f"label {int(self.labels.max())} out of range for "
                f"{self.num_classes} classes"
            )

    def __len__(self) -> int:
        return len(self.inputs)


class NetGraph:
    """Ordered layer graph with weights, groups, and a fixed input shape."""

    def __init__(self, layers, input_shape, groups=None, metadata=None):
        self.layers: list[LayerSpec] = list(layers)
        self.input_shape: tuple = tuple(input_shape)
        self.groups: list[ChannelGroup] = list(groups or [])
        self.metadata: dict = dict(metadata or {})
        self._by_name = {l.name: l for l in self.layers}
        if len(self._by_name) != len(self.layers):
            raise ShapeError("duplicate layer names")
        self._validate_topology()
        self._shapes = self._propagate_shapes()
        self._discover_groups()

    # -- structure ---------------------------------------------------------

    def layer(self, name: str) -> LayerSpec:
        if name not in self._by_name:
            raise ShapeError(f"unknown layer {name!r}")
        return self._by_name[name]

    def has_layer(self, name: str) -> bool:
        return name in self._by_name

    def consumers(self, name: str) -> list[LayerSpec]:
        return [l for l in self.layers if name in l.inputs]

    def output_layer(self) -> LayerSpec:
        return self.layers[self._sink_index]

    def output_shape(self, name: str) -> tuple:
        """Per-sample output shape of a layer (no batch dimension)."""
        return self._shapes[name]

    def channel_count(self, name: str) -> int:
        return self.layer(name).channel_count()

    def classifier_layer(self) -> str:
        """The channel-defining layer whose outputs are the logits."""
        cur = self.output_layer()
        while cur.kind not in CHANNEL_KINDS:
            producers = [i for i in cur.inputs if i != INPUT]
            if len(producers) != 1:
                raise ShapeError(
                    f"cannot trace classifier through {cur.name!r} ({cur.kind})"
                )
            cur = self.layer(producers[0])
        return cur.name

    def prunable_layers(self) -> list[str]:
        """Channel-defining layers eligible for pruning, in topological order.

        The classifier is excluded because its channel count is the class
        count.  Layers in non-prunable groups are excluded as well.
        """
        classifier = self.classifier_layer()
        blocked = {classifier}
        for g in self.groups:
            if not g.prunable or classifier in g.members:
                blocked.update(g.members)
        return [
            l.name
            for l in self.layers
            if l.kind in CHANNEL_KINDS and l.name not in blocked
        ]

    def prune_units(self) -> list[list[str]]:
        """Prunable layers bundled into jointly pruned units.

        Each group is one unit; ungrouped prunable layers are singletons.
        """
        prunable = set(self.prunable_layers())
        units, seen = [], set()
        for g in self.groups:
            if all(m in prunable for m in g.members):
                units.append(list(g.members))
                seen.update(g.members)
        for name in self.prunable_layers():
            if name not in seen:
                units.append([name])
        units.sort(key=lambda u: min(self._topo_index[m] for m in u))
        return units

    def group_of(self, name: str) -> ChannelGroup | None:
        for g in self.groups:
            if name in g.members:
                return g
        return None

    def clone(self) -> "NetGraph":
        layers = [
            LayerSpec(
                l.name,
                l.kind,
                list(l.inputs),
                copy.deepcopy(l.params),
                {k: v.copy() for k, v in l.weights.items()},
            )
            for l in self.layers
        ]
        groups = [ChannelGroup(list(g.members), g.kind, g.prunable) for g in self.groups]
        return NetGraph(layers, self.input_shape, groups, dict(self.metadata))

    # -- validation --------------------------------------------------------

    def _validate_topology(self):
        names = set(self._by_name)
        produced = set()
        for i, l in enumerate(self.layers):
            if l.kind not in LAYER_KINDS:
                raise ShapeError(f"layer {l.name!r}: unknown kind {l.kind!r}")
            for inp in l.inputs:
                if inp == INPUT:
                    continue
                if inp not in names:
                    raise ShapeError(f"layer {l.name!r}: unknown input {inp!r}")
                if inp not in produced:
                    raise ShapeError(
                        f"layer {l.name!r} consumes {inp!r} before it is produced "
                        "(layers must be listed in topological order)"
                    )
            produced.add(l.name)
        consumed = {i for l in self.layers for i in l.inputs}
        sinks = [i for i, l in enumerate(self.layers) if l.name not in consumed]
        if len(sinks) != 1:
            raise ShapeError(f"graph must have exactly one output, found {len(sinks)}")
        self._sink_index = sinks[0]
        if INPUT not in consumed:
            raise ShapeError("no layer consumes the network input")
        self._topo_index = {l.name: i for i, l in enumerate(self.layers)}

    def _propagate_shapes(self) -> dict[str, tuple]:
        shapes = {INPUT: self.input_shape}
        for l in self.layers:
            ins = [shapes[i] for i in l.inputs]
            shapes[l.name] = _infer_shape(l, ins)
        return shapes

    # -- channel groups ----------------------------------------------------

    def _channel_sources(self, name: str) -> set[str]:
        """Channel-defining layers (or INPUT) whose channel space reaches
        `name`'s output through channel-preserving layers."""
        if name == INPUT:
            return {INPUT}
        l = self.layer(name)
        if l.kind in CHANNEL_KINDS:
            return {name}
        if l.kind == "flatten":
            # flatten re-indexes channels into features; treat as opaque
            return {name}
        out = set()
        for inp in l.inputs:
            out |= self._channel_sources(inp)
        return out

    def _discover_groups(self):
        """Merge manifest groups with shortcut groups implied by add layers."""
        parent: dict[str, str] = {}

        def find(x):
            parent.setdefault(x, x)
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        def union(a, b):
            ra, rb = find(a), find(b)
            if ra != rb:
                parent[ra] = rb

        kinds: dict[str, str] = {}
        for g in self.groups:
            for m in g.members:
                union(g.members[0], m)
                kinds[m] = g.kind
        for l in self.layers:
            if l.kind != "add":
                continue
            sources = set()
            for inp in l.inputs:
                sources |= self._channel_sources(inp)
            sources = {s for s in sources if s == INPUT or self.layer(s).kind in CHANNEL_KINDS}
            members = sorted(sources)
            for m in members[1:]:
                union(members[0], m)

        clusters: dict[str, list[str]] = {}
        for x in list(parent):
            clusters.setdefault(find(x), []).append(x)

        groups = []
        for members in clusters.values():
            if len(members) < 2 and INPUT not in members:
                continue
            prunable = INPUT not in members
            real = sorted(
                (m for m in members if m != INPUT),
                key=lambda n: self._topo_index[n],
            )
            if not real:
                continue
            counts = {self.channel_count(m) for m in real}
            if len(counts) > 1:
                raise ShapeError(
                    f"grouped layers {real} disagree on channel count {sorted(counts)}"
                )
            kind = next((kinds[m] for m in real if m in kinds), "shortcut-sum")
            groups.append(ChannelGroup(real, kind, prunable))
        groups.sort(key=lambda g: self._topo_index[g.members[0]])
        self.groups = groups

    # -- execution ---------------------------------------------------------

    def execute(self, batch: np.ndarray, captures: set[str] | None = None,
                channel_masks: dict[str, np.ndarray] | None = None):
        """Run the graph on a batch, optionally capturing named outputs.

        channel_masks zeroes (or scales) the outputs of channel-defining
        layers, mirroring a multiplicative indicator on the feature maps.
        """
        batch = np.asarray(batch, dtype=np.float32)
        if batch.shape[1:] != self.input_shape:
            raise ShapeError(
                f"batch shape {batch.shape[1:]} != input shape {self.input_shape}"
            )
        captures = captures or set()
        masks = channel_masks or {}
        values: dict[str, np.ndarray] = {INPUT: batch}
        captured: dict[str, np.ndarray] = {}
        refcount: dict[str, int] = {}
        for l in self.layers:
            for i in l.inputs:
                refcount[i] = refcount.get(i, 0) + 1
        for l in self.layers:
            ins = [values[i] for i in l.inputs]
            out = _apply_layer(l, ins)
            if l.name in masks:
                m = np.asarray(masks[l.name], dtype=np.float32)
                out = out * m.reshape((1, -1) + (1,) * (out.ndim - 2))
            values[l.name] = out
            if l.name in captures:
                captured[l.name] = out
            for i in l.inputs:
                refcount[i] -= 1
                if refcount[i] == 0 and i not in captures:
                    del values[i]
        return values[self.output_layer().name], captured


def _infer_shape(l: LayerSpec, ins: list[tuple]) -> tuple:
    def fail(msg):
        raise ShapeError(f"layer {l.name!r} ({l.kind}): {msg}")

    if l.kind == "dense":
        (s,) = ins
        w = l.weights.get("weight")
        if w is None or w.ndim != 2:
            fail("needs a 2-d weight matrix")
        if len(s) != 1:
            fail(f"expects a flat input, got shape {s}")
        if w.shape[1] != s[0]:
            fail(f"weight expects {w.shape[1]} inputs, got {s[0]}")
        return (w.shape[0],)
    if l.kind == "conv2d":
        (s,) = ins
        w = l.weights.get("weight")
        if w is None or w.ndim != 4:
            fail("needs a 4-d weight tensor (out, in, kh, kw)")
        if len(s) != 3:
            fail(f"expects a (C,H,W) input, got shape {s}")
        cout, cin, kh, kw = w.shape
        if cin != s[0]:
            fail(f"weight expects {cin} input channels, got {s[0]}")
        sh, sw = _pair(l.params.get("stride", 1))
        ph, pw = _pair(l.params.get("padding", 0))
        h = (s[1] + 2 * ph - kh) // sh + 1
        w_ = (s[2] + 2 * pw - kw) // sw + 1
        if h < 1 or w_ < 1:
            fail(f"kernel {kh}x{kw} does not fit input {s}")
        return (cout, h, w_)
    if l.kind in ("batchnorm", "relu"):
        (s,) = ins
        if l.kind == "batchnorm":
            g = l.weights.get("gamma")
            if g is None or g.shape[0] != s[0]:
                fail(f"gamma length must match {s[0]} channels")
        return s
    if l.kind == "avgpool":
        (s,) = ins
        if len(s) != 3:
            fail(f"expects a (C,H,W) input, got shape {s}")
        kh, kw = _pair(l.params.get("kernel", 2))
        sh, sw = _pair(l.params.get("stride", l.params.get("kernel", 2)))
        h = (s[1] - kh) // sh + 1
        w_ = (s[2] - kw) // sw + 1
        if h < 1 or w_ < 1:
            fail(f"pool {kh}x{kw} does not fit input {s}")
        return (s[0], h, w_)
    if l.kind == "globalavgpool":
        (s,) = ins
        if len(s) != 3:
            fail(f"expects a (C,H,W) input, got shape {s}")
        return (s[0],)
    if l.kind == "add":
        if len(ins) < 2:
            fail("needs at least two inputs")
        if any(s != ins[0] for s in ins[1:]):
            fail(f"input shapes differ: {ins}")
        return ins[0]
    if l.kind == "flatten":
        (s,) = ins
        return (int(np.prod(s)),)
    fail("unreachable kind")


def _pair(v):
    if isinstance(v, (list, tuple)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _apply_layer(l: LayerSpec, ins: list[np.ndarray]) -> np.ndarray:
    if l.kind == "dense":
        (x,) = ins
        w = l.weights["weight"]
        out = x @ w.T
        if "bias" in l.weights:
            out = out + l.weights["bias"]
        return out
    if l.kind == "conv2d":
        (x,) = ins
        return _conv2d(
            x,
            l.weights["weight"],
            l.weights.get("bias"),
            _pair(l.params.get("stride", 1)),
            _pair(l.params.get("padding", 0)),
        )
    if l.kind == "batchnorm":
        (x,) = ins
        g = l.weights["gamma"]
        b = l.weights["beta"]
        mu = l.weights["running_mean"]
        var = l.weights["running_var"]
        eps = np.float32(l.params.get("eps", 1e-5))
        shape = (1, -1) + (1,) * (x.ndim - 2)
        scale = (g / np.sqrt(var + eps)).reshape(shape)
        shift = (b - mu * g / np.sqrt(var + eps)).reshape(shape)
        return x * scale + shift
    if l.kind == "relu":
        (x,) = ins
        return np.maximum(x, 0)
    if l.kind == "avgpool":
        (x,) = ins
        kh, kw = _pair(l.params.get("kernel", 2))
        sh, sw = _pair(l.params.get("stride", l.params.get("kernel", 2)))
        win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
        return win[:, :, ::sh, ::sw].mean(axis=(-2, -1))
    if l.kind == "globalavgpool":
        (x,) = ins
        return x.mean(axis=(2, 3))
    if l.kind == "add":
        out = ins[0]
        for other in ins[1:]:
            out = out + other
        return out
    if l.kind == "flatten":
        (x,) = ins
        return x.reshape(len(x), -1)
    raise ShapeError(f"unknown layer kind {l.kind!r}")


def _conv2d(x, w, bias, stride, padding):
    sh, sw = stride
    ph, pw = padding
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    kh, kw = w.shape[2], w.shape[3]
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(2, 3))
    win = win[:, :, ::sh, ::sw]
    out = np.einsum("bcxyij,ocij->boxy", win, w, optimize=True).astype(np.float32)
    if bias is not None:
        out = out + bias.reshape(1, -1, 1, 1)
    return out


# -- spec-level operations --------------------------------------------------


def forward(net: NetGraph, batch: np.ndarray) -> np.ndarray:
    """Forward pass: batch of B samples to B x K logits."""
    logits, _ = net.execute(batch)
    return logits


def resolve_tap(net: NetGraph, tap: FeatureTap) -> tuple[str, str]:
    """Map a tap to the concrete layer whose output is captured.

    post-activation follows the chain through batchnorm and add to the first
    relu; if the chain has no relu, the tap degrades to the latest stage that
    exists (post-batchnorm, else pre-activation).  Returns (layer name,
    actual stage).
    """
    if not net.has_layer(tap.layer):
        raise TapError(f"tap references unknown layer {tap.layer!r}")
    base = net.layer(tap.layer)
    if base.kind not in CHANNEL_KINDS:
        raise TapError(f"layer {tap.layer!r} ({base.kind}) has no channel tap")
    if tap.stage == "pre-activation":
        return tap.layer, "pre-activation"

    def walk(name, want):
        best = None
        frontier = [name]
        seen = set()
        while frontier:
            cur = frontier.pop(0)
            for nxt in net.consumers(cur):
                if nxt.name in seen:
                    continue
                seen.add(nxt.name)
                if nxt.kind == "relu" and want == "post-activation":
                    return nxt.name
                if nxt.kind == "batchnorm":
                    if want == "post-batchnorm":
                        return nxt.name
                    best = best or None
                    frontier.append(nxt.name)
                elif nxt.kind == "add":
                    frontier.append(nxt.name)
        return None

    hit = walk(tap.layer, tap.stage)
    if hit is not None:
        return hit, tap.stage
    if tap.stage == "post-activation":
        bn = walk(tap.layer, "post-batchnorm")
        if bn is not None:
            return bn, "post-batchnorm"
    return tap.layer, "pre-activation"


def subsample_indices(n: int, max_samples: int, seed: int = 0) -> np.ndarray:
    """First min(n, max_samples) indices of a seed-controlled shuffle."""
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    return order[: min(n, max_samples)]


def extract_features(net: NetGraph, data: Dataset, tap: FeatureTap,
                     max_samples: int = 512, seed: int = 0) -> "FeatureMatrix":
    """Extract a D x N' feature matrix at a tap point.

    Conv feature maps are reduced to one scalar per channel and sample by
    global average pooling, so D is always the layer's channel count.
    """
    from .di_core import FeatureMatrix

    if max_samples < 1:
        raise TapError("max_samples must be >= 1")
    capture_layer, stage = resolve_tap(net, tap)
    idx = subsample_indices(len(data), max_samples, seed)
    cols = []
    for start in range(0, len(idx), 256):
        chunk = data.inputs[idx[start : start + 256]]
        _, captured = net.execute(chunk, captures={capture_layer})
        feat = captured[capture_layer]
        if feat.ndim == 4:
            feat = feat.mean(axis=(2, 3))
        elif feat.ndim != 2:
            raise TapError(f"tap output has unsupported rank {feat.ndim}")
        cols.append(feat)
    values = np.concatenate(cols, axis=0).T.astype(np.float64)
    return FeatureMatrix(values=values, layer=tap.layer, stage=stage)


def evaluate_accuracy(net: NetGraph, data: Dataset, batch_size: int = 256) -> float:
    """Top-1 accuracy; argmax ties break toward the lowest class index."""
    hits = 0
    for start in range(0, len(data), batch_size):
        logits = forward(net, data.inputs[start : start + batch_size])
        pred = np.argmax(logits, axis=1)
        hits += int(np.sum(pred == data.labels[start : start + batch_size]))
    return hits / len(data)
