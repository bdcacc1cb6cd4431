"""Layer graphs: builders for the boundary detector and segmenters, plus
topological forward/backward execution and weight serialisation."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

import numpy as np

from . import formats, ops
from .initializers import xavier_init
from .ops import ConfigError

KINDS = {
    "input", "conv", "conv1x1", "relu", "maxpool", "unpool", "tconv", "avgpool",
    "concat", "add", "softmax", "batchnorm", "dropout", "side-output", "loss-attach",
}


class GraphStateError(RuntimeError):
    pass


class WeightMismatchError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("weight mismatch:\n  " + "\n  ".join(problems))
        self.problems = problems


@dataclass
class ArchConfig:
    num_classes: int = 5
    image_channels: int = 3
    height_channels: int = 2
    base_width: int = 16
    depth: int = 3
    scales: int = 1
    batchnorm_final_off: bool = True
    # decoder dropout per stage, highest resolution first
    dropout: tuple[float, ...] = (0.2, 0.1, 0.1)
    convs_per_stage: int = 1
    max_width: int = 256
    # segmenter inputs carry one extra boundary channel per stream
    boundary_channels: bool = False
    # segmenter head also receives the boundary map (image stream)
    reinject_skip: bool = False
    fcn_skips: bool = True
    side_loss_weight: float = 1.0
    fuse_loss_weight: float = 1.0
    seg_loss_weight: float = 1.0

    def validate(self) -> "ArchConfig":
        if self.depth < 1:
            raise ConfigError(f"depth must be >= 1, got {self.depth}")
        if self.scales not in (1, 3):
            raise ConfigError(f"scales must be 1 or 3, got {self.scales}")
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if min(self.base_width, self.image_channels, self.height_channels, self.convs_per_stage) < 1:
            raise ConfigError("widths, channel counts and convs_per_stage must be >= 1")
        if any(not 0 <= r < 1 for r in self.dropout):
            raise ConfigError(f"dropout rates must lie in [0, 1): {self.dropout}")
        if self.reinject_skip and not self.boundary_channels:
            raise ConfigError("reinject_skip requires boundary_channels")
        return self

    @property
    def multiple(self) -> int:
        """Input tiles must be padded to a multiple of this."""
        return 2 ** self.depth * (4 if self.scales == 3 else 1)

    def width(self, stage: int) -> int:
        return min(self.base_width * 2**stage, self.max_width)

    def dropout_rate(self, stage: int) -> float:
        if not self.dropout:
            return 0.0
        return self.dropout[min(stage, len(self.dropout) - 1)]


@dataclass
class LayerNode:
    name: str
    kind: str
    inputs: list[str]
    params: dict[str, str] = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


class ModelGraph:
    def __init__(self, config: ArchConfig, name: str = ""):
        self.config = config
        self.name = name
        self.nodes: dict[str, LayerNode] = {}
        self.params: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.inputs: dict[str, int] = {}
        self.outputs: dict[str, object] = {}
        self.input_grads: dict[str, np.ndarray] = {}
        self._values: dict[str, np.ndarray] | None = None
        self._caches: dict[str, object] | None = None

    # ---------------------------------------------------------------- structure

    @property
    def topo_order(self) -> list[str]:
        return list(self.nodes)

    def add(self, node: LayerNode) -> str:
        if node.kind not in KINDS:
            raise ConfigError(f"unknown node kind {node.kind!r}")
        if node.name in self.nodes:
            raise ConfigError(f"duplicate node name {node.name!r}")
        for src in node.inputs:
            if src not in self.nodes:
                raise ConfigError(f"node {node.name!r} reads undefined node {src!r}")
        if node.kind == "unpool":
            pool = self.nodes.get(node.attrs.get("pool"))
            if pool is None or pool.kind != "maxpool":
                raise ConfigError(f"unpool {node.name!r} must reference a maxpool node")
        self.nodes[node.name] = node
        return node.name

    def validate(self) -> None:
        seen: set[str] = set()
        pool_users: dict[str, int] = {}
        for name, node in self.nodes.items():
            for src in node.inputs:
                if src not in seen:
                    raise ConfigError(f"graph not in topological order at {name!r} (input {src!r})")
            if node.kind == "unpool":
                pool_users[node.attrs["pool"]] = pool_users.get(node.attrs["pool"], 0) + 1
            seen.add(name)
        for pool, users in pool_users.items():
            if users != 1:
                raise ConfigError(f"maxpool {pool!r} feeds {users} unpool nodes")
        names = [p for n in self.nodes.values() for p in n.params.values()]
        shared = {p for p in names if names.count(p) > 1}
        if shared:
            raise ConfigError(f"parameters used by several nodes: {sorted(shared)}")

    def param_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def loss_nodes(self) -> list[LayerNode]:
        return [n for n in self.nodes.values() if n.kind == "loss-attach"]

    def nodes_of(self, kind: str) -> list[LayerNode]:
        return [n for n in self.nodes.values() if n.kind == kind]

    def copy(self) -> "ModelGraph":
        g = copy.deepcopy(self)
        g._values = g._caches = None
        return g

    # ---------------------------------------------------------------- execution

    def forward(self, inputs: dict[str, np.ndarray], mode: str = "infer", rng: np.random.Generator | None = None) -> dict:
        if mode not in ("train", "infer"):
            raise ConfigError(f"unknown mode {mode!r}")
        missing = [k for k in self.inputs if k not in inputs]
        if missing:
            raise ConfigError(f"missing graph inputs: {missing}")
        if rng is None:
            rng = np.random.default_rng(0)
        values: dict[str, np.ndarray] = {}
        caches: dict[str, object] = {}
        for name, node in self.nodes.items():
            xs = [values[s] for s in node.inputs]
            values[name], caches[name] = self._forward_node(node, xs, inputs, mode, rng, values, caches)
        # activations stay readable after either mode; backward needs train caches
        self._values = values
        self._caches = caches if mode == "train" else None
        return self._collect(values)

    def _collect(self, values) -> dict:
        out = {}
        for key, ref in self.outputs.items():
            out[key] = [values[r] for r in ref] if isinstance(ref, list) else values[ref]
        return out

    def _forward_node(self, node, xs, inputs, mode, rng, values, caches):
        p = {role: self.params[pname] for role, pname in node.params.items()}
        k = node.kind
        a = node.attrs
        if k == "input":
            x = np.asarray(inputs[node.name])
            ops.check_tensor(x, f"input {node.name}")
            if x.shape[1] != self.inputs[node.name]:
                raise ops.ShapeError(
                    f"channel axis: input {node.name!r} has {x.shape[1]} channels, graph expects {self.inputs[node.name]}"
                )
            return x, None
        if k in ("conv", "conv1x1"):
            return ops.conv2d(xs[0], p["w"], p["b"], 1, a.get("pad", 0))
        if k == "relu":
            return ops.relu(xs[0])
        if k == "maxpool":
            y, idx = ops.maxpool2(xs[0])
            return y, (idx, xs[0].shape)
        if k == "unpool":
            idx, shape = caches[a["pool"]]
            return ops.unpool2(xs[0], idx, shape[2:]), idx
        if k == "tconv":
            return ops.upsample_tconv(xs[0], p["w"], p["b"], a["factor"])
        if k == "avgpool":
            return ops.avgpool2(xs[0]), None
        if k == "concat":
            return ops.concat_channels(xs)
        if k == "add":
            return ops.add_elementwise(xs[0], xs[1]), None
        if k == "softmax":
            y = ops.softmax_channels(xs[0])
            return y, y
        if k == "batchnorm":
            running = {"mean": self.buffers[a["mean"]], "var": self.buffers[a["var"]]}
            return ops.batchnorm(xs[0], p["gamma"], p["beta"], mode, running)
        if k == "dropout":
            return ops.dropout(xs[0], a["rate"], mode, rng)
        if k in ("side-output", "loss-attach"):
            return xs[0], None
        raise ConfigError(f"no forward rule for kind {k!r}")

    def backward(self, loss_grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Back-propagate gradients seeded at named nodes (usually loss nodes).

        Contributions from several seeds add up. Returns parameter gradients,
        which are also stored on ``self.grads``; input gradients land on
        ``self.input_grads``.
        """
        if self._caches is None:
            raise GraphStateError("backward needs a preceding forward in train mode")
        for name in loss_grads:
            if name not in self.nodes:
                raise ConfigError(f"unknown node {name!r} in loss gradients")
        pending: dict[str, np.ndarray] = {}
        for name, g in loss_grads.items():
            pending[name] = pending.get(name, 0) + g
        grads = {pname: np.zeros_like(arr) for pname, arr in self.params.items()}
        input_grads = {}
        for name in reversed(self.topo_order):
            if name not in pending:
                continue
            node = self.nodes[name]
            dout = pending.pop(name)
            if node.kind == "input":
                input_grads[name] = dout
                continue
            dxs, dparams = self._backward_node(node, dout, self._caches[name])
            for role, g in dparams.items():
                grads[node.params[role]] += g
            for src, dx in zip(node.inputs, dxs):
                if dx is None:
                    continue
                pending[src] = pending[src] + dx if src in pending else dx
        self.grads = grads
        self.input_grads = input_grads
        return grads

    def _backward_node(self, node, dout, cache):
        k = node.kind
        if k in ("conv", "conv1x1"):
            dx, dw, db = ops.conv2d_backward(dout, cache)
            return [dx], {"w": dw, "b": db}
        if k == "relu":
            return [ops.relu_backward(dout, cache)], {}
        if k == "maxpool":
            idx, shape = cache
            return [ops.maxpool2_backward(dout, idx, shape)], {}
        if k == "unpool":
            return [ops.unpool2_backward(dout, cache)], {}
        if k == "tconv":
            dx, dw, db = ops.upsample_tconv_backward(dout, cache)
            return [dx], {"w": dw, "b": db}
        if k == "avgpool":
            return [ops.avgpool2_backward(dout)], {}
        if k == "concat":
            return ops.concat_channels_backward(dout, cache), {}
        if k == "add":
            return [dout, dout], {}
        if k == "softmax":
            return [ops.softmax_channels_backward(dout, cache)], {}
        if k == "batchnorm":
            dx, dg, db = ops.batchnorm_backward(dout, cache)
            return [dx], {"gamma": dg, "beta": db}
        if k == "dropout":
            return [ops.dropout_backward(dout, cache)], {}
        if k in ("side-output", "loss-attach"):
            return [dout], {}
        raise ConfigError(f"no backward rule for kind {k!r}")

    def activation(self, name: str) -> np.ndarray:
        if self._values is None:
            raise GraphStateError("no cached activations; run forward first")
        return self._values[name]

    # ---------------------------------------------------------------- weights

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.params)
        out.update(self.buffers)
        return out

    def cast(self, dtype) -> "ModelGraph":
        """Copy with all parameters and buffers converted to ``dtype``."""
        g = self.copy()
        g.params = {k: v.astype(dtype) for k, v in g.params.items()}
        g.buffers = {k: v.astype(dtype) for k, v in g.buffers.items()}
        return g


# ---------------------------------------------------------------------------
# building helpers


class _Builder:
    def __init__(self, graph: ModelGraph, rng: np.random.Generator):
        self.g = graph
        self.rng = rng

    def input(self, name: str, channels: int) -> str:
        self.g.inputs[name] = channels
        return self.g.add(LayerNode(name, "input", []))

    def _param(self, name: str, value: np.ndarray) -> str:
        if name in self.g.params:
            raise ConfigError(f"duplicate parameter {name!r}")
        self.g.params[name] = value
        return name

    def conv(self, name, src, cin, cout, k=3, kind="conv") -> str:
        w = self._param(f"{name}.w", xavier_init((cout, cin, k, k), self.rng))
        b = self._param(f"{name}.b", np.zeros(cout, np.float32))
        return self.g.add(LayerNode(name, kind, [src], {"w": w, "b": b}, {"pad": k // 2, "cin": cin, "cout": cout}))

    def conv1x1(self, name, src, cin, cout) -> str:
        return self.conv(name, src, cin, cout, k=1, kind="conv1x1")

    def tconv(self, name, src, channels, factor) -> str:
        w = self._param(f"{name}.w", ops.bilinear_kernel(channels, factor))
        b = self._param(f"{name}.b", np.zeros(channels, np.float32))
        return self.g.add(LayerNode(name, "tconv", [src], {"w": w, "b": b}, {"factor": factor, "channels": channels}))

    def batchnorm(self, name, src, c) -> str:
        gam = self._param(f"{name}.gamma", np.ones(c, np.float32))
        bet = self._param(f"{name}.beta", np.zeros(c, np.float32))
        self.g.buffers[f"{name}.running_mean"] = np.zeros(c, np.float32)
        self.g.buffers[f"{name}.running_var"] = np.ones(c, np.float32)
        return self.g.add(
            LayerNode(name, "batchnorm", [src], {"gamma": gam, "beta": bet},
                      {"mean": f"{name}.running_mean", "var": f"{name}.running_var"})
        )

    def simple(self, name, kind, srcs, **attrs) -> str:
        return self.g.add(LayerNode(name, kind, list(srcs), {}, attrs))


def _streams(cfg: ArchConfig) -> list[tuple[str, str, int]]:
    extra = 1 if cfg.boundary_channels else 0
    return [("img", "image", cfg.image_channels + extra), ("dem", "height", cfg.height_channels + extra)]


# ---------------------------------------------------------------------------
# boundary detector


def build_hed_h(cfg: ArchConfig, seed: int = 0, prefix: str = "hed") -> ModelGraph:
    """Two-stream multi-scale boundary detector with deep supervision.

    Each stream reads out a side output before every pooling stage; per-stage
    side outputs of the two streams are fused by concat + 1x1 conv and all
    fused maps are combined into ``boundary_final``.
    """
    cfg.validate()
    if 2 ** (cfg.depth - 1) > max(ops.UPSAMPLE_FACTORS):
        raise ConfigError(f"boundary detector depth {cfg.depth} needs upsampling beyond x{max(ops.UPSAMPLE_FACTORS)}")
    g = ModelGraph(cfg, name="hed_h")
    b = _Builder(g, np.random.default_rng(seed))
    stream_sides: dict[str, list[str]] = {}
    for stream, in_name, cin in [("img", "image", cfg.image_channels), ("dem", "height", cfg.height_channels)]:
        x = b.input(in_name, cin)
        c = cin
        sides = []
        for s in range(cfg.depth):
            for k in range(cfg.convs_per_stage):
                x = b.conv(f"{prefix}.{stream}.conv{s}_{k}", x, c, cfg.width(s))
                x = b.simple(f"{prefix}.{stream}.relu{s}_{k}", "relu", [x])
                c = cfg.width(s)
            side = b.conv1x1(f"{prefix}.{stream}.score{s}", x, c, 1)
            if s > 0:
                side = b.tconv(f"{prefix}.{stream}.up{s}", side, 1, 2**s)
            sides.append(b.simple(f"{prefix}.{stream}.side{s}", "side-output", [side]))
            if s < cfg.depth - 1:
                x = b.simple(f"{prefix}.{stream}.pool{s}", "maxpool", [x])
        stream_sides[stream] = sides
    fused = []
    losses = []
    for s in range(cfg.depth):
        cat = b.simple(f"{prefix}.side{s}.cat", "concat", [stream_sides["img"][s], stream_sides["dem"][s]])
        f = b.conv1x1(f"{prefix}.side{s}.fuse", cat, 2, 1)
        fused.append(f)
        losses.append(b.simple(f"{prefix}.side{s}.loss", "loss-attach", [f], loss="l2", target="boundary", weight=cfg.side_loss_weight))
    cat = b.simple(f"{prefix}.final.cat", "concat", fused)
    final = b.conv1x1(f"{prefix}.final.fuse", cat, cfg.depth, 1)
    b.simple(f"{prefix}.final.loss", "loss-attach", [final], loss="l2", target="boundary", weight=cfg.fuse_loss_weight)
    g.outputs = {
        "boundary_final": final,
        "boundary_side_outputs": fused,
        "stream_side_outputs": stream_sides["img"] + stream_sides["dem"],
    }
    g.validate()
    return g


# ---------------------------------------------------------------------------
# segmenters


def _seg_stream(b: _Builder, cfg: ArchConfig, prefix: str, stream: str, x: str, cin: int) -> tuple[str, int]:
    """Encoder/decoder with index-tracked pooling; returns (node, channels)."""
    c = cin
    pools = []
    for s in range(cfg.depth):
        for k in range(cfg.convs_per_stage):
            x = b.conv(f"{prefix}.{stream}.enc{s}_{k}", x, c, cfg.width(s))
            x = b.batchnorm(f"{prefix}.{stream}.enc{s}_{k}.bn", x, cfg.width(s))
            x = b.simple(f"{prefix}.{stream}.enc{s}_{k}.relu", "relu", [x])
            c = cfg.width(s)
        pools.append(b.simple(f"{prefix}.{stream}.pool{s}", "maxpool", [x]))
        x = pools[-1]
    for s in reversed(range(cfg.depth)):
        x = b.simple(f"{prefix}.{stream}.unpool{s}", "unpool", [x], pool=pools[s])
        for k in range(cfg.convs_per_stage):
            last = k == cfg.convs_per_stage - 1
            cout = cfg.width(s - 1) if (last and s > 0) else cfg.width(s)
            x = b.conv(f"{prefix}.{stream}.dec{s}_{k}", x, c, cout)
            if not (s == 0 and last and cfg.batchnorm_final_off):
                x = b.batchnorm(f"{prefix}.{stream}.dec{s}_{k}.bn", x, cout)
            x = b.simple(f"{prefix}.{stream}.dec{s}_{k}.relu", "relu", [x])
            c = cout
        rate = cfg.dropout_rate(s)
        if rate > 0:
            x = b.simple(f"{prefix}.{stream}.drop{s}", "dropout", [x], rate=rate)
    return x, c


def _seg_single_scale(b: _Builder, cfg: ArchConfig, prefix: str, image: str, height: str, boundary: str | None) -> str:
    """Two-stream encoder/decoder fused into class logits; returns logits node."""
    feats, chans = [], 0
    for (stream, _, cin), src in zip(_streams(cfg), (image, height)):
        x, c = _seg_stream(b, cfg, prefix, stream, src, cin)
        feats.append(x)
        chans += c
    if boundary is not None:
        feats.append(boundary)
        chans += 1
    cat = b.simple(f"{prefix}.head.cat", "concat", feats)
    return b.conv1x1(f"{prefix}.head.score", cat, chans, cfg.num_classes)


def _finish_segmenter(b: _Builder, cfg: ArchConfig, prefix: str, logits: str) -> None:
    probs = b.simple(f"{prefix}.probs", "softmax", [logits])
    b.simple(f"{prefix}.loss", "loss-attach", [logits], loss="xent", target="labels", weight=cfg.seg_loss_weight)
    b.g.outputs.update({"class_logits": logits, "class_probs": probs})


def _segmenter_inputs(b: _Builder, cfg: ArchConfig) -> tuple[str, str, str | None]:
    (_, img_name, img_c), (_, h_name, h_c) = _streams(cfg)
    image = b.input(img_name, img_c)
    height = b.input(h_name, h_c)
    boundary = b.input("boundary", 1) if cfg.reinject_skip else None
    return image, height, boundary


def build_seg_h(cfg: ArchConfig, seed: int = 0, prefix: str = "seg") -> ModelGraph:
    cfg.validate()
    g = ModelGraph(cfg, name="seg_h")
    b = _Builder(g, np.random.default_rng(seed))
    image, height, boundary = _segmenter_inputs(b, cfg)
    logits = _seg_single_scale(b, cfg, prefix, image, height, boundary)
    _finish_segmenter(b, cfg, prefix, logits)
    g.validate()
    return g


def build_multiscale_seg(cfg: ArchConfig, n_scales: int = 3, seed: int = 0, prefix: str = "seg") -> ModelGraph:
    """Independent-weight copies of the two-stream segmenter at input scales
    1, 1/2 and 1/4 (2x2 average pooling), upsampled back with learnable
    transposed convolutions and fused by concat + 1x1 conv."""
    if n_scales not in (1, 3):
        raise ConfigError(f"n_scales must be 1 or 3, got {n_scales}")
    if n_scales == 1:
        return build_seg_h(replace(cfg, scales=1), seed=seed, prefix=prefix)
    cfg = replace(cfg, scales=3).validate()
    g = ModelGraph(cfg, name="seg_h_msc")
    b = _Builder(g, np.random.default_rng(seed))
    image, height, boundary = _segmenter_inputs(b, cfg)
    srcs = (image, height, boundary)
    per_scale = []
    for s in range(n_scales):
        if s > 0:
            srcs = tuple(
                None if src is None else b.simple(f"{prefix}.s{s}.down.{name}", "avgpool", [src])
                for src, name in zip(srcs, ("image", "height", "boundary"))
            )
        logits = _seg_single_scale(b, cfg, f"{prefix}.s{s}", *srcs)
        if s > 0:
            logits = b.tconv(f"{prefix}.s{s}.up", logits, cfg.num_classes, 2**s)
        per_scale.append(logits)
    cat = b.simple(f"{prefix}.ms.cat", "concat", per_scale)
    fused = b.conv1x1(f"{prefix}.ms.fuse", cat, n_scales * cfg.num_classes, cfg.num_classes)
    _finish_segmenter(b, cfg, prefix, fused)
    g.validate()
    return g


def build_scale_branch(cfg: ArchConfig, scale: int, seed: int = 0, prefix: str = "seg") -> ModelGraph:
    """One branch of the three-scale segmenter as a standalone network.

    Parameter names match the branch inside :func:`build_multiscale_seg`, so
    weights trained here load straight into the fused model.
    """
    if scale not in (0, 1, 2):
        raise ConfigError(f"scale must be 0, 1 or 2, got {scale}")
    cfg = replace(cfg, scales=3).validate()
    g = ModelGraph(cfg, name=f"seg_h_s{scale}")
    b = _Builder(g, np.random.default_rng(seed))
    srcs = _segmenter_inputs(b, cfg)
    for s in range(1, scale + 1):
        srcs = tuple(
            None if src is None else b.simple(f"{prefix}.s{s}.down.{name}", "avgpool", [src])
            for src, name in zip(srcs, ("image", "height", "boundary"))
        )
    logits = _seg_single_scale(b, cfg, f"{prefix}.s{scale}", *srcs)
    if scale > 0:
        logits = b.tconv(f"{prefix}.s{scale}.up", logits, cfg.num_classes, 2**scale)
    _finish_segmenter(b, cfg, f"{prefix}.s{scale}", logits)
    g.validate()
    return g


def build_fcn_style(cfg: ArchConfig, seed: int = 0, prefix: str = "fcn") -> ModelGraph:
    """Reduced-depth FCN analog: plain encoder, two 1x1 blocks in place of
    fully connected layers, x2 transposed-conv decoder with summed skip
    scores from the pre-pool encoder features (disabled by ``fcn_skips``)."""
    cfg.validate()
    g = ModelGraph(cfg, name="fcn_h")
    b = _Builder(g, np.random.default_rng(seed))
    image, height, boundary = _segmenter_inputs(b, cfg)
    n = cfg.num_classes
    stream_scores = []
    for (stream, _, cin), x in zip(_streams(cfg), (image, height)):
        c = cin
        skips = []
        for s in range(cfg.depth):
            for k in range(cfg.convs_per_stage):
                x = b.conv(f"{prefix}.{stream}.enc{s}_{k}", x, c, cfg.width(s))
                x = b.simple(f"{prefix}.{stream}.enc{s}_{k}.relu", "relu", [x])
                c = cfg.width(s)
            skips.append((x, c))
            x = b.simple(f"{prefix}.{stream}.pool{s}", "maxpool", [x])
        head = 2 * cfg.width(cfg.depth - 1)
        for k in range(2):
            x = b.conv1x1(f"{prefix}.{stream}.fc{k}", x, c, head)
            x = b.simple(f"{prefix}.{stream}.fc{k}.relu", "relu", [x])
            rate = cfg.dropout_rate(cfg.depth - 1)
            if rate > 0:
                x = b.simple(f"{prefix}.{stream}.fc{k}.drop", "dropout", [x], rate=rate)
            c = head
        x = b.conv1x1(f"{prefix}.{stream}.score", x, c, n)
        for s in reversed(range(cfg.depth)):
            x = b.tconv(f"{prefix}.{stream}.up{s}", x, n, 2)
            if cfg.fcn_skips:
                src, sc = skips[s]
                sk = b.conv1x1(f"{prefix}.{stream}.skip{s}", src, sc, n)
                x = b.simple(f"{prefix}.{stream}.sum{s}", "add", [x, sk])
        stream_scores.append(x)
    if boundary is not None:
        stream_scores.append(boundary)
    cat = b.simple(f"{prefix}.head.cat", "concat", stream_scores)
    logits = b.conv1x1(f"{prefix}.head.score", cat, 2 * n + (boundary is not None), n)
    _finish_segmenter(b, cfg, prefix, logits)
    g.validate()
    return g


# ---------------------------------------------------------------------------
# assembly


def assemble_boundary_segmenter(boundary: ModelGraph, segmenter: ModelGraph, reinject_skip: bool | None = None) -> ModelGraph:
    """Put the boundary detector in front of a segmenter.

    The detector's ``boundary_final`` is concatenated onto each raw input
    stream of the segmenter; if the segmenter has a ``boundary`` input (built
    with ``reinject_skip``) it is fed the same map right before the class
    score layer. Both graphs keep their loss nodes.
    """
    seg_cfg = segmenter.config
    if reinject_skip is not None and reinject_skip != ("boundary" in segmenter.inputs):
        raise ConfigError(
            f"reinject_skip={reinject_skip} but the segmenter was built with reinject_skip={seg_cfg.reinject_skip}"
        )
    for name in ("image", "height"):
        need = boundary.inputs[name] + 1
        if segmenter.inputs.get(name) != need:
            raise ConfigError(
                f"channel mismatch on {name!r}: segmenter expects {segmenter.inputs.get(name)}, "
                f"boundary-augmented input has {need}"
            )
    clash = (set(boundary.params) | set(boundary.buffers)) & (set(segmenter.params) | set(segmenter.buffers))
    clash |= {n for n, node in segmenter.nodes.items() if node.kind != "input"} & set(boundary.nodes)
    if clash:
        raise ConfigError(f"node or parameter names collide: {sorted(clash)[:5]}")
    final = boundary.outputs["boundary_final"]
    g = ModelGraph(replace(seg_cfg), name=f"{boundary.name}+{segmenter.name}")
    g.inputs = dict(boundary.inputs)
    for node in boundary.nodes.values():
        g.add(copy.deepcopy(node))
    rename = {}
    for name in ("image", "height"):
        cat = f"assembled.{name}+boundary"
        g.add(LayerNode(cat, "concat", [name, final]))
        rename[name] = cat
    if "boundary" in segmenter.inputs:
        rename["boundary"] = final
    for node in segmenter.nodes.values():
        if node.kind == "input":
            continue
        n = copy.deepcopy(node)
        n.inputs = [rename.get(s, s) for s in n.inputs]
        g.add(n)
    g.params = {**copy.deepcopy(boundary.params), **copy.deepcopy(segmenter.params)}
    g.buffers = {**copy.deepcopy(boundary.buffers), **copy.deepcopy(segmenter.buffers)}
    g.outputs = {**boundary.outputs, **{k: v for k, v in segmenter.outputs.items()}}
    g.validate()
    return g


# ---------------------------------------------------------------------------
# weights


def save_weights(graph: ModelGraph, path) -> None:
    formats.write_tensors(path, graph.state_tensors())


def load_weights(graph: ModelGraph, path, strict: bool = True, rename: dict[str, str] | None = None) -> list[str]:
    """Load named tensors into ``graph``; returns the names that were set.

    ``rename`` maps file-name prefixes to graph-name prefixes. With
    ``strict=False`` tensors missing on either side are skipped, which is
    how stage weights are imported into larger graphs; shape mismatches
    always fail.
    """
    tensors = formats.read_tensors(path)
    if rename:
        mapped = {}
        for name, arr in tensors.items():
            for old, new in rename.items():
                if name.startswith(old):
                    name = new + name[len(old):]
                    break
            mapped[name] = arr
        tensors = mapped
    own = graph.state_tensors()
    problems = []
    for name, arr in tensors.items():
        if name not in own:
            if strict:
                problems.append(f"{name}: in file, not in graph")
        elif own[name].shape != arr.shape:
            problems.append(f"{name}: file shape {arr.shape} != graph shape {own[name].shape}")
    if strict:
        problems += [f"{name}: in graph, not in file" for name in own if name not in tensors]
    if problems:
        raise WeightMismatchError(problems)
    loaded = []
    for name, arr in tensors.items():
        if name in graph.params:
            graph.params[name] = arr.astype(graph.params[name].dtype)
        elif name in graph.buffers:
            graph.buffers[name] = arr.astype(graph.buffers[name].dtype)
        else:
            continue
        loaded.append(name)
    return loaded
