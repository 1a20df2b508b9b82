"""Decoded layer descriptors -> primitive layers -> executable torch network."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field

import torch
from torch import nn
from torch.nn import functional as F

LAYER_KINDS = ("convblock", "macro-node", "transition", "fc", "softmax", "poolblock")
ACTIVATIONS = ("relu", "swish", "sigmoid", "linear", "softmax")


class PlanError(ValueError):
    """The decoded architecture cannot be realized (bad shapes, missing attributes...)."""


@dataclass
class LayerDescriptor:
    kind: str
    attrs: list
    inputs: list

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise PlanError(f"unknown layer kind {self.kind!r}")

    def get(self, key, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default

    def require(self, key):
        v = self.get(key)
        if v is None:
            raise PlanError(f"{self.kind} descriptor lacks attribute {key!r}")
        return v


@dataclass
class NetworkPlan:
    descriptors: list
    input_shape: tuple = (32, 32, 3)
    metadata: list = field(default_factory=list)

    @property
    def edges(self):
        return [list(d.inputs) for d in self.descriptors]

    def edge_set(self):
        return {(src, i) for i, d in enumerate(self.descriptors) for src in d.inputs}

    def content(self) -> dict:
        return {
            "input_shape": list(self.input_shape),
            "layers": [{"kind": d.kind, "attrs": [[k, v] for k, v in d.attrs], "inputs": list(d.inputs)}
                       for d in self.descriptors],
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.content(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def descriptor_from_attrs(attrs, inputs) -> LayerDescriptor:
    d = dict(attrs)
    layer = d.get("layer")
    if layer == "fc" and d.get("act") == "softmax":
        kind = "softmax"
    elif layer is None:
        raise PlanError("attribute list has no 'layer' entry")
    else:
        kind = layer
    return LayerDescriptor(kind, list(attrs), list(inputs))


# -- primitive expansion -------------------------------------------------------

def _int(v):
    return int(v)


def _bool(v):
    if isinstance(v, bool):
        return v
    return str(v).lower() == "true"


def _conv_region(act_pos, act, bn, conv):
    """Order (BN, activation, conv) for a conv block: pre region, conv, post region."""
    pre, post = [], []
    if bn == "pre":
        pre.append(("bn",))
    if act_pos == "preconv":
        pre.append(("act", act))
    if bn == "mid":
        post.append(("bn",))
    if act_pos != "preconv":
        post.append(("act", act))
    if bn == "post":
        post.append(("bn",))
    seq = pre + [conv] + post
    return [p for p in seq if p != ("act", "linear")]


def expand_block(d: LayerDescriptor, n_classes: int | None = None) -> list[tuple]:
    """Primitive layer sequence for one descriptor.

    Primitives are tuples: ``("conv", filters, kernel, stride, padding, bias)``,
    ``("bn",)``, ``("act", name)``, ``("pool", type, kernel, stride, padding)``
    and ``("dense", units, bias)``.
    """
    if d.kind == "convblock":
        conv = ("conv", _int(d.require("num-filters")), _int(d.require("filter-shape")),
                _int(d.require("stride")), d.require("padding"), _bool(d.require("bias")))
        return _conv_region(d.require("act-pos"), d.require("act"), d.require("bn"), conv)
    if d.kind == "macro-node":
        f = _int(d.require("num-filters"))
        mult = _int(d.require("filters-mult"))
        act = d.require("act")
        seq = [("bn",), ("act", act), ("conv", mult * f, 1, 1, "same", False),
               ("bn",), ("act", act), ("conv", f, 3, 1, "same", False)]
        return [p for p in seq if p != ("act", "linear")]
    if d.kind in ("transition", "poolblock"):
        seq = []
        if d.kind == "transition":
            conv = ("conv", _int(d.require("num-filters")), _int(d.require("conv-filter-shape")),
                    _int(d.require("conv-stride")), d.require("conv-padding"), _bool(d.require("conv-bias")))
            seq += _conv_region(d.require("act-pos"), d.require("act"), d.require("conv-bn"), conv)
        pool = ("pool", d.require("pooling"), _int(d.require("pool-kernel-size")),
                _int(d.require("pool-stride")), d.require("pool-padding"))
        pool_bn = d.get("pool-bn", "none")
        seq += [("bn",), pool] if pool_bn == "pre" else [pool, ("bn",)] if pool_bn in ("mid", "post") else [pool]
        return seq
    if d.kind == "fc":
        seq = [("dense", _int(d.require("num-units")), _bool(d.get("bias", True))), ("act", d.require("act"))]
        return [p for p in seq if p != ("act", "linear")]
    if d.kind == "softmax":
        units = n_classes if n_classes is not None else _int(d.require("num-units"))
        return [("dense", units, _bool(d.get("bias", True))), ("act", "softmax")]
    raise PlanError(f"unknown layer kind {d.kind!r}")


# -- shapes -------------------------------------------------------------------

def _window_out(size, k, stride, padding):
    if padding == "same":
        return math.ceil(size / stride)
    if padding == "valid":
        return (size - k) // stride + 1
    raise PlanError(f"unknown padding {padding!r}")


def aggregate_inputs(shapes: list[tuple]) -> tuple[list[int], tuple]:
    """Downsampling factors per input and the concatenated output shape.

    Spatial inputs are average-pooled (kernel = stride = factor) to the
    smallest map among them, then concatenated along channels.
    """
    if not shapes:
        raise PlanError("layer has no inputs")
    if len(shapes) == 1:
        return [1], tuple(shapes[0])
    if all(len(s) == 1 for s in shapes):
        return [1] * len(shapes), (sum(s[0] for s in shapes),)
    if any(len(s) != 3 for s in shapes):
        raise PlanError("cannot aggregate flat and spatial inputs")
    h = min(s[0] for s in shapes)
    w = min(s[1] for s in shapes)
    factors = []
    for sh, sw, _ in shapes:
        if sh % h or sw % w or sh // h != sw // w:
            raise PlanError(f"non-integral spatial ratio {sh}x{sw} -> {h}x{w}")
        factors.append(sh // h)
    return factors, (h, w, sum(s[2] for s in shapes))


def _primitive_shape(p, shape):
    kind = p[0]
    if kind in ("bn", "act"):
        return shape
    if kind == "conv":
        if len(shape) != 3:
            raise PlanError("convolution after flatten")
        _, filters, k, stride, padding, _ = p
        h, w = _window_out(shape[0], k, stride, padding), _window_out(shape[1], k, stride, padding)
        if h <= 0 or w <= 0:
            raise PlanError(f"non-positive spatial size after conv on {shape}")
        return (h, w, filters)
    if kind == "pool":
        if len(shape) != 3:
            raise PlanError("pooling after flatten")
        _, _, k, stride, padding = p
        h, w = _window_out(shape[0], k, stride, padding), _window_out(shape[1], k, stride, padding)
        if h <= 0 or w <= 0:
            raise PlanError(f"non-positive spatial size after pooling on {shape}")
        return (h, w, shape[2])
    if kind == "dense":
        return (p[1],)
    raise PlanError(f"unknown primitive {kind}")


def _flat(shape):
    return (math.prod(shape),)


def infer_shapes(plan: NetworkPlan, n_classes: int | None = None) -> list[dict]:
    """Per descriptor: aggregation factors, input/output shape, primitive shapes."""
    outputs = {-1: tuple(plan.input_shape)}
    table = []
    for i, d in enumerate(plan.descriptors):
        for src in d.inputs:
            if src not in outputs or src >= i:
                raise PlanError(f"layer {i} reads from {src}, which is not an earlier layer")
        prims = expand_block(d, n_classes)
        in_shapes = [outputs[s] for s in d.inputs]
        flatten = prims[0][0] == "dense" and any(len(s) == 3 for s in in_shapes)
        if flatten:
            in_shapes = [_flat(s) for s in in_shapes]
        factors, shape = aggregate_inputs(in_shapes)
        agg_shape = shape
        shapes = []
        for p in prims:
            if p[0] == "dense" and len(shape) == 3:
                shape = _flat(shape)
            shape = _primitive_shape(p, shape)
            shapes.append(shape)
        outputs[i] = shape
        table.append({"factors": factors, "flatten": flatten, "input": agg_shape,
                      "output": shape, "primitives": prims, "shapes": shapes})
    if plan.descriptors and plan.descriptors[-1].kind != "softmax":
        raise PlanError("final layer must be the softmax layer")
    return table


def check_plan(plan: NetworkPlan, n_classes: int | None = None) -> str | None:
    """None when the plan is buildable, else the reason."""
    try:
        infer_shapes(plan, n_classes)
    except PlanError as exc:
        return str(exc)
    return None


# -- torch realization ----------------------------------------------------------

def _same_pad(size, k, stride):
    out = math.ceil(size / stride)
    total = max((out - 1) * stride + k - size, 0)
    return total // 2, total - total // 2


class _Conv(nn.Module):
    def __init__(self, in_ch, in_hw, filters, k, stride, padding, bias):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, filters, k, stride=stride, bias=bias)
        self.pad = None
        if padding == "same":
            (t, b), (l, r) = _same_pad(in_hw[0], k, stride), _same_pad(in_hw[1], k, stride)
            if t or b or l or r:
                self.pad = (l, r, t, b)

    def forward(self, x):
        if self.pad is not None:
            x = F.pad(x, self.pad)
        return self.conv(x)


class _Pool(nn.Module):
    def __init__(self, kind, in_hw, k, stride, padding):
        super().__init__()
        if kind not in ("avg", "max"):
            raise PlanError(f"unknown pooling {kind!r}")
        self.kind, self.k, self.stride = kind, k, stride
        self.pad = None
        if padding == "same":
            (t, b), (l, r) = _same_pad(in_hw[0], k, stride), _same_pad(in_hw[1], k, stride)
            if t or b or l or r:
                self.pad = (l, r, t, b)

    def forward(self, x):
        if self.kind == "max":
            if self.pad is not None:
                x = F.pad(x, self.pad, value=float("-inf"))
            return F.max_pool2d(x, self.k, self.stride)
        if self.pad is None:
            return F.avg_pool2d(x, self.k, self.stride)
        # padded cells are excluded from the average
        ones = torch.ones_like(x[:1, :1])
        num = F.avg_pool2d(F.pad(x, self.pad), self.k, self.stride)
        den = F.avg_pool2d(F.pad(ones, self.pad), self.k, self.stride)
        return num / den


class _Act(nn.Module):
    def __init__(self, name):
        super().__init__()
        if name not in ACTIVATIONS:
            raise PlanError(f"unknown activation {name!r}")
        self.name = name

    def forward(self, x):
        if self.name == "relu":
            return F.relu(x)
        if self.name == "swish":
            return x * torch.sigmoid(x)
        if self.name == "sigmoid":
            return torch.sigmoid(x)
        return x  # linear; softmax is applied by Network.probabilities

    def extra_repr(self):
        return self.name


class _Block(nn.Module):
    def __init__(self, factors, flatten, layers):
        super().__init__()
        self.factors = factors
        self.flatten = flatten
        self.layers = nn.Sequential(*layers)

    def forward(self, inputs):
        if self.flatten:
            inputs = [t.flatten(1) for t in inputs]
        if len(inputs) > 1:
            inputs = [F.avg_pool2d(t, f) if f > 1 else t for t, f in zip(inputs, self.factors)]
            x = torch.cat(inputs, dim=1)
        else:
            x = inputs[0]
        for layer in self.layers:
            if isinstance(layer, nn.Linear) and x.dim() > 2:
                x = x.flatten(1)
            x = layer(x)
        return x


class Network(nn.Module):
    """Executable DAG; ``forward`` returns logits (the final softmax is left to the loss)."""

    def __init__(self, plan: NetworkPlan, n_classes: int):
        super().__init__()
        self.plan = plan
        self.n_classes = n_classes
        self.plan_hash = plan.hash
        self.table = infer_shapes(plan, n_classes)
        self.inputs = [list(d.inputs) for d in plan.descriptors]
        blocks = []
        for row in self.table:
            shape = row["input"]
            layers = []
            for p in row["primitives"]:
                if p[0] == "conv":
                    layers.append(_Conv(shape[2], shape[:2], *p[1:]))
                elif p[0] == "bn":
                    ch = shape[2] if len(shape) == 3 else shape[0]
                    layers.append(nn.BatchNorm2d(ch, eps=1e-5, momentum=0.1) if len(shape) == 3
                                  else nn.BatchNorm1d(ch, eps=1e-5, momentum=0.1))
                elif p[0] == "act":
                    layers.append(_Act(p[1]))
                elif p[0] == "pool":
                    layers.append(_Pool(p[1], shape[:2], *p[2:]))
                elif p[0] == "dense":
                    fan_in = math.prod(shape)
                    layers.append(nn.Linear(fan_in, p[1], bias=p[2]))
                shape = _primitive_shape(p, _flat(shape) if p[0] == "dense" else shape)
            blocks.append(_Block(row["factors"], row["flatten"], layers))
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        outs = {-1: x}
        for i, (block, srcs) in enumerate(zip(self.blocks, self.inputs)):
            outs[i] = block([outs[s] for s in srcs])
        return outs[len(self.blocks) - 1]

    def probabilities(self, x):
        return torch.softmax(self.forward(x), dim=1)

    def kernels(self):
        """Convolution and dense weight tensors (the L2-regularized set)."""
        return [m.weight for m in self.modules() if isinstance(m, (nn.Conv2d, nn.Linear))]

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_parameters(net: nn.Module, generator: torch.Generator | None = None):
    """He-uniform kernels, zero biases, BN gamma=1 beta=0."""
    with torch.no_grad():
        for m in net.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_uniform_(m.weight, nonlinearity="relu", generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm1d, nn.BatchNorm2d)):
                m.reset_parameters()
                m.reset_running_stats()


def build(plan: NetworkPlan, n_classes: int, seed: int = 0, dtype=torch.float32) -> Network:
    net = Network(plan, n_classes)
    g = torch.Generator().manual_seed(int(seed))
    init_parameters(net, g)
    return net.to(dtype)


def summary(plan: NetworkPlan, n_classes: int | None = None) -> str:
    """Human-readable layer table (kind, inputs, output shape, parameters)."""
    table = infer_shapes(plan, n_classes)
    net = Network(plan, n_classes or int(plan.descriptors[-1].get("num-units", 10)))
    lines = [f"{'#':>3}  {'kind':<11} {'inputs':<14} {'output':<16} {'params':>9}",
             "-" * 58]
    for i, (d, row, block) in enumerate(zip(plan.descriptors, table, net.blocks)):
        n = sum(p.numel() for p in block.parameters())
        shape = "x".join(str(s) for s in row["output"])
        lines.append(f"{i:>3}  {d.kind:<11} {str(d.inputs):<14} {shape:<16} {n:>9}")
    lines.append("-" * 58)
    lines.append(f"total parameters: {net.parameter_count()}   plan hash: {plan.hash}")
    return "\n".join(lines)
