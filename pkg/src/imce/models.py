"""Graph builders: residual-network replicas, pipeline chains, and a seeded
random-graph generator.

The replicas reproduce published node censuses and topologies with random
weights at desk scale; they are the standard fixtures for compiler, mapper
and cluster tests, and double as CLI demo models.
"""
from __future__ import annotations

import numpy as np

from .ir import Dtype, GraphNode, ModelGraph, OpKind, TensorSpec, TensorValue, validate


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.nodes: list[GraphNode] = []
        self.inits: dict[str, TensorValue] = {}

    def conv_w(self, name: str, out_c: int, in_c: int, k: int) -> str:
        fan_in = in_c * k * k
        w = self.rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(out_c, in_c, k, k)).astype(np.float32)
        self.inits[name] = TensorValue.from_array(name, w)
        return name

    def bias(self, name: str, n: int) -> str:
        b = self.rng.normal(0.0, 0.05, size=(n,)).astype(np.float32)
        self.inits[name] = TensorValue.from_array(name, b)
        return name

    def mvm_w(self, name: str, out_n: int, in_n: int) -> str:
        w = self.rng.normal(0.0, 1.0 / np.sqrt(in_n), size=(out_n, in_n)).astype(np.float32)
        self.inits[name] = TensorValue.from_array(name, w)
        return name

    def add(self, node: GraphNode) -> str:
        self.nodes.append(node)
        return node.outputs[0]

    def conv(self, nid: str, x: str, in_c: int, out_c: int, k: int, stride: int, pad: int,
             kind: OpKind = OpKind.Conv2D, with_bias: bool = True) -> str:
        ins = [x, self.conv_w(f"{nid}.w", out_c, in_c, k)]
        if with_bias:
            ins.append(self.bias(f"{nid}.b", out_c))
        attrs = {"kernel_shape": [k, k], "strides": [stride, stride], "pads": [pad, pad]}
        return self.add(GraphNode(nid, kind, ins, [f"{nid}.out"], attrs))

    def relu(self, nid: str, x: str) -> str:
        return self.add(GraphNode(nid, OpKind.ReLU, [x], [f"{nid}.out"]))

    def graph(self, inputs: list[TensorSpec], outputs: list[TensorSpec]) -> ModelGraph:
        g = ModelGraph(self.nodes, self.inits, inputs, outputs)
        validate(g)
        return g


def _res_block(b: _Builder, name: str, x: str, in_c: int, out_c: int, stride: int,
               fused: bool) -> str:
    """conv-relu / conv / (1x1 shortcut when reshaping) / add-relu."""
    conv_kind = OpKind.FusedConvReLU if fused else OpKind.Conv2D
    a = b.conv(f"{name}_conv_a", x, in_c, out_c, 3, stride, 1, kind=conv_kind)
    if not fused:
        a = b.relu(f"{name}_relu_a", a)
    y = b.conv(f"{name}_conv_b", a, out_c, out_c, 3, 1, 1)
    short = x
    if stride != 1 or in_c != out_c:
        short = b.conv(f"{name}_conv_s", x, in_c, out_c, 1, stride, 0)
    add_kind = OpKind.FusedAddReLU if fused else OpKind.Add
    out = b.add(GraphNode(f"{name}_add", add_kind, [y, short], [f"{name}_add.out"]))
    if not fused:
        out = b.relu(f"{name}_relu", out)
    return out


def resnet8(seed: int = 0, size: int = 16, channels=(16, 32, 64), classes: int = 10,
            fused: bool = True) -> ModelGraph:
    """Residual classifier replica: 14 nodes in fused form (9 conv-class,
    1 avg-pool, 1 MVM, 3 add-class); 21 nodes with explicit ReLUs."""
    b = _Builder(seed)
    c1, c2, c3 = channels
    stem_kind = OpKind.FusedConvReLU if fused else OpKind.Conv2D
    x = b.conv("stem", "image", 3, c1, 3, 1, 1, kind=stem_kind)
    if not fused:
        x = b.relu("stem_relu", x)
    x = _res_block(b, "block1", x, c1, c1, 1, fused)
    x = _res_block(b, "block2", x, c1, c2, 2, fused)
    x = _res_block(b, "block3", x, c2, c3, 2, fused)
    s = size // 4
    x = b.add(GraphNode("gap", OpKind.AvgPool, [x], ["gap.out"],
                        {"kernel_shape": [s, s], "strides": [1, 1], "pads": [0, 0]}))
    head_ins = [x, b.mvm_w("head.w", classes, c3), b.bias("head.b", classes)]
    b.add(GraphNode("head", OpKind.MVM, head_ins, ["logits"]))
    return b.graph(
        [TensorSpec("image", (3, size, size), Dtype.FP32)],
        [TensorSpec("logits", (classes,), Dtype.FP32)],
    )


def resnet18s(seed: int = 0, size: int = 16, channels=(8, 16, 32, 64), classes: int = 10) -> ModelGraph:
    """30-node small residual net: 20 conv-class, 8 add-class, avg-pool, MVM."""
    b = _Builder(seed)
    x = b.conv("stem", "image", 3, channels[0], 3, 1, 1, kind=OpKind.FusedConvReLU)
    in_c = channels[0]
    for si, out_c in enumerate(channels, start=1):
        for bi in range(2):
            stride = 2 if (si > 1 and bi == 0) else 1
            x = _res_block(b, f"s{si}b{bi}", x, in_c, out_c, stride, fused=True)
            in_c = out_c
    s = size // 8
    x = b.add(GraphNode("gap", OpKind.AvgPool, [x], ["gap.out"],
                        {"kernel_shape": [s, s], "strides": [1, 1], "pads": [0, 0]}))
    head_ins = [x, b.mvm_w("head.w", classes, in_c), b.bias("head.b", classes)]
    b.add(GraphNode("head", OpKind.MVM, head_ins, ["logits"]))
    return b.graph(
        [TensorSpec("image", (3, size, size), Dtype.FP32)],
        [TensorSpec("logits", (classes,), Dtype.FP32)],
    )


def yolo_snippet(seed: int = 0, size: int = 12, channels: int = 8) -> ModelGraph:
    """Two conv stages each followed by an explicit Sigmoid/Mul pair."""
    b = _Builder(seed)
    x = "image"
    in_c = 3
    for i in range(2):
        y = b.conv(f"conv{i}", x, in_c, channels, 3, 1, 1)
        s = b.add(GraphNode(f"sig{i}", OpKind.Sigmoid, [y], [f"sig{i}.out"]))
        x = b.add(GraphNode(f"mul{i}", OpKind.Mul, [y, s], [f"mul{i}.out"]))
        in_c = channels
    out = x
    return b.graph(
        [TensorSpec("image", (3, size, size), Dtype.FP32)],
        [TensorSpec(out, (channels, size, size), Dtype.FP32)],
    )


def conv_chain(stages: int = 6, seed: int = 0, size: int = 24, channels: int = 32) -> ModelGraph:
    """Linear pipeline of same-shape convolutions (pipelining benchmarks)."""
    b = _Builder(seed)
    x = "image"
    in_c = 3
    for i in range(stages):
        x = b.conv(f"stage{i:02d}", x, in_c, channels, 3, 1, 1)
        in_c = channels
    return b.graph(
        [TensorSpec("image", (3, size, size), Dtype.FP32)],
        [TensorSpec(x, (channels, size, size), Dtype.FP32)],
    )


def single_mvm(seed: int = 0, in_n: int = 16, out_n: int = 16, identity: bool = False) -> ModelGraph:
    b = _Builder(seed)
    if identity:
        w = np.eye(out_n, in_n, dtype=np.float32)
        b.inits["w"] = TensorValue.from_array("w", w)
    else:
        b.mvm_w("w", out_n, in_n)
    b.add(GraphNode("mvm", OpKind.MVM, ["x", "w"], ["y"]))
    return b.graph(
        [TensorSpec("x", (in_n,), Dtype.FP32)],
        [TensorSpec("y", (out_n,), Dtype.FP32)],
    )


def digits_cnn(weights: dict[str, np.ndarray]) -> ModelGraph:
    """Small trained CNN over 8x8 single-channel images (10 classes).

    Expects float32 arrays: conv1.w [8,1,3,3], conv1.b [8], conv2.w [16,8,3,3],
    conv2.b [16], fc.w [10,64], fc.b [10].
    """
    b = _Builder(0)
    for name, arr in weights.items():
        b.inits[name] = TensorValue.from_array(name, np.asarray(arr, dtype=np.float32))
    pool_attrs = {"kernel_shape": [2, 2], "strides": [2, 2], "pads": [0, 0]}
    conv_attrs = {"kernel_shape": [3, 3], "strides": [1, 1], "pads": [1, 1]}
    b.add(GraphNode("conv1", OpKind.Conv2D, ["image", "conv1.w", "conv1.b"], ["conv1.out"], conv_attrs))
    b.add(GraphNode("relu1", OpKind.ReLU, ["conv1.out"], ["relu1.out"]))
    b.add(GraphNode("pool1", OpKind.MaxPool, ["relu1.out"], ["pool1.out"], pool_attrs))
    b.add(GraphNode("conv2", OpKind.Conv2D, ["pool1.out", "conv2.w", "conv2.b"], ["conv2.out"], conv_attrs))
    b.add(GraphNode("relu2", OpKind.ReLU, ["conv2.out"], ["relu2.out"]))
    b.add(GraphNode("pool2", OpKind.MaxPool, ["relu2.out"], ["pool2.out"], pool_attrs))
    b.add(GraphNode("fc", OpKind.MVM, ["pool2.out", "fc.w", "fc.b"], ["logits"]))
    return b.graph(
        [TensorSpec("image", (1, 8, 8), Dtype.FP32)],
        [TensorSpec("logits", (10,), Dtype.FP32)],
    )


# ---------------------------------------------------------------------------
# Random graphs
# ---------------------------------------------------------------------------


def random_graph(seed: int, max_nodes: int = 15) -> ModelGraph:
    """Seeded random DAG over the supported op set, always valid.

    Grows from one [C,H,W] input, tracking tensor shapes so every sampled op
    type-checks; unconsumed leaves become graph outputs.
    """
    rng = np.random.default_rng(seed)
    b = _Builder(seed + 101)
    c0 = int(rng.choice([1, 2, 3, 4]))
    hw = int(rng.choice([6, 8, 10]))
    spatial: list[tuple[str, tuple[int, int, int]]] = [("image", (c0, hw, hw))]
    flat: list[tuple[str, tuple[int]]] = []
    n_nodes = int(rng.integers(4, max_nodes + 1))

    ops = ["conv", "conv_relu", "relu", "sigmoid", "silu_pattern", "add", "mul",
           "maxpool", "avgpool", "concat", "split", "flatten", "mvm"]
    probs = np.array([0.16, 0.10, 0.08, 0.05, 0.10, 0.10, 0.05, 0.07, 0.05, 0.07, 0.06, 0.06, 0.05])
    probs = probs / probs.sum()

    i = 0
    guard = 0
    while i < n_nodes and guard < 400:
        guard += 1
        op = str(rng.choice(ops, p=probs))
        nid = f"n{i:02d}"
        t = f"t{i:02d}"
        if op in ("conv", "conv_relu") and spatial:
            name, (c, h, w) = spatial[rng.integers(len(spatial))]
            k = int(rng.choice([1, 2, 3]))
            s = int(rng.choice([1, 2]))
            p = int(rng.choice([0, 1]))
            oh = (h + 2 * p - k) // s + 1
            if oh < 1:
                continue
            out_c = int(rng.choice([2, 4, 8]))
            y = b.conv(nid, name, c, out_c, k, s, p)
            i += 1
            if op == "conv_relu" and i < n_nodes:
                y = b.relu(f"n{i:02d}", y)
                spatial.append((y, (out_c, oh, oh)))
                i += 1
            else:
                spatial.append((y, (out_c, oh, oh)))
        elif op == "relu" and spatial:
            name, shape = spatial[rng.integers(len(spatial))]
            b.add(GraphNode(nid, OpKind.ReLU, [name], [t]))
            spatial.append((t, shape))
            i += 1
        elif op == "sigmoid" and spatial:
            name, shape = spatial[rng.integers(len(spatial))]
            b.add(GraphNode(nid, OpKind.Sigmoid, [name], [t]))
            spatial.append((t, shape))
            i += 1
        elif op == "silu_pattern" and spatial and i + 1 < n_nodes:
            name, shape = spatial[rng.integers(len(spatial))]
            b.add(GraphNode(nid, OpKind.Sigmoid, [name], [t]))
            mid = f"n{i + 1:02d}"
            b.add(GraphNode(mid, OpKind.Mul, [name, t], [f"t{i + 1:02d}"]))
            spatial.append((f"t{i + 1:02d}", shape))
            i += 2
        elif op in ("add", "mul") and spatial:
            by_shape: dict[tuple, list[str]] = {}
            for name, shape in spatial:
                by_shape.setdefault(shape, []).append(name)
            cands = [(s, ns) for s, ns in by_shape.items() if len(ns) >= 1]
            shape, names = cands[rng.integers(len(cands))]
            a = names[rng.integers(len(names))]
            c = names[rng.integers(len(names))]
            kind = OpKind.Add if op == "add" else OpKind.Mul
            b.add(GraphNode(nid, kind, [a, c], [t]))
            spatial.append((t, shape))
            i += 1
        elif op in ("maxpool", "avgpool") and spatial:
            name, (c, h, w) = spatial[rng.integers(len(spatial))]
            k = int(rng.choice([2, 3]))
            if h < k or w < k:
                continue
            kind = OpKind.MaxPool if op == "maxpool" else OpKind.AvgPool
            attrs = {"kernel_shape": [k, k], "strides": [k, k], "pads": [0, 0]}
            b.add(GraphNode(nid, kind, [name], [t], attrs))
            spatial.append((t, (c, h // k, w // k)))
            i += 1
        elif op == "concat" and spatial:
            by_hw: dict[tuple, list[tuple[str, tuple]]] = {}
            for name, shape in spatial:
                by_hw.setdefault(shape[1:], []).append((name, shape))
            cands = [v for v in by_hw.values() if len(v) >= 2]
            if not cands:
                continue
            group = cands[rng.integers(len(cands))]
            k = min(len(group), int(rng.choice([2, 3])))
            picks = [group[j] for j in rng.choice(len(group), size=k, replace=False)]
            b.add(GraphNode(nid, OpKind.Concat, [p[0] for p in picks], [t], {"axis": 0}))
            total_c = sum(p[1][0] for p in picks)
            spatial.append((t, (total_c, picks[0][1][1], picks[0][1][2])))
            i += 1
        elif op == "split" and spatial:
            cands = [(name, s) for name, s in spatial if s[0] >= 2]
            if not cands:
                continue
            name, (c, h, w) = cands[rng.integers(len(cands))]
            c0_ = int(rng.integers(1, c))
            sizes = [c0_, c - c0_]
            outs = [f"{t}_a", f"{t}_b"]
            b.add(GraphNode(nid, OpKind.Split, [name], outs, {"axis": 0, "split_sizes": sizes}))
            spatial.append((outs[0], (sizes[0], h, w)))
            spatial.append((outs[1], (sizes[1], h, w)))
            i += 1
        elif op == "flatten" and spatial:
            name, shape = spatial[rng.integers(len(spatial))]
            b.add(GraphNode(nid, OpKind.Flatten, [name], [t]))
            flat.append((t, (int(np.prod(shape)),)))
            i += 1
        elif op == "mvm" and flat:
            name, (n_in,) = flat[rng.integers(len(flat))]
            out_n = int(rng.choice([4, 8, 10]))
            ins = [name, b.mvm_w(f"{nid}.w", out_n, n_in), b.bias(f"{nid}.b", out_n)]
            b.add(GraphNode(nid, OpKind.MVM, ins, [t]))
            flat.append((t, (out_n,)))
            i += 1

    consumed = {tname for n in b.nodes for tname in n.inputs}
    leaves = [(name, shape) for name, shape in spatial + flat
              if name not in consumed and name != "image"]
    if not leaves:
        name, shape = (spatial + flat)[-1]
        leaves = [(name, shape)]
    outputs = [TensorSpec(name, shape, Dtype.FP32) for name, shape in leaves]
    return b.graph([TensorSpec("image", (c0, hw, hw), Dtype.FP32)], outputs)
