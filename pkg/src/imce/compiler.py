"""High-level transformation pipeline: optimize -> fuse -> quantize -> reshape.

Turns a validated FP32 ModelGraph into a CompiledModel whose nodes carry
INT8 weights in accelerator-ready 2-D form, per-tensor symmetric scales, and
an analog/digital classification, plus the per-node info list and adjacency
artifacts the board tools consume.
"""
from __future__ import annotations

import copy
import json
import logging
import os
from dataclasses import dataclass

import numpy as np

from . import kernels_an, kernels_di
from .errors import DegenerateRangeError, QuantizationError, SizeError, ValidationError
from .ir import (
    ADD_CLASS,
    CONV_CLASS,
    Dtype,
    GraphNode,
    ModelGraph,
    OpKind,
    TensorSpec,
    TensorValue,
    infer_shapes,
    tensor_edges,
    topological_order,
    validate,
)
from .kernels_an import pad16
from .quant import QuantParams, quantize_fp32, round_half_away, scale_from_max_abs
from .reference import execute_fp32

log = logging.getLogger(__name__)

COMPILED_FORMAT = "imce-compiled"

AN_KINDS = frozenset(CONV_CLASS | {OpKind.MVM})
DI_KINDS = frozenset(
    ADD_CLASS
    | {
        OpKind.ReLU,
        OpKind.Sigmoid,
        OpKind.Mul,
        OpKind.SiLU,
        OpKind.MaxPool,
        OpKind.AvgPool,
        OpKind.Concat,
        OpKind.Split,
    }
)


# ---------------------------------------------------------------------------
# Calibration data
# ---------------------------------------------------------------------------


@dataclass
class CalibrationSet:
    """FP32 input samples used to derive static activation ranges."""

    samples: np.ndarray  # [N, *input_shape] float32

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim < 2 or self.samples.shape[0] == 0:
            raise QuantizationError("calibration set must hold at least one sample")

    def __len__(self) -> int:
        return self.samples.shape[0]

    def save(self, path: str) -> None:
        np.savez(path, samples=self.samples)

    @classmethod
    def load(cls, path: str) -> "CalibrationSet":
        with np.load(path) as z:
            return cls(z["samples"])


# ---------------------------------------------------------------------------
# Compiled representation
# ---------------------------------------------------------------------------


@dataclass
class CompiledNode:
    node: GraphNode  # post-fusion kind with quant map attached
    accel: str  # "an" | "di"
    act_inputs: list[str]  # activation input tensors, slot order
    in_shapes: list[tuple[int, ...]]
    out_shapes: list[tuple[int, ...]]
    weights2d: np.ndarray | None = None  # int8 [outC_p, patchlen_p], x16 padded
    out_features: int = 0  # logical rows of weights2d
    in_features: int = 0  # logical cols of weights2d
    bias: np.ndarray | None = None  # int32 [out_features]
    in_scale: QuantParams | None = None
    out_scale: QuantParams | None = None
    weight_scale: QuantParams | None = None
    cost_hint_us: float = 0.0

    @property
    def id(self) -> str:
        return self.node.id

    @property
    def kind(self) -> OpKind:
        return self.node.kind

    def scale_of(self, tensor: str) -> QuantParams:
        q = self.node.quant or {}
        if tensor not in q:
            raise QuantizationError(f"node '{self.id}': no scale recorded for tensor '{tensor}'")
        return q[tensor]

    def in_bytes(self) -> int:
        return int(sum(np.prod(s) for s in self.in_shapes))

    def out_bytes(self) -> int:
        return int(sum(np.prod(s) for s in self.out_shapes))


@dataclass
class CompiledModel:
    nodes: list[CompiledNode]  # topological order
    graph_inputs: list[tuple[TensorSpec, QuantParams]]
    graph_outputs: list[tuple[TensorSpec, QuantParams]]
    edges: list[tuple[str, str, str]]  # (src node, dst node, tensor)

    def node(self, node_id: str) -> CompiledNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def fpga_info(self) -> list[dict]:
        return [
            {
                "id": n.id,
                "class": n.accel,
                "in_bytes": n.in_bytes(),
                "out_bytes": n.out_bytes(),
                "cost_hint_us": round(n.cost_hint_us, 4),
            }
            for n in self.nodes
        ]

    def adjacency_edges(self) -> list[dict]:
        return [{"src": s, "dst": d, "tensor": t} for s, d, t in self.edges]


# ---------------------------------------------------------------------------
# Graph surgery helpers
# ---------------------------------------------------------------------------


def _clone(g: ModelGraph) -> ModelGraph:
    nodes = [
        GraphNode(n.id, n.kind, list(n.inputs), list(n.outputs), copy.deepcopy(n.attrs), dict(n.quant) if n.quant else None)
        for n in g.nodes
    ]
    return ModelGraph(nodes, dict(g.initializers), list(g.graph_inputs), list(g.graph_outputs))


def optimize(g: ModelGraph) -> ModelGraph:
    """Drop Flatten/Reshape (tensors are 1-D linear memory to the hardware)
    and fold constant-only subexpressions into initializers."""
    g = _fold_constants(_clone(g))
    g = _remove_views(g)
    validate(g)
    return g


def _fold_constants(g: ModelGraph) -> ModelGraph:
    out_names = {s.name for s in g.graph_outputs}
    changed = True
    while changed:
        changed = False
        for n in list(g.nodes):
            if any(t not in g.initializers for t in n.inputs):
                continue
            if any(t in out_names for t in n.outputs):
                continue
            if any(g.initializers[t].spec.dtype != Dtype.FP32 for t in n.inputs):
                continue
            sub = ModelGraph([n], {t: g.initializers[t] for t in n.inputs}, [], [])
            try:
                env = execute_fp32(sub, {}, record_all=True)
            except Exception:  # non-foldable (shape rules etc.) -> leave in place
                continue
            for t in n.outputs:
                g.initializers[t] = TensorValue.from_array(t, env[t].astype(np.float32))
            g.nodes.remove(n)
            changed = True
    return g


def _remove_views(g: ModelGraph) -> ModelGraph:
    shapes = infer_shapes(g)
    out_names = {s.name for s in g.graph_outputs}
    changed = True
    while changed:
        changed = False
        for n in list(g.nodes):
            if n.kind not in (OpKind.Flatten, OpKind.Reshape):
                continue
            t_in, t_out = n.inputs[0], n.outputs[0]
            if t_out in out_names:
                producer = g.producer_map().get(t_in)
                renameable = (
                    producer is not None
                    and t_in not in out_names
                    and len(g.consumer_map().get(t_in, [])) == 1
                )
                if renameable:
                    # keep the external name: rename the producer's tensor
                    producer.outputs = [t_out if t == t_in else t for t in producer.outputs]
                    g.nodes.remove(n)
                    old = next(s for s in g.graph_outputs if s.name == t_out)
                    new_spec = TensorSpec(t_out, shapes[t_in], old.dtype)
                    g.graph_outputs = [new_spec if s.name == t_out else s for s in g.graph_outputs]
                    shapes[t_out] = shapes[t_in]
                else:
                    # the view's input stays visible under its own name, so the
                    # output needs a producer: views are byte-identities on
                    # row-major buffers, lowered to a whole-tensor Split
                    dim0 = int(shapes[t_in][0])
                    g.nodes[g.nodes.index(n)] = GraphNode(
                        n.id, OpKind.Split, [t_in], [t_out], {"axis": 0, "split_sizes": [dim0]}
                    )
            else:
                for c in g.nodes:
                    c.inputs = [t_in if t == t_out else t for t in c.inputs]
                g.nodes.remove(n)
            changed = True
    return g


def fuse(g: ModelGraph) -> ModelGraph:
    """Rewrite single-consumer patterns into the fused accelerator kinds:
    Mul(x, Sigmoid(x)) -> SiLU, Conv+ReLU, Add+ReLU, Conv+SiLU."""
    g = _clone(g)
    changed = True
    while changed:
        changed = _fuse_silu_pattern(g) or _fuse_epilogue(g)
    validate(g)
    return g


def _single_consumer(g: ModelGraph, tensor: str) -> GraphNode | None:
    if tensor in {s.name for s in g.graph_outputs}:
        return None
    consumers = g.consumer_map().get(tensor, [])
    return consumers[0] if len(consumers) == 1 else None


def _fuse_silu_pattern(g: ModelGraph) -> bool:
    by_id = {n.id: n for n in g.nodes}
    for nid in topological_order(g):
        s = by_id[nid]
        if s.kind != OpKind.Sigmoid:
            continue
        x, sx = s.inputs[0], s.outputs[0]
        m = _single_consumer(g, sx)
        if m is None or m.kind != OpKind.Mul:
            continue
        if set(m.inputs) != {x, sx}:
            continue
        fused = GraphNode(m.id, OpKind.SiLU, [x], list(m.outputs), {})
        g.nodes[g.nodes.index(s)] = fused
        g.nodes.remove(m)
        return True
    return False


_EPILOGUE_PATTERNS = {
    (OpKind.Conv2D, OpKind.ReLU): OpKind.FusedConvReLU,
    (OpKind.Conv2D, OpKind.SiLU): OpKind.FusedConvSiLU,
    (OpKind.Add, OpKind.ReLU): OpKind.FusedAddReLU,
}


def _fuse_epilogue(g: ModelGraph) -> bool:
    by_id = {n.id: n for n in g.nodes}
    for nid in topological_order(g):
        head = by_id[nid]
        tail = _single_consumer(g, head.outputs[0]) if head.outputs else None
        if tail is None:
            continue
        fused_kind = _EPILOGUE_PATTERNS.get((head.kind, tail.kind))
        if fused_kind is None:
            continue
        fused = GraphNode(head.id, fused_kind, list(head.inputs), list(tail.outputs), copy.deepcopy(head.attrs))
        g.nodes[g.nodes.index(head)] = fused
        g.nodes.remove(tail)
        return True
    return False


def lower_avgpool(g: ModelGraph) -> ModelGraph:
    """Replace AvgPool with a depthwise convolution carrying uniform
    1/(kh*kw) weights, realized later as block-diagonal 2-D weights."""
    g = _clone(g)
    shapes = infer_shapes(g)
    for i, n in enumerate(list(g.nodes)):
        if n.kind != OpKind.AvgPool:
            continue
        c = shapes[n.inputs[0]][0]
        kh, kw = (int(k) for k in n.attrs["kernel_shape"])
        w_name = f"{n.id}.w"
        if w_name in g.initializers:
            raise ValidationError(f"cannot lower '{n.id}': tensor '{w_name}' already exists")
        w = np.full((c, 1, kh, kw), 1.0 / (kh * kw), dtype=np.float32)
        g.initializers[w_name] = TensorValue.from_array(w_name, w)
        attrs = {
            "kernel_shape": [kh, kw],
            "strides": [int(s) for s in n.attrs["strides"]],
            "pads": [int(p) for p in n.attrs["pads"]],
            "group": c,
        }
        g.nodes[i] = GraphNode(n.id, OpKind.Conv2D, [n.inputs[0], w_name], list(n.outputs), attrs)
    validate(g)
    return g


# ---------------------------------------------------------------------------
# Quantization
# ---------------------------------------------------------------------------


def _is_quantized(g: ModelGraph) -> bool:
    if not g.nodes:
        return False
    for n in g.nodes:
        if n.quant is None:
            return False
        if n.kind in CONV_CLASS or n.kind == OpKind.MVM:
            w = g.initializers.get(n.inputs[1])
            if w is None or w.spec.dtype != Dtype.INT8:
                return False
    return True


def _absorb_qdq(g: ModelGraph) -> tuple[ModelGraph, dict[str, float]]:
    """Fold explicit QuantizeLinear->DequantizeLinear pairs into scale
    overrides on the tensor they wrap."""
    overrides: dict[str, float] = {}
    changed = True
    while changed:
        changed = False
        for q in list(g.nodes):
            if q.kind != OpKind.QuantizeLinear:
                continue
            dq = _single_consumer(g, q.outputs[0])
            if dq is None or dq.kind != OpKind.DequantizeLinear:
                continue
            src = q.inputs[0]
            overrides[src] = float(q.attrs["scale"])
            dst = dq.outputs[0]
            out_names = {s.name for s in g.graph_outputs}
            if dst in out_names:
                continue  # leave boundary pairs to the runtime
            for c in g.nodes:
                c.inputs = [src if t == dst else t for t in c.inputs]
            g.nodes.remove(q)
            g.nodes.remove(dq)
            changed = True
            break
    return g, overrides


class _ScaleUnion:
    """Union-find over tensor names for ops that must share one scale."""

    def __init__(self):
        self.parent: dict[str, str] = {}

    def find(self, t: str) -> str:
        self.parent.setdefault(t, t)
        while self.parent[t] != t:
            self.parent[t] = self.parent[self.parent[t]]
            t = self.parent[t]
        return t

    def union(self, a: str, b: str) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic root: lexicographically smaller name wins
            lo, hi = sorted((ra, rb))
            self.parent[hi] = lo


def quantize(g: ModelGraph, cal: CalibrationSet | None, strict: bool = False) -> ModelGraph:
    """Attach per-tensor symmetric INT8 scales and convert initializers.

    Activation scale is max|v| over the calibration runs divided by 127;
    weight scale is per-tensor max|w|/127; biases become INT32 at scale
    in_scale*weight_scale.  Already-quantized graphs pass through unchanged.
    """
    if _is_quantized(g):
        return g
    g, overrides = _absorb_qdq(_clone(g))
    if cal is None or len(cal) == 0:
        raise QuantizationError("quantization needs a non-empty calibration set")
    if len(g.graph_inputs) != 1:
        raise QuantizationError("static calibration supports exactly one graph input")
    in_name = g.graph_inputs[0].name

    ranges: dict[str, float] = {}
    for sample in cal.samples:
        env = execute_fp32(g, {in_name: sample}, record_all=True)
        for t, arr in env.items():
            if t in g.initializers:
                continue
            m = float(np.max(np.abs(arr))) if arr.size else 0.0
            ranges[t] = max(ranges.get(t, 0.0), m)

    act_scale: dict[str, float] = {}
    for t in sorted(ranges):
        if ranges[t] <= 0.0:
            if strict:
                raise DegenerateRangeError(f"tensor '{t}' is identically zero over the calibration set")
            log.warning("tensor '%s' is identically zero over calibration; scale forced to 1.0", t)
        act_scale[t] = scale_from_max_abs(ranges[t])
    act_scale.update(overrides)

    # concat parts/output and split input/outputs must share a scale
    uf = _ScaleUnion()
    for n in g.nodes:
        if n.kind == OpKind.Concat:
            for t in n.inputs + n.outputs:
                uf.union(n.outputs[0], t)
        elif n.kind == OpKind.Split:
            for t in n.outputs:
                uf.union(n.inputs[0], t)
    classes: dict[str, list[str]] = {}
    for t in act_scale:
        classes.setdefault(uf.find(t), []).append(t)
    for members in classes.values():
        if len(members) > 1:
            s = max(act_scale[t] for t in members)
            for t in members:
                act_scale[t] = s

    # weights: one scale per initializer tensor
    weight_scale: dict[str, float] = {}
    new_inits: dict[str, TensorValue] = {}
    for n in g.nodes:
        if n.kind in CONV_CLASS or n.kind == OpKind.MVM:
            w_name = n.inputs[1]
            if w_name not in weight_scale:
                w = g.initializers[w_name].data.astype(np.float32)
                mx = float(np.max(np.abs(w))) if w.size else 0.0
                if mx <= 0.0:
                    if strict:
                        raise DegenerateRangeError(f"weight tensor '{w_name}' is identically zero")
                    log.warning("weight tensor '%s' is identically zero; scale forced to 1.0", w_name)
                ws = scale_from_max_abs(mx)
                weight_scale[w_name] = ws
                spec = TensorSpec(w_name, g.initializers[w_name].spec.shape, Dtype.INT8)
                new_inits[w_name] = TensorValue(spec, quantize_fp32(w, ws))

    # biases: INT32 at in_scale * weight_scale, one per consuming node
    bias_params: dict[str, float] = {}
    nodes_out: list[GraphNode] = []
    for n in g.nodes:
        quant: dict[str, QuantParams] = {}
        for t in n.inputs:
            if t in act_scale:
                quant[t] = QuantParams(act_scale[t])
        for t in n.outputs:
            quant[t] = QuantParams(act_scale[t])
        if n.kind in CONV_CLASS or n.kind == OpKind.MVM:
            w_name = n.inputs[1]
            quant[w_name] = QuantParams(weight_scale[w_name])
            new_inputs = list(n.inputs)
            if len(n.inputs) > 2:
                b_name = n.inputs[2]
                in_s = act_scale[g.activation_inputs(n)[0]]
                b_scale = float(np.float32(in_s) * np.float32(weight_scale[w_name]))
                if b_name in bias_params and bias_params[b_name] != b_scale:
                    # shared bias with a conflicting scale: give this node its own copy
                    uniq = f"{b_name}@{n.id}"
                    g.initializers[uniq] = TensorValue(
                        TensorSpec(uniq, g.initializers[b_name].spec.shape, Dtype.FP32),
                        g.initializers[b_name].data.copy(),
                    )
                    b_name = uniq
                    new_inputs[2] = uniq
                bias_params[b_name] = b_scale
                b = g.initializers[b_name].data.astype(np.float64)
                codes = round_half_away(b / np.float64(b_scale))
                codes = np.clip(codes, np.iinfo(np.int32).min, np.iinfo(np.int32).max)
                spec = TensorSpec(b_name, g.initializers[b_name].spec.shape, Dtype.INT32)
                new_inits[b_name] = TensorValue(spec, codes.astype(np.int32))
                quant[b_name] = QuantParams(b_scale)
            nodes_out.append(GraphNode(n.id, n.kind, new_inputs, list(n.outputs), copy.deepcopy(n.attrs), quant))
        else:
            nodes_out.append(GraphNode(n.id, n.kind, list(n.inputs), list(n.outputs), copy.deepcopy(n.attrs), quant))

    inits = {name: new_inits.get(name, tv) for name, tv in g.initializers.items()}
    out = ModelGraph(nodes_out, inits, list(g.graph_inputs), list(g.graph_outputs))
    validate(out)
    return out


# ---------------------------------------------------------------------------
# Weight postprocessing
# ---------------------------------------------------------------------------


def reshape_weights(node: GraphNode, w: TensorValue) -> np.ndarray:
    """4-D conv weights -> accelerator 2-D form, or 2-D MVM weights padded.

    Output rows are output channels and columns follow im2col patch order
    (channel-major, kernel row, kernel col); grouped convolutions become
    block-diagonal.  Both dims are zero-padded to a multiple of 16.  The
    stored orientation on the array is the transpose, so the limits are
    4096 on patch length and 512 on output channels.
    """
    data = w.data
    if node.kind == OpKind.MVM:
        if data.ndim != 2:
            raise ValidationError(f"node '{node.id}': MVM weights must be 2-D, got {data.shape}")
        mat = data.astype(np.int8)
    elif node.kind in CONV_CLASS:
        if data.ndim != 4:
            raise ValidationError(f"node '{node.id}': conv weights must be 4-D, got {data.shape}")
        out_c, in_cg, kh, kw = data.shape
        group = int(node.attrs.get("group", 1))
        if group == 1:
            mat = data.reshape(out_c, in_cg * kh * kw).astype(np.int8)
        else:
            if out_c % group:
                raise ValidationError(f"node '{node.id}': {out_c} channels not divisible by group {group}")
            og = out_c // group
            patch = in_cg * kh * kw
            mat = np.zeros((out_c, group * patch), dtype=np.int8)
            for gi in range(group):
                rows = slice(gi * og, (gi + 1) * og)
                cols = slice(gi * patch, (gi + 1) * patch)
                mat[rows, cols] = data[rows].reshape(og, patch)
    else:
        raise ValidationError(f"node '{node.id}': kind {node.kind.value} carries no 2-D weights")

    rows, cols = mat.shape
    rows_p, cols_p = pad16(rows), pad16(cols)
    # stored orientation: patch length (cols here) maps to array rows
    if cols_p > kernels_an.MAX_ROWS:
        raise SizeError(
            f"node '{node.id}': padded input length {cols_p} exceeds {kernels_an.MAX_ROWS}"
        )
    if rows_p > kernels_an.MAX_COLS:
        raise SizeError(
            f"node '{node.id}': padded output length {rows_p} exceeds {kernels_an.MAX_COLS}"
        )
    out = np.zeros((rows_p, cols_p), dtype=np.int8)
    out[:rows, :cols] = mat
    return out


# ---------------------------------------------------------------------------
# Full pipeline
# ---------------------------------------------------------------------------


def classify(kind: OpKind) -> str:
    if kind in AN_KINDS:
        return "an"
    if kind in DI_KINDS:
        return "di"
    raise ValidationError(f"kind {kind.value} must not survive compilation")


_DI_COST_FN = {
    OpKind.Add: "add",
    OpKind.FusedAddReLU: "add",
    OpKind.ReLU: "relu",
    OpKind.Sigmoid: "sigmoid",
    OpKind.Mul: "mul",
    OpKind.SiLU: "silu",
    OpKind.MaxPool: "maxpool",
    OpKind.AvgPool: "avgpool",
    OpKind.Concat: "concat",
    OpKind.Split: "split",
}


def compile_model(
    g: ModelGraph,
    cal: CalibrationSet | None,
    avgpool_on_di: bool = False,
    strict: bool = False,
    report: dict | None = None,
) -> CompiledModel:
    """optimize -> fuse -> (avgpool lowering) -> quantize -> reshape/classify.

    When given, `report` is filled with per-pass node counts.
    """
    validate(g)
    if report is not None:
        report["loaded"] = len(g.nodes)
    g = optimize(g)
    if report is not None:
        report["optimized"] = len(g.nodes)
    g = fuse(g)
    if report is not None:
        report["fused"] = len(g.nodes)
    if not avgpool_on_di:
        g = lower_avgpool(g)
    g = quantize(g, cal, strict=strict)
    if report is not None:
        report["quantized"] = len(g.nodes)
    shapes = infer_shapes(g)

    order = topological_order(g)
    by_id = {n.id: n for n in g.nodes}
    nodes: list[CompiledNode] = []
    for nid in order:
        n = by_id[nid]
        accel = classify(n.kind)
        act_ins = g.activation_inputs(n)
        cn = CompiledNode(
            node=n,
            accel=accel,
            act_inputs=act_ins,
            in_shapes=[shapes[t] for t in act_ins],
            out_shapes=[shapes[t] for t in n.outputs],
        )
        if accel == "an":
            w2d = reshape_weights(n, g.initializers[n.inputs[1]])
            cn.weights2d = w2d
            w_shape = g.initializers[n.inputs[1]].spec.shape
            if n.kind == OpKind.MVM:
                cn.out_features, cn.in_features = int(w_shape[0]), int(w_shape[1])
            else:
                group = int(n.attrs.get("group", 1))
                cn.out_features = int(w_shape[0])
                cn.in_features = int(w_shape[1]) * group * int(w_shape[2]) * int(w_shape[3])
            if len(n.inputs) > 2:
                cn.bias = g.initializers[n.inputs[2]].data.astype(np.int32)
            cn.in_scale = cn.scale_of(act_ins[0])
            cn.out_scale = cn.scale_of(n.outputs[0])
            cn.weight_scale = cn.scale_of(n.inputs[1])
            rows_p, cols_p = pad16(cn.in_features), pad16(cn.out_features)
            if n.kind == OpKind.MVM:
                cn.cost_hint_us = kernels_an.cost_model("mvm", (rows_p, cols_p))
            else:
                c, h, w = cn.in_shapes[0]
                plan = kernels_an.Im2colPlan.for_conv(
                    (c, h, w), n.attrs["kernel_shape"], n.attrs["strides"], n.attrs["pads"]
                )
                cn.cost_hint_us = kernels_an.cost_model("conv", (rows_p, cols_p, plan.n_patches))
        else:
            fn = _DI_COST_FN[n.kind]
            nbytes = cn.in_bytes() if n.kind in (OpKind.Split, OpKind.MaxPool, OpKind.AvgPool) else cn.out_bytes()
            cn.cost_hint_us = kernels_di.cost_model_di(fn, nbytes)
        nodes.append(cn)

    in_q = [(s, _boundary_scale(g, s.name)) for s in g.graph_inputs]
    out_q = [(s, _boundary_scale(g, s.name)) for s in g.graph_outputs]
    return CompiledModel(nodes=nodes, graph_inputs=in_q, graph_outputs=out_q, edges=tensor_edges(g))


def _boundary_scale(g: ModelGraph, tensor: str) -> QuantParams:
    for n in g.nodes:
        if n.quant and tensor in n.quant:
            return n.quant[tensor]
    raise QuantizationError(f"no scale recorded for boundary tensor '{tensor}'")


# ---------------------------------------------------------------------------
# Artifact serialization
# ---------------------------------------------------------------------------


def save_compiled(cm: CompiledModel, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    blob = bytearray()

    def _store(arr: np.ndarray) -> dict:
        raw = np.ascontiguousarray(arr).tobytes()
        meta = {"offset": len(blob), "length": len(raw)}
        blob.extend(raw)
        return meta

    nodes = []
    for cn in cm.nodes:
        n = cn.node
        rec = {
            "id": n.id,
            "kind": n.kind.value,
            "accel": cn.accel,
            "inputs": n.inputs,
            "outputs": n.outputs,
            "attrs": n.attrs,
            "quant": {t: float(q.scale) for t, q in sorted((n.quant or {}).items())},
            "act_inputs": cn.act_inputs,
            "in_shapes": [list(s) for s in cn.in_shapes],
            "out_shapes": [list(s) for s in cn.out_shapes],
            "cost_hint_us": cn.cost_hint_us,
        }
        if cn.weights2d is not None:
            rec["weights"] = dict(
                _store(cn.weights2d),
                rows=cn.weights2d.shape[0],
                cols=cn.weights2d.shape[1],
                out_features=cn.out_features,
                in_features=cn.in_features,
            )
        if cn.bias is not None:
            rec["bias"] = dict(_store(cn.bias.astype("<i4")), n=len(cn.bias))
        nodes.append(rec)

    doc = {
        "format": COMPILED_FORMAT,
        "version": 1,
        "nodes": nodes,
        "graph_inputs": [
            {"name": s.name, "shape": list(s.shape), "dtype": s.dtype.value, "scale": float(q.scale)}
            for s, q in cm.graph_inputs
        ],
        "graph_outputs": [
            {"name": s.name, "shape": list(s.shape), "dtype": s.dtype.value, "scale": float(q.scale)}
            for s, q in cm.graph_outputs
        ],
        "edges": [{"src": s, "dst": d, "tensor": t} for s, d, t in cm.edges],
    }
    with open(os.path.join(out_dir, "compiled.json"), "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "weights.bin"), "wb") as f:
        f.write(bytes(blob))
    with open(os.path.join(out_dir, "fpga_info.json"), "w", encoding="utf-8") as f:
        json.dump({"nodes": cm.fpga_info()}, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(os.path.join(out_dir, "adjacency.json"), "w", encoding="utf-8") as f:
        json.dump({"edges": cm.adjacency_edges()}, f, indent=1, sort_keys=True)
        f.write("\n")


def load_compiled(out_dir: str) -> CompiledModel:
    path = os.path.join(out_dir, "compiled.json")
    with open(path, "r", encoding="utf-8") as f:
        doc = json.load(f)
    if doc.get("format") != COMPILED_FORMAT:
        raise ValidationError(f"'{path}' is not a {COMPILED_FORMAT} document")
    with open(os.path.join(out_dir, "weights.bin"), "rb") as f:
        blob = f.read()

    nodes = []
    for rec in doc["nodes"]:
        quant = {t: QuantParams(s) for t, s in rec["quant"].items()}
        n = GraphNode(rec["id"], OpKind(rec["kind"]), rec["inputs"], rec["outputs"], rec["attrs"], quant)
        cn = CompiledNode(
            node=n,
            accel=rec["accel"],
            act_inputs=rec["act_inputs"],
            in_shapes=[tuple(s) for s in rec["in_shapes"]],
            out_shapes=[tuple(s) for s in rec["out_shapes"]],
            cost_hint_us=rec["cost_hint_us"],
        )
        if "weights" in rec:
            m = rec["weights"]
            cn.weights2d = (
                np.frombuffer(blob, dtype=np.int8, count=m["rows"] * m["cols"], offset=m["offset"])
                .reshape(m["rows"], m["cols"])
                .copy()
            )
            cn.out_features, cn.in_features = m["out_features"], m["in_features"]
        if "bias" in rec:
            m = rec["bias"]
            cn.bias = np.frombuffer(blob, dtype="<i4", count=m["n"], offset=m["offset"]).copy()
        if cn.accel == "an":
            cn.in_scale = quant[cn.act_inputs[0]]
            cn.out_scale = quant[n.outputs[0]]
            cn.weight_scale = quant[n.inputs[1]]
        nodes.append(cn)

    gi = [(TensorSpec(d["name"], tuple(d["shape"]), Dtype(d["dtype"])), QuantParams(d["scale"])) for d in doc["graph_inputs"]]
    go = [(TensorSpec(d["name"], tuple(d["shape"]), Dtype(d["dtype"])), QuantParams(d["scale"])) for d in doc["graph_outputs"]]
    edges = [(e["src"], e["dst"], e["tensor"]) for e in doc["edges"]]
    return CompiledModel(nodes=nodes, graph_inputs=gi, graph_outputs=go, edges=edges)
