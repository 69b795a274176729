"""Neural-graph intermediate representation.

A model is a DAG of single-assignment tensors: every tensor name has exactly
one producer (a node output, a graph input, or an initializer).  Activations
are row-major with channel-first layout ([C,H,W] for spatial tensors, batch is
fixed at 1 per inference request).  Graphs are immutable after load; the
compiler passes build rewritten copies.

On-disk format: `model.json` carries the structure, a sidecar `model.bin`
holds raw little-endian initializer buffers addressed by (offset, length).
"""
from __future__ import annotations

import heapq
import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import CycleError, ParseError, ValidationError
from .quant import QuantParams

MODEL_FORMAT = "imce-model"
MODEL_VERSION = 1


class Dtype(str, Enum):
    INT8 = "int8"
    INT32 = "int32"
    FP32 = "fp32"

    @property
    def np(self) -> np.dtype:
        return _NP_DTYPES[self]

    @property
    def itemsize(self) -> int:
        return self.np.itemsize


_NP_DTYPES = {
    Dtype.INT8: np.dtype("<i1"),
    Dtype.INT32: np.dtype("<i4"),
    Dtype.FP32: np.dtype("<f4"),
}


class OpKind(str, Enum):
    Conv2D = "Conv2D"
    FusedConvReLU = "FusedConvReLU"
    FusedConvSiLU = "FusedConvSiLU"
    MVM = "MVM"
    Add = "Add"
    FusedAddReLU = "FusedAddReLU"
    ReLU = "ReLU"
    Sigmoid = "Sigmoid"
    Mul = "Mul"
    SiLU = "SiLU"
    MaxPool = "MaxPool"
    AvgPool = "AvgPool"
    Concat = "Concat"
    Split = "Split"
    Flatten = "Flatten"
    Reshape = "Reshape"
    QuantizeLinear = "QuantizeLinear"
    DequantizeLinear = "DequantizeLinear"


CONV_CLASS = frozenset({OpKind.Conv2D, OpKind.FusedConvReLU, OpKind.FusedConvSiLU})
ADD_CLASS = frozenset({OpKind.Add, OpKind.FusedAddReLU})
POOL_CLASS = frozenset({OpKind.MaxPool, OpKind.AvgPool})

# Arity contract per kind: (min_inputs, max_inputs, min_outputs, max_outputs,
# required attrs).  Conv/MVM inputs are (x, weights[, bias]).
_ARITY = {
    OpKind.Conv2D: (2, 3, 1, 1, ("kernel_shape", "strides", "pads")),
    OpKind.FusedConvReLU: (2, 3, 1, 1, ("kernel_shape", "strides", "pads")),
    OpKind.FusedConvSiLU: (2, 3, 1, 1, ("kernel_shape", "strides", "pads")),
    OpKind.MVM: (2, 3, 1, 1, ()),
    OpKind.Add: (2, 2, 1, 1, ()),
    OpKind.FusedAddReLU: (2, 2, 1, 1, ()),
    OpKind.ReLU: (1, 1, 1, 1, ()),
    OpKind.Sigmoid: (1, 1, 1, 1, ()),
    OpKind.Mul: (2, 2, 1, 1, ()),
    OpKind.SiLU: (1, 1, 1, 1, ()),
    OpKind.MaxPool: (1, 1, 1, 1, ("kernel_shape", "strides", "pads")),
    OpKind.AvgPool: (1, 1, 1, 1, ("kernel_shape", "strides", "pads")),
    OpKind.Concat: (1, 64, 1, 1, ("axis",)),
    OpKind.Split: (1, 1, 1, 64, ("axis", "split_sizes")),
    OpKind.Flatten: (1, 1, 1, 1, ()),
    OpKind.Reshape: (1, 1, 1, 1, ("shape",)),
    OpKind.QuantizeLinear: (1, 1, 1, 1, ("scale",)),
    OpKind.DequantizeLinear: (1, 1, 1, 1, ("scale",)),
}


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    dtype: Dtype

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(d) for d in self.shape))
        object.__setattr__(self, "dtype", Dtype(self.dtype))
        if not self.name:
            raise ValidationError("tensor name must be non-empty")
        if len(self.shape) == 0 or len(self.shape) > 4:
            raise ValidationError(f"tensor '{self.name}': shape must have 1-4 dims, got {self.shape}")
        if any(d < 1 for d in self.shape):
            raise ValidationError(f"tensor '{self.name}': every dimension must be >= 1, got {self.shape}")

    @property
    def numel(self) -> int:
        return int(np.prod(self.shape))

    @property
    def nbytes(self) -> int:
        return self.numel * self.dtype.itemsize


@dataclass
class TensorValue:
    spec: TensorSpec
    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=self.spec.dtype.np)
        if arr.size != self.spec.numel:
            raise ValidationError(
                f"tensor '{self.spec.name}': buffer has {arr.size} elements, "
                f"shape {self.spec.shape} needs {self.spec.numel}"
            )
        self.data = arr.reshape(self.spec.shape)

    @classmethod
    def from_array(cls, name: str, arr: np.ndarray) -> "TensorValue":
        dtype = {np.dtype("int8"): Dtype.INT8, np.dtype("int32"): Dtype.INT32, np.dtype("float32"): Dtype.FP32}[
            np.dtype(arr.dtype)
        ]
        return cls(TensorSpec(name, tuple(arr.shape), dtype), arr)


@dataclass
class GraphNode:
    id: str
    kind: OpKind
    inputs: list[str]
    outputs: list[str]
    attrs: dict = field(default_factory=dict)
    quant: dict[str, QuantParams] | None = None

    def __post_init__(self):
        self.kind = OpKind(self.kind)
        self.inputs = list(self.inputs)
        self.outputs = list(self.outputs)


@dataclass
class ModelGraph:
    nodes: list[GraphNode]
    initializers: dict[str, TensorValue]
    graph_inputs: list[TensorSpec]
    graph_outputs: list[TensorSpec]

    # -- derived views -------------------------------------------------

    def node(self, node_id: str) -> GraphNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def producer_map(self) -> dict[str, GraphNode]:
        """tensor name -> producing node (node outputs only)."""
        out = {}
        for n in self.nodes:
            for t in n.outputs:
                out[t] = n
        return out

    def consumer_map(self) -> dict[str, list[GraphNode]]:
        out: dict[str, list[GraphNode]] = {}
        for n in self.nodes:
            for t in n.inputs:
                out.setdefault(t, []).append(n)
        return out

    def activation_inputs(self, node: GraphNode) -> list[str]:
        """Node inputs that are not initializers, in slot order."""
        return [t for t in node.inputs if t not in self.initializers]


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


def validate(g: ModelGraph) -> None:
    """Check all ModelGraph invariants; raises ValidationError naming the offender."""
    seen_nodes: set[str] = set()
    for n in g.nodes:
        if n.id in seen_nodes:
            raise ValidationError(f"duplicate node id '{n.id}'")
        seen_nodes.add(n.id)

    producers: dict[str, str] = {}  # tensor -> producer label
    for spec in g.graph_inputs:
        if spec.name in producers:
            raise ValidationError(f"duplicate graph input '{spec.name}'")
        producers[spec.name] = "<graph input>"
    for name in g.initializers:
        if name in producers:
            raise ValidationError(f"initializer '{name}' collides with another tensor")
        producers[name] = "<initializer>"
        tv = g.initializers[name]
        if tv.spec.name != name:
            raise ValidationError(f"initializer '{name}' carries mismatched spec name '{tv.spec.name}'")
        if tv.spec.dtype == Dtype.INT8:
            lo, hi = int(tv.data.min(initial=0)), int(tv.data.max(initial=0))
            if lo < -128 or hi > 127:
                raise ValidationError(f"initializer '{name}' has INT8 values outside [-128,127]")
    for n in g.nodes:
        for t in n.outputs:
            if t in producers:
                raise ValidationError(f"tensor '{t}' has more than one producer (node '{n.id}')")
            producers[t] = n.id

    for n in g.nodes:
        lo, hi, olo, ohi, req = _ARITY[n.kind]
        if not (lo <= len(n.inputs) <= hi):
            raise ValidationError(
                f"node '{n.id}' ({n.kind.value}): expected {lo}..{hi} inputs, got {len(n.inputs)}"
            )
        if not (olo <= len(n.outputs) <= ohi):
            raise ValidationError(
                f"node '{n.id}' ({n.kind.value}): expected {olo}..{ohi} outputs, got {len(n.outputs)}"
            )
        for a in req:
            if a not in n.attrs:
                raise ValidationError(f"node '{n.id}' ({n.kind.value}): missing required attr '{a}'")
        if n.kind == OpKind.Split and len(n.outputs) != len(n.attrs["split_sizes"]):
            raise ValidationError(
                f"node '{n.id}': split_sizes has {len(n.attrs['split_sizes'])} entries "
                f"for {len(n.outputs)} outputs"
            )
        for t in n.inputs:
            if t not in producers:
                raise ValidationError(f"node '{n.id}' consumes undefined tensor '{t}'")

    for spec in g.graph_outputs:
        if spec.name not in producers:
            raise ValidationError(f"graph output '{spec.name}' is produced by no node")

    # acyclicity: topological_order raises CycleError on failure
    topological_order(g)


# ---------------------------------------------------------------------------
# Traversal
# ---------------------------------------------------------------------------


def topological_order(g: ModelGraph) -> list[str]:
    """Producer-before-consumer order; ties broken by ascending node id."""
    producer = {}
    for n in g.nodes:
        for t in n.outputs:
            producer[t] = n.id
    indeg = {n.id: 0 for n in g.nodes}
    succ: dict[str, set[str]] = {n.id: set() for n in g.nodes}
    for n in g.nodes:
        for t in n.inputs:
            p = producer.get(t)
            if p is not None and p != n.id and n.id not in succ[p]:
                succ[p].add(n.id)
                indeg[n.id] += 1
    ready = [nid for nid, d in sorted(indeg.items()) if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        nid = heapq.heappop(ready)
        order.append(nid)
        for s in sorted(succ[nid]):
            indeg[s] -= 1
            if indeg[s] == 0:
                heapq.heappush(ready, s)
    if len(order) != len(g.nodes):
        stuck = sorted(set(indeg) - set(order))
        raise CycleError(f"dependency cycle involving nodes {stuck}")
    return order


@dataclass
class Adjacency:
    ids: list[str]  # ascending node ids; row/col index order
    matrix: np.ndarray  # bool [n, n]; (i, j) true iff an output of i feeds j

    def edges(self) -> list[tuple[str, str]]:
        out = []
        for i, src in enumerate(self.ids):
            for j, dst in enumerate(self.ids):
                if self.matrix[i, j]:
                    out.append((src, dst))
        return out

    def __getitem__(self, key: tuple[str, str]) -> bool:
        i = self.ids.index(key[0])
        j = self.ids.index(key[1])
        return bool(self.matrix[i, j])


def adjacency(g: ModelGraph) -> Adjacency:
    ids = sorted(n.id for n in g.nodes)
    index = {nid: i for i, nid in enumerate(ids)}
    producer = {}
    for n in g.nodes:
        for t in n.outputs:
            producer[t] = n.id
    m = np.zeros((len(ids), len(ids)), dtype=bool)
    for n in g.nodes:
        for t in n.inputs:
            p = producer.get(t)
            if p is not None and p != n.id:
                m[index[p], index[n.id]] = True
    return Adjacency(ids, m)


def tensor_edges(g: ModelGraph) -> list[tuple[str, str, str]]:
    """All (src node, dst node, tensor) graph transitions, sorted."""
    producer = {}
    for n in g.nodes:
        for t in n.outputs:
            producer[t] = n.id
    edges = []
    for n in g.nodes:
        for t in n.inputs:
            p = producer.get(t)
            if p is not None and p != n.id:
                edges.append((p, n.id, t))
    return sorted(edges)


# ---------------------------------------------------------------------------
# Shape inference
# ---------------------------------------------------------------------------


def conv_out_hw(h: int, w: int, kernel, strides, pads) -> tuple[int, int]:
    kh, kw = kernel
    sh, sw = strides
    ph, pw = pads
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    return oh, ow


def infer_shapes(g: ModelGraph) -> dict[str, tuple[int, ...]]:
    """Shapes for every tensor in the graph, derived in topological order.

    Flatten/Reshape survivors and MVM treat their input as a 1-D linear
    buffer, mirroring the hardware view of memory.
    """
    shapes: dict[str, tuple[int, ...]] = {}
    for spec in g.graph_inputs:
        shapes[spec.name] = spec.shape
    for name, tv in g.initializers.items():
        shapes[name] = tv.spec.shape

    by_id = {n.id: n for n in g.nodes}
    for nid in topological_order(g):
        n = by_id[nid]
        ins = [shapes[t] for t in n.inputs]
        shapes.update(_node_out_shapes(g, n, ins))
    return shapes


def _node_out_shapes(g, n: GraphNode, ins) -> dict[str, tuple[int, ...]]:
    k = n.kind
    if k in CONV_CLASS:
        x = ins[0]
        if len(x) != 3:
            raise ValidationError(f"node '{n.id}': conv input must be [C,H,W], got {x}")
        w = ins[1]
        oh, ow = conv_out_hw(x[1], x[2], n.attrs["kernel_shape"], n.attrs["strides"], n.attrs["pads"])
        if oh < 1 or ow < 1:
            raise ValidationError(f"node '{n.id}': conv output collapses to {oh}x{ow}")
        group = int(n.attrs.get("group", 1))
        if w[1] * group != x[0]:
            raise ValidationError(
                f"node '{n.id}': weights expect {w[1] * group} input channels, tensor has {x[0]}"
            )
        return {n.outputs[0]: (w[0], oh, ow)}
    if k == OpKind.MVM:
        w = ins[1]
        flat = int(np.prod(ins[0]))
        if w[1] != flat:
            raise ValidationError(f"node '{n.id}': MVM weights expect input length {w[1]}, got {flat}")
        return {n.outputs[0]: (w[0],)}
    if k in (OpKind.Add, OpKind.FusedAddReLU, OpKind.Mul):
        if ins[0] != ins[1]:
            raise ValidationError(f"node '{n.id}': operand shapes differ: {ins[0]} vs {ins[1]}")
        return {n.outputs[0]: ins[0]}
    if k in (OpKind.ReLU, OpKind.Sigmoid, OpKind.SiLU, OpKind.QuantizeLinear, OpKind.DequantizeLinear):
        return {n.outputs[0]: ins[0]}
    if k in POOL_CLASS:
        c, h, w = ins[0]
        oh, ow = conv_out_hw(h, w, n.attrs["kernel_shape"], n.attrs["strides"], n.attrs["pads"])
        if oh < 1 or ow < 1:
            raise ValidationError(f"node '{n.id}': pool output collapses to {oh}x{ow}")
        return {n.outputs[0]: (c, oh, ow)}
    if k == OpKind.Concat:
        axis = int(n.attrs["axis"])
        base = list(ins[0])
        for s in ins[1:]:
            if len(s) != len(base) or any(s[i] != base[i] for i in range(len(base)) if i != axis):
                raise ValidationError(f"node '{n.id}': concat parts disagree off axis {axis}")
            base[axis] += s[axis]
        return {n.outputs[0]: tuple(base)}
    if k == OpKind.Split:
        axis = int(n.attrs["axis"])
        sizes = [int(s) for s in n.attrs["split_sizes"]]
        if sum(sizes) != ins[0][axis]:
            raise ValidationError(
                f"node '{n.id}': split sizes {sizes} do not sum to dim {ins[0][axis]} on axis {axis}"
            )
        out = {}
        for t, sz in zip(n.outputs, sizes):
            s = list(ins[0])
            s[axis] = sz
            out[t] = tuple(s)
        return out
    if k == OpKind.Flatten:
        return {n.outputs[0]: (int(np.prod(ins[0])),)}
    if k == OpKind.Reshape:
        target = tuple(int(d) for d in n.attrs["shape"])
        if int(np.prod(target)) != int(np.prod(ins[0])):
            raise ValidationError(f"node '{n.id}': reshape to {target} changes element count")
        return {n.outputs[0]: target}
    raise ValidationError(f"node '{n.id}': no shape rule for kind {k.value}")


# ---------------------------------------------------------------------------
# File format
# ---------------------------------------------------------------------------


def _spec_to_json(spec: TensorSpec) -> dict:
    return {"name": spec.name, "shape": list(spec.shape), "dtype": spec.dtype.value}


def _spec_from_json(d: dict) -> TensorSpec:
    return TensorSpec(d["name"], tuple(d["shape"]), Dtype(d["dtype"]))


def _quant_to_json(q: dict[str, QuantParams] | None):
    if not q:
        return None
    return {t: {"scale": float(p.scale), "zero_point": p.zero_point} for t, p in sorted(q.items())}


def _quant_from_json(d) -> dict[str, QuantParams] | None:
    if not d:
        return None
    return {t: QuantParams(float(v["scale"]), int(v.get("zero_point", 0))) for t, v in d.items()}


def save_model(g: ModelGraph, path: str) -> None:
    """Write `model.json` + `model.bin` (path names the .json file)."""
    base, _ = os.path.splitext(path)
    bin_path = base + ".bin"
    blob = bytearray()
    inits = {}
    for name in sorted(g.initializers):
        tv = g.initializers[name]
        raw = np.ascontiguousarray(tv.data, dtype=tv.spec.dtype.np).tobytes()
        inits[name] = {
            "shape": list(tv.spec.shape),
            "dtype": tv.spec.dtype.value,
            "offset": len(blob),
            "length": len(raw),
        }
        blob.extend(raw)
    doc = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "graph_inputs": [_spec_to_json(s) for s in g.graph_inputs],
        "graph_outputs": [_spec_to_json(s) for s in g.graph_outputs],
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind.value,
                "inputs": n.inputs,
                "outputs": n.outputs,
                "attrs": n.attrs,
                "quant": _quant_to_json(n.quant),
            }
            for n in g.nodes
        ],
        "initializers": inits,
        "blob": os.path.basename(bin_path),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")
    with open(bin_path, "wb") as f:
        f.write(bytes(blob))


def load_model(path: str) -> ModelGraph:
    """Parse and validate a model file; raises ParseError/ValidationError."""
    try:
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
    except OSError as e:
        raise ParseError(f"cannot read model file '{path}': {e}") from e
    except json.JSONDecodeError as e:
        raise ParseError(f"model file '{path}' is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise ParseError(f"model file '{path}' is not a {MODEL_FORMAT} document")
    if doc.get("version") != MODEL_VERSION:
        raise ParseError(f"unsupported model version {doc.get('version')}")

    bin_path = os.path.join(os.path.dirname(os.path.abspath(path)), doc.get("blob", ""))
    inits_meta = doc.get("initializers", {})
    blob = b""
    if inits_meta:
        try:
            with open(bin_path, "rb") as f:
                blob = f.read()
        except OSError as e:
            raise ParseError(f"cannot read initializer blob '{bin_path}': {e}") from e

    try:
        initializers = {}
        for name, meta in inits_meta.items():
            spec = TensorSpec(name, tuple(meta["shape"]), Dtype(meta["dtype"]))
            off, length = int(meta["offset"]), int(meta["length"])
            if off < 0 or off + length > len(blob):
                raise ParseError(f"initializer '{name}' points outside the blob")
            if length != spec.nbytes:
                raise ParseError(f"initializer '{name}': length {length} != spec bytes {spec.nbytes}")
            arr = np.frombuffer(blob, dtype=spec.dtype.np, count=spec.numel, offset=off).copy()
            initializers[name] = TensorValue(spec, arr)
        nodes = [
            GraphNode(
                id=nd["id"],
                kind=OpKind(nd["kind"]),
                inputs=list(nd["inputs"]),
                outputs=list(nd["outputs"]),
                attrs=dict(nd.get("attrs") or {}),
                quant=_quant_from_json(nd.get("quant")),
            )
            for nd in doc.get("nodes", [])
        ]
        g = ModelGraph(
            nodes=nodes,
            initializers=initializers,
            graph_inputs=[_spec_from_json(s) for s in doc.get("graph_inputs", [])],
            graph_outputs=[_spec_from_json(s) for s in doc.get("graph_outputs", [])],
        )
    except (KeyError, TypeError, ValueError) as e:
        raise ParseError(f"model file '{path}' is malformed: {e}") from e

    validate(g)
    return g
