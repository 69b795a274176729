"""FP32 reference interpreter over ModelGraph.

Used three ways: as the pre/post-pass semantic equality check for compiler
transformations, as the range recorder during calibration, and as the
`oracle --fp32` execution mode.  It evaluates every supported kind in plain
float32 numpy; convolution goes through a float im2col matmul (group-aware).
"""
from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .ir import CONV_CLASS, GraphNode, ModelGraph, OpKind, conv_out_hw, topological_order
from .quant import round_half_away


def _sigmoid_f32(x: np.ndarray) -> np.ndarray:
    x32 = np.asarray(x, dtype=np.float32)
    with np.errstate(over="ignore"):
        return (np.float32(1.0) / (np.float32(1.0) + np.exp(-x32))).astype(np.float32)


def _im2col_f32(x: np.ndarray, kernel, strides, pads) -> np.ndarray:
    """[C,H,W] float -> [outH*outW, C*kh*kw] patch matrix, zero padded."""
    c, h, w = x.shape
    kh, kw = kernel
    sh, sw = strides
    ph, pw = pads
    oh, ow = conv_out_hw(h, w, kernel, strides, pads)
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, ph : ph + h, pw : pw + w] = x
    # column order: channel-major, then kernel row, then kernel col
    cols = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            cols[:, ky, kx] = xp[:, ky : ky + oh * sh : sh, kx : kx + ow * sw : sw]
    return cols.reshape(c * kh * kw, oh * ow).T.copy()


def _conv2d_f32(x, w, b, attrs) -> np.ndarray:
    kernel = tuple(attrs["kernel_shape"])
    strides = tuple(attrs["strides"])
    pads = tuple(attrs["pads"])
    group = int(attrs.get("group", 1))
    out_c = w.shape[0]
    oh, ow = conv_out_hw(x.shape[1], x.shape[2], kernel, strides, pads)
    patches = _im2col_f32(x.astype(np.float32), kernel, strides, pads)
    kh, kw = kernel
    if group == 1:
        mat = w.reshape(out_c, -1).astype(np.float32)
        acc = patches @ mat.T
    else:
        cg = x.shape[0] // group
        og = out_c // group
        acc = np.zeros((patches.shape[0], out_c), dtype=np.float32)
        for gi in range(group):
            mat = w[gi * og : (gi + 1) * og].reshape(og, -1).astype(np.float32)
            block = patches[:, gi * cg * kh * kw : (gi + 1) * cg * kh * kw]
            acc[:, gi * og : (gi + 1) * og] = block @ mat.T
    if b is not None:
        acc = acc + b.astype(np.float32)[None, :]
    return acc.T.reshape(out_c, oh, ow)


def _pool_f32(x, attrs, mode: str) -> np.ndarray:
    c, h, w = x.shape
    kh, kw = attrs["kernel_shape"]
    sh, sw = attrs["strides"]
    ph, pw = attrs["pads"]
    oh, ow = conv_out_hw(h, w, (kh, kw), (sh, sw), (ph, pw))
    fill = np.float32(-np.inf) if mode == "max" else np.float32(0.0)
    xp = np.full((c, h + 2 * ph, w + 2 * pw), fill, dtype=np.float32)
    xp[:, ph : ph + h, pw : pw + w] = x
    out = np.empty((c, oh, ow), dtype=np.float32)
    for oy in range(oh):
        for ox in range(ow):
            win = xp[:, oy * sh : oy * sh + kh, ox * sw : ox * sw + kw]
            if mode == "max":
                out[:, oy, ox] = win.max(axis=(1, 2))
            else:
                # divide by the full window size; pad zeros count
                out[:, oy, ox] = win.sum(axis=(1, 2)) / np.float32(kh * kw)
    return out


def execute_fp32(
    g: ModelGraph,
    inputs: dict[str, np.ndarray],
    record_all: bool = False,
) -> dict[str, np.ndarray]:
    """Run the graph; returns graph outputs (or every tensor when record_all)."""
    env: dict[str, np.ndarray] = {}
    for name, tv in g.initializers.items():
        env[name] = tv.data.astype(np.float32)
    for spec in g.graph_inputs:
        if spec.name not in inputs:
            raise ShapeError(f"missing graph input '{spec.name}'")
        arr = np.asarray(inputs[spec.name], dtype=np.float32)
        if arr.size != spec.numel:
            raise ShapeError(
                f"graph input '{spec.name}': got {arr.size} elements, expected {spec.numel}"
            )
        env[spec.name] = arr.reshape(spec.shape)

    by_id = {n.id: n for n in g.nodes}
    for nid in topological_order(g):
        n = by_id[nid]
        _eval_node(g, n, env)

    if record_all:
        return env
    return {s.name: env[s.name] for s in g.graph_outputs}


def _eval_node(g: ModelGraph, n: GraphNode, env: dict[str, np.ndarray]) -> None:
    k = n.kind
    ins = [env[t] for t in n.inputs]
    if k in CONV_CLASS:
        b = ins[2] if len(ins) > 2 else None
        y = _conv2d_f32(ins[0], ins[1], b, n.attrs)
        if k == OpKind.FusedConvReLU:
            y = np.maximum(y, np.float32(0.0))
        elif k == OpKind.FusedConvSiLU:
            y = y * _sigmoid_f32(y)
        env[n.outputs[0]] = y.astype(np.float32)
        return
    if k == OpKind.MVM:
        x = ins[0].reshape(-1).astype(np.float32)
        w = ins[1].astype(np.float32)
        y = w @ x
        if len(ins) > 2:
            y = y + ins[2].astype(np.float32)
        env[n.outputs[0]] = y.astype(np.float32)
        return
    if k in (OpKind.Add, OpKind.FusedAddReLU):
        y = ins[0] + ins[1]
        if k == OpKind.FusedAddReLU:
            y = np.maximum(y, np.float32(0.0))
        env[n.outputs[0]] = y.astype(np.float32)
        return
    if k == OpKind.ReLU:
        env[n.outputs[0]] = np.maximum(ins[0], np.float32(0.0))
        return
    if k == OpKind.Sigmoid:
        env[n.outputs[0]] = _sigmoid_f32(ins[0])
        return
    if k == OpKind.Mul:
        env[n.outputs[0]] = (ins[0] * ins[1]).astype(np.float32)
        return
    if k == OpKind.SiLU:
        env[n.outputs[0]] = (ins[0] * _sigmoid_f32(ins[0])).astype(np.float32)
        return
    if k == OpKind.MaxPool:
        env[n.outputs[0]] = _pool_f32(ins[0], n.attrs, "max")
        return
    if k == OpKind.AvgPool:
        env[n.outputs[0]] = _pool_f32(ins[0], n.attrs, "avg")
        return
    if k == OpKind.Concat:
        env[n.outputs[0]] = np.concatenate(ins, axis=int(n.attrs["axis"]))
        return
    if k == OpKind.Split:
        axis = int(n.attrs["axis"])
        sizes = [int(s) for s in n.attrs["split_sizes"]]
        offs = np.cumsum([0] + sizes)
        for t, a, b in zip(n.outputs, offs[:-1], offs[1:]):
            sl = [slice(None)] * ins[0].ndim
            sl[axis] = slice(int(a), int(b))
            env[t] = np.ascontiguousarray(ins[0][tuple(sl)])
        return
    if k == OpKind.Flatten:
        env[n.outputs[0]] = ins[0].reshape(-1)
        return
    if k == OpKind.Reshape:
        env[n.outputs[0]] = ins[0].reshape(tuple(int(d) for d in n.attrs["shape"]))
        return
    if k == OpKind.QuantizeLinear:
        # simulate the INT8 grid in float: values become integer codes
        s = np.float32(n.attrs["scale"])
        q = np.clip(round_half_away(ins[0] / s), -127, 127)
        env[n.outputs[0]] = q.astype(np.float32)
        return
    if k == OpKind.DequantizeLinear:
        env[n.outputs[0]] = (ins[0] * np.float32(n.attrs["scale"])).astype(np.float32)
        return
    raise ShapeError(f"node '{n.id}': unsupported kind {k.value} in FP32 reference")
