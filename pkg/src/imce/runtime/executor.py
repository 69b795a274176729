"""Node execution and the single-process sequential interpreter.

`NodeRunner` turns one CompiledNode into kernel calls; both the sequential
interpreter here and the distributed F-threads go through it, which is what
makes distributed output bit-identical to the local oracle.  Weight noise is
applied once when the runner is built (configuration time); read noise is
drawn per inference sequence number.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..compiler import CompiledModel, CompiledNode
from ..errors import ConfigError, ShapeError
from ..ir import OpKind
from ..kernels_an import AnMatrix, Im2colPlan, exact_int_matmul, pad16
from .. import kernels_an, kernels_di
from ..noise import NoiseModel, program_weights, read_noise
from ..quant import QuantParams, dequantize, quantize_fp32, requantize_acc_fp32


@dataclass
class NodeRunner:
    """One configured F-thread's compute: immutable after construction."""

    cn: CompiledNode
    noise: NoiseModel
    matrix: AnMatrix | None = None
    plan: Im2colPlan | None = None
    bias_padded: np.ndarray | None = None

    @classmethod
    def build(cls, cn: CompiledNode, noise: NoiseModel) -> "NodeRunner":
        r = cls(cn=cn, noise=noise)
        if cn.accel == "an":
            w = program_weights(cn.weights2d, noise, cn.id)
            # stored orientation: input length on rows, output channels on cols
            r.matrix = AnMatrix(np.ascontiguousarray(w.T), cn.weight_scale)
            if cn.bias is not None:
                b = np.zeros(r.matrix.cols, dtype=np.int64)
                b[: len(cn.bias)] = cn.bias.astype(np.int64)
                r.bias_padded = b
            if cn.kind in (OpKind.Conv2D, OpKind.FusedConvReLU, OpKind.FusedConvSiLU):
                n = cn.node
                r.plan = Im2colPlan.for_conv(
                    cn.in_shapes[0], n.attrs["kernel_shape"], n.attrs["strides"], n.attrs["pads"]
                )
        return r

    def run(self, inputs: list[np.ndarray], seq: int) -> list[np.ndarray]:
        cn = self.cn
        for arr, shape in zip(inputs, cn.in_shapes):
            if arr.size != int(np.prod(shape)):
                raise ShapeError(
                    f"node '{cn.id}': input has {arr.size} elements, expected {int(np.prod(shape))}"
                )
        ins = [arr.reshape(shape) for arr, shape in zip(inputs, cn.in_shapes)]
        if cn.accel == "an":
            return [self._run_an(ins[0], seq)]
        return self._run_di(ins)

    # -- analog ---------------------------------------------------------

    def _run_an(self, x: np.ndarray, seq: int) -> np.ndarray:
        cn = self.cn
        m = self.matrix
        mult = float(
            np.float32(cn.in_scale.scale)
            * np.float32(cn.weight_scale.scale)
            / np.float32(cn.out_scale.scale)
        )
        if cn.kind == OpKind.MVM:
            xv = np.zeros(m.rows, dtype=np.int8)
            flat = x.reshape(-1)
            xv[: flat.size] = flat
            acc = kernels_an.mvm_acc(m, xv)
            if self.noise.reads:
                acc = read_noise(acc, self.noise, cn.id, seq, m.rows)
            if self.bias_padded is not None:
                acc = (acc.astype(np.int64) + self.bias_padded).astype(np.int32)
            y = requantize_acc_fp32(acc, mult)
            return y[: cn.out_features].copy()

        patches = kernels_an.im2col(x, self.plan)
        if patches.shape[1] < m.rows:
            padded = np.zeros((patches.shape[0], m.rows), dtype=np.int8)
            padded[:, : patches.shape[1]] = patches
            patches = padded
        acc = exact_int_matmul(patches, m.data)
        if self.noise.reads:
            acc = read_noise(acc.astype(np.int32), self.noise, cn.id, seq, m.rows).astype(np.int64)
        if self.bias_padded is not None:
            acc = acc + self.bias_padded[None, :]
        y = requantize_acc_fp32(acc.astype(np.int32), mult)
        y = y[:, : cn.out_features]
        epilogue = {
            OpKind.Conv2D: "none",
            OpKind.FusedConvReLU: "relu",
            OpKind.FusedConvSiLU: "silu",
        }[cn.kind]
        y = kernels_an.apply_epilogue(y, cn.out_scale, epilogue)
        oh, ow = self.plan.out_hw
        return y.T.reshape(cn.out_features, oh, ow).copy()

    # -- digital ---------------------------------------------------------

    def _run_di(self, ins: list[np.ndarray]) -> list[np.ndarray]:
        cn = self.cn
        n = cn.node
        k = cn.kind
        s_in = [cn.scale_of(t) for t in cn.act_inputs]
        s_out = [cn.scale_of(t) for t in n.outputs]
        if k in (OpKind.Add, OpKind.FusedAddReLU):
            y = kernels_di.add(ins[0], ins[1], s_in[0], s_in[1], s_out[0], relu=k == OpKind.FusedAddReLU)
            return [y]
        if k == OpKind.SiLU:
            return [kernels_di.silu(ins[0], s_in[0], s_out[0])]
        if k == OpKind.ReLU:
            return [kernels_di.relu(ins[0], s_in[0], s_out[0])]
        if k == OpKind.Sigmoid:
            return [kernels_di.sigmoid(ins[0], s_in[0], s_out[0])]
        if k == OpKind.Mul:
            return [kernels_di.mul(ins[0], ins[1], s_in[0], s_in[1], s_out[0])]
        if k in (OpKind.MaxPool, OpKind.AvgPool):
            spec = kernels_di.PoolSpec(
                kind="max" if k == OpKind.MaxPool else "avg",
                window=tuple(n.attrs["kernel_shape"]),
                strides=tuple(n.attrs["strides"]),
                pads=tuple(n.attrs["pads"]),
            )
            return [kernels_di.pool(ins[0], spec, s_in[0], s_out[0])]
        if k == OpKind.Concat:
            return [kernels_di.concat(ins, int(n.attrs["axis"]), s_in)]
        if k == OpKind.Split:
            return kernels_di.split(ins[0], int(n.attrs["axis"]), [int(s) for s in n.attrs["split_sizes"]])
        raise ConfigError(f"node '{cn.id}': unsupported kind {k.value}")


# ---------------------------------------------------------------------------
# Sequential interpreter
# ---------------------------------------------------------------------------


@dataclass
class SequentialExecutor:
    """Single-threaded reference execution of a compiled model.

    Requests are numbered from 0; the counter feeds the read-noise keying so
    a distributed run with the same seq numbers reproduces it exactly.
    """

    cm: CompiledModel
    noise: NoiseModel = field(default_factory=NoiseModel)

    def __post_init__(self):
        self.runners = [NodeRunner.build(cn, self.noise) for cn in self.cm.nodes]
        self._seq = 0

    def run_fp32_input(self, x: np.ndarray, seq: int | None = None) -> dict[str, np.ndarray]:
        """Quantize the FP32 input at the boundary scale, execute, return INT8 outputs."""
        if len(self.cm.graph_inputs) != 1:
            raise ShapeError("sequential runs expect exactly one graph input")
        spec, scale = self.cm.graph_inputs[0]
        q = quantize_fp32(np.asarray(x, dtype=np.float32).reshape(spec.shape), scale.scale)
        return self.run_int8({spec.name: q}, seq)

    def run_int8(self, inputs: dict[str, np.ndarray], seq: int | None = None) -> dict[str, np.ndarray]:
        if seq is None:
            seq = self._seq
            self._seq += 1
        env: dict[str, np.ndarray] = {k: np.asarray(v, dtype=np.int8) for k, v in inputs.items()}
        for runner in self.runners:
            cn = runner.cn
            ins = [env[t] for t in cn.act_inputs]
            outs = runner.run(ins, seq)
            for t, arr in zip(cn.node.outputs, outs):
                env[t] = arr
        return {spec.name: env[spec.name] for spec, _ in self.cm.graph_outputs}

    def dequantize_outputs(self, outputs: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = {}
        for spec, scale in self.cm.graph_outputs:
            out[spec.name] = dequantize(outputs[spec.name], scale.scale)
        return out


def simulated_latency_us(cm: CompiledModel) -> float:
    """Longest cost-weighted path through the node DAG (per-request latency)."""
    succ: dict[str, list[str]] = {}
    for s, d, _ in cm.edges:
        succ.setdefault(s, []).append(d)
    cost = {cn.id: cn.cost_hint_us for cn in cm.nodes}
    best: dict[str, float] = {}
    for cn in reversed(cm.nodes):  # nodes are in topological order
        nid = cn.id
        tail = max((best[d] for d in succ.get(nid, []) if d in best), default=0.0)
        best[nid] = cost[nid] + tail
    return max(best.values(), default=0.0)


def simulated_bottleneck_us(cm: CompiledModel, assignment: dict[str, str] | None = None) -> float:
    """Pipeline bottleneck: the largest per-board total node cost.

    Without an assignment each node is its own stage (ideal pipelining).
    """
    if assignment is None:
        return max((cn.cost_hint_us for cn in cm.nodes), default=0.0)
    load: dict[str, float] = {}
    for cn in cm.nodes:
        b = assignment[cn.id]
        load[b] = load.get(b, 0.0) + cn.cost_hint_us
    return max(load.values(), default=0.0)
