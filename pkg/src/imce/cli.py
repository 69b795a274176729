"""Operator command line: compile, map, run, oracle, stats, worker.

Exit codes: 2 model parse/validation errors, 3 quantization errors,
4 mapping capacity/connectivity errors, 5 distributed runtime errors.
"""
from __future__ import annotations

import base64
import glob as globmod
import json
import logging
import os
import sys
import time

import click
import numpy as np

from . import compiler as comp
from . import mapper as mapping
from .errors import (
    CapacityError,
    ConnectivityError,
    DistributedError,
    ImceError,
    ParseError,
    QuantizationError,
    ValidationError,
)
from .ir import load_model
from .noise import NoiseModel
from .runtime.cluster import LocalCluster, configure_cluster
from .runtime.executor import SequentialExecutor, simulated_bottleneck_us, simulated_latency_us
from .runtime.worker import worker_serve

log = logging.getLogger("imce")

EXIT_VALIDATION = 2
EXIT_QUANT = 3
EXIT_MAPPING = 4
EXIT_DISTRIBUTED = 5


def _fail(code: int, err: Exception) -> None:
    click.echo(f"error: {type(err).__name__}: {err}", err=True)
    sys.exit(code)


def _setup_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.WARNING),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )


@click.group()
@click.option("--seed", default=0, show_default=True, help="default seed for all randomness")
@click.option("--log-level", default="warning", show_default=True)
@click.pass_context
def main(ctx, seed, log_level):
    """In-memory-computing emulation toolchain."""
    _setup_logging(log_level)
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed


# ---------------------------------------------------------------------------
# compile
# ---------------------------------------------------------------------------


@main.command("compile")
@click.argument("model", type=click.Path())
@click.argument("calibration", type=click.Path())
@click.option("--out", "-o", required=True, type=click.Path(), help="output directory")
@click.option("--avgpool-on-di", is_flag=True, help="keep average pooling on the digital units")
def cmd_compile(model, calibration, out, avgpool_on_di):
    """Quantize and lower MODEL using CALIBRATION samples (.npz)."""
    try:
        g = load_model(model)
        cal = comp.CalibrationSet.load(calibration)
    except (ParseError, ValidationError, OSError, KeyError) as e:
        _fail(EXIT_VALIDATION, e)
    report: dict = {}
    try:
        cm = comp.compile_model(g, cal, avgpool_on_di=avgpool_on_di, report=report)
    except (ValidationError, comp.SizeError) as e:
        _fail(EXIT_VALIDATION, e)
    except (QuantizationError, ImceError) as e:
        _fail(EXIT_QUANT, e)
    comp.save_compiled(cm, out)
    stages = " -> ".join(f"{k}:{v}" for k, v in report.items())
    click.echo(f"nodes {stages}")
    n_an = sum(1 for n in cm.nodes if n.accel == "an")
    click.echo(f"classified an:{n_an} di:{len(cm.nodes) - n_an}")
    click.echo(f"artifacts written to {out}")


# ---------------------------------------------------------------------------
# map
# ---------------------------------------------------------------------------


@main.command("map")
@click.argument("compiled_dir", type=click.Path())
@click.argument("hw_info", type=click.Path())
@click.option("--strategy", default="loadbalance", show_default=True,
              type=click.Choice(mapping.STRATEGIES))
@click.option("--out", "-o", required=True, type=click.Path())
@click.option("--noise", default="", help="kind=...,sigma_prog=...,sigma_read=...,seed=...")
@click.pass_context
def cmd_map(ctx, compiled_dir, hw_info, strategy, out, noise):
    """Map a compiled model onto boards and emit board configs + topology."""
    try:
        cm = comp.load_compiled(compiled_dir)
        hw = mapping.HwInfo.load(hw_info)
    except (ParseError, ValidationError, OSError) as e:
        _fail(EXIT_VALIDATION, e)
    nm = _parse_noise(noise, ctx.obj.get("seed", 0))
    try:
        plan = mapping.map_nodes(cm, hw, strategy)
        mapping.validate_plan(plan, cm, hw)
    except (CapacityError, ConnectivityError) as e:
        _fail(EXIT_MAPPING, e)
    mapping.emit_configs(plan, cm, hw, nm, out)
    sth = plan.sthreads()
    click.echo(f"{'board':<10} {'class':<5} {'fthr':>4} {'cap':>4} {'sthr':>4} {'cap':>4}")
    for b in sorted(hw.boards, key=lambda b: b.board_id):
        click.echo(
            f"{b.board_id:<10} {b.accel:<5} {plan.fthreads.get(b.board_id, 0):>4} "
            f"{b.max_fthreads:>4} {sth.get(b.board_id, 0):>4} {b.max_sthreads:>4}"
        )
    click.echo(f"inter-board links: {plan.cut_edges()}; configs written to {out}")


def _parse_noise(spec: str, default_seed: int) -> NoiseModel:
    if not spec:
        return NoiseModel(seed=default_seed)
    fields: dict = {"seed": default_seed}
    for part in spec.split(","):
        if not part.strip():
            continue
        k, _, v = part.partition("=")
        k = k.strip()
        if k == "kind":
            fields["kind"] = v.strip()
        elif k in ("sigma_prog", "sigma_read"):
            fields[k] = float(v)
        elif k == "seed":
            fields["seed"] = int(v)
        else:
            raise click.BadParameter(f"unknown noise field '{k}'")
    if "kind" not in fields:
        has_p = fields.get("sigma_prog", 0) > 0
        has_r = fields.get("sigma_read", 0) > 0
        fields["kind"] = {(False, False): "none", (True, False): "gaussian_programming",
                          (False, True): "gaussian_read", (True, True): "combined"}[(has_p, has_r)]
    return NoiseModel(**fields)


# ---------------------------------------------------------------------------
# run / oracle
# ---------------------------------------------------------------------------


def _load_manifest(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            man = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read manifest '{path}': {e}") from e
    base = os.path.dirname(os.path.abspath(path))
    for key in ("model", "calibration", "hw_info", "labels"):
        if man.get(key):
            man[key] = os.path.join(base, man[key]) if not os.path.isabs(man[key]) else man[key]
    inputs = man.get("inputs", {})
    if "glob" in inputs and not os.path.isabs(inputs["glob"]):
        inputs["glob"] = os.path.join(base, inputs["glob"])
    return man


def _load_inputs(man: dict, input_shape, default_seed: int) -> np.ndarray:
    src = man.get("inputs", {})
    if "glob" in src:
        paths = sorted(globmod.glob(src["glob"]))
        if not paths:
            raise ParseError(f"input glob '{src['glob']}' matches no files")
        return np.stack([np.load(p).astype(np.float32) for p in paths])
    syn = src.get("synthetic", {"count": 8})
    rng = np.random.default_rng(int(syn.get("seed", default_seed)))
    n = int(syn.get("count", 8))
    return rng.uniform(-1.0, 1.0, size=(n, *input_shape)).astype(np.float32)


def _results_doc(cm, outputs_per_seq: list[dict[str, np.ndarray]], labels) -> dict:
    out_scales = {spec.name: float(q.scale) for spec, q in cm.graph_outputs}
    out_shapes = {spec.name: list(spec.shape) for spec, q in cm.graph_outputs}
    requests = []
    for seq, outs in enumerate(outputs_per_seq):
        requests.append({
            "seq": seq,
            "outputs": {
                name: {
                    "shape": out_shapes[name],
                    "dtype": "int8",
                    "scale": out_scales[name],
                    "data_b64": base64.b64encode(arr.astype(np.int8).tobytes()).decode("ascii"),
                }
                for name, arr in sorted(outs.items())
            },
        })
    sim_lat = simulated_latency_us(cm)
    bottleneck = simulated_bottleneck_us(cm)
    summary = {
        "count": len(outputs_per_seq),
        "sim_latency_us": round(sim_lat, 4),
        "sim_rate_per_s": round(1e6 / bottleneck, 4) if bottleneck > 0 else None,
        "accuracy_pct": None,
    }
    if labels is not None and len(cm.graph_outputs) == 1:
        name = cm.graph_outputs[0][0].name
        preds = [int(np.argmax(outs[name].reshape(-1))) for outs in outputs_per_seq]
        hits = sum(1 for p, y in zip(preds, labels) if p == int(y))
        summary["accuracy_pct"] = round(100.0 * hits / len(preds), 4)
    return {"format": "imce-results", "version": 1, "requests": requests, "summary": summary}


def _write_json(path: str, doc: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=1, sort_keys=True)
        f.write("\n")


def _prepare_run(man: dict, out: str, seed: int, noise_override: str):
    """Shared compile+map stage for run; returns (cm, hw, nm, inputs, labels, mapped_dir)."""
    g = load_model(man["model"])
    cal = comp.CalibrationSet.load(man["calibration"])
    cm = comp.compile_model(g, cal, avgpool_on_di=bool(man.get("avgpool_on_di", False)))
    compiled_dir = os.path.join(out, "compiled")
    comp.save_compiled(cm, compiled_dir)
    hw = mapping.HwInfo.load(man["hw_info"])
    if noise_override:
        nm = _parse_noise(noise_override, seed)
    else:
        nm = NoiseModel.from_json(man.get("noise")) if man.get("noise") else NoiseModel(seed=seed)
    plan = mapping.map_nodes(cm, hw, man.get("strategy", "loadbalance"))
    mapping.validate_plan(plan, cm, hw)
    mapped_dir = os.path.join(out, "mapped")
    mapping.emit_configs(plan, cm, hw, nm, mapped_dir)
    spec, _ = cm.graph_inputs[0]
    inputs = _load_inputs(man, spec.shape, seed)
    labels = np.load(man["labels"]) if man.get("labels") else None
    return cm, hw, nm, inputs, labels, mapped_dir


@main.command("run")
@click.argument("manifest", type=click.Path())
@click.option("--out", "-o", required=True, type=click.Path())
@click.option("--local", is_flag=True, help="spawn the workers on localhost")
@click.option("--window", default=0, help="override the manifest pipeline window")
@click.option("--noise", default="", help="override the manifest noise model")
@click.pass_context
def cmd_run(ctx, manifest, out, local, window, noise):
    """Full pipeline: compile, map, configure the cluster, stream inference."""
    seed = ctx.obj.get("seed", 0)
    try:
        man = _load_manifest(manifest)
        os.makedirs(out, exist_ok=True)
        cm, hw, nm, inputs, labels, mapped_dir = _prepare_run(man, out, seed, noise)
    except (ParseError, ValidationError, OSError) as e:
        _fail(EXIT_VALIDATION, e)
    except QuantizationError as e:
        _fail(EXIT_QUANT, e)
    except (CapacityError, ConnectivityError) as e:
        _fail(EXIT_MAPPING, e)

    win = window or int(man.get("window", 1))
    local_pool = None
    handle = None
    outputs_per_seq: list[dict] = []
    wall_ms: list[float] = []
    try:
        address_map = None
        if local:
            local_pool = LocalCluster(hw, os.path.join(out, "workers"))
            address_map = local_pool.start(boards=sorted({b for b in mapping.load_plan(mapped_dir).assignment.values()}))
        handle = configure_cluster(mapped_dir, hw, address_map)
        t0 = time.perf_counter()
        for res in handle.run_inference(list(inputs), window=win):
            outputs_per_seq.append(res.outputs)
            wall_ms.append(res.wall_ms)
        total_s = time.perf_counter() - t0
        stats = handle.collect_stats()
    except DistributedError as e:
        if outputs_per_seq:  # flush partial results before failing
            _write_json(os.path.join(out, "results.json"), _results_doc(cm, outputs_per_seq, None))
        _fail(EXIT_DISTRIBUTED, e)
    finally:
        if handle is not None:
            handle.shutdown()
        if local_pool is not None:
            local_pool.stop()

    doc = _results_doc(cm, outputs_per_seq, labels)
    _write_json(os.path.join(out, "results.json"), doc)
    _write_json(os.path.join(out, "stats.json"), stats)
    timings = {
        "wall_total_s": round(total_s, 6),
        "wall_throughput_per_s": round(len(outputs_per_seq) / total_s, 4) if total_s > 0 else None,
        "wall_latency_ms_mean": round(float(np.mean(wall_ms)), 4) if wall_ms else None,
        "per_request_ms": [round(v, 4) for v in wall_ms],
        "window": win,
    }
    _write_json(os.path.join(out, "timings.json"), timings)
    _echo_summary(doc, timings)
    click.echo(f"reports written to {out}")


def _echo_summary(doc: dict, timings: dict | None) -> None:
    s = doc["summary"]
    click.echo(f"requests: {s['count']}")
    click.echo(f"simulated latency: {s['sim_latency_us']:.1f} us; "
               f"simulated rate: {s['sim_rate_per_s']:.1f}/s")
    if timings:
        click.echo(f"wall: {timings['wall_total_s']:.3f} s total, "
                   f"{timings['wall_throughput_per_s']:.1f}/s, "
                   f"mean latency {timings['wall_latency_ms_mean']:.2f} ms (window {timings['window']})")
    if s.get("accuracy_pct") is not None:
        click.echo(f"accuracy: {s['accuracy_pct']:.2f} %")


@main.command("oracle")
@click.argument("model", type=click.Path())
@click.option("--calibration", type=click.Path(), help=".npz calibration set (INT8 mode)")
@click.option("--inputs", "inputs_glob", default="", help="glob of .npy input files")
@click.option("--count", default=8, show_default=True, help="synthetic input count")
@click.option("--labels", type=click.Path(), default=None)
@click.option("--fp32", is_flag=True, help="unquantized FP32 reference execution")
@click.option("--noise", default="", help="noise model, as in `map`")
@click.option("--out", "-o", required=True, type=click.Path())
@click.pass_context
def cmd_oracle(ctx, model, calibration, inputs_glob, count, labels, fp32, noise, out):
    """Sequential single-process reference execution of MODEL."""
    seed = ctx.obj.get("seed", 0)
    try:
        g = load_model(model)
        man = {"inputs": {"glob": inputs_glob} if inputs_glob else {"synthetic": {"count": count, "seed": seed}}}
        labels_arr = np.load(labels) if labels else None
        os.makedirs(out, exist_ok=True)
        if fp32:
            from .reference import execute_fp32

            in_name = g.graph_inputs[0].name
            inputs = _load_inputs(man, g.graph_inputs[0].shape, seed)
            requests = []
            for seq, x in enumerate(inputs):
                outs = execute_fp32(g, {in_name: x})
                requests.append({
                    "seq": seq,
                    "outputs": {
                        name: {"shape": list(arr.shape), "dtype": "fp32",
                               "data_b64": base64.b64encode(arr.astype("<f4").tobytes()).decode("ascii")}
                        for name, arr in sorted(outs.items())
                    },
                })
            summary: dict = {"count": len(requests), "accuracy_pct": None}
            if labels_arr is not None and len(g.graph_outputs) == 1:
                name = g.graph_outputs[0].name
                preds = [int(np.argmax(np.frombuffer(base64.b64decode(r["outputs"][name]["data_b64"]), dtype="<f4")))
                         for r in requests]
                hits = sum(1 for p, y in zip(preds, labels_arr) if p == int(y))
                summary["accuracy_pct"] = round(100.0 * hits / len(preds), 4)
            _write_json(os.path.join(out, "results.json"),
                        {"format": "imce-results", "version": 1, "requests": requests, "summary": summary})
            click.echo(f"fp32 reference outputs written to {out}")
            return
        if not calibration:
            raise ParseError("INT8 oracle mode needs --calibration (or pass --fp32)")
        cal = comp.CalibrationSet.load(calibration)
        cm = comp.compile_model(g, cal)
        nm = _parse_noise(noise, seed)
        ex = SequentialExecutor(cm, nm)
        inputs = _load_inputs(man, cm.graph_inputs[0][0].shape, seed)
        outs = [ex.run_fp32_input(x, seq=i) for i, x in enumerate(inputs)]
        doc = _results_doc(cm, outs, labels_arr)
        _write_json(os.path.join(out, "results.json"), doc)
        _echo_summary(doc, None)
        click.echo(f"oracle outputs written to {out}")
    except (ParseError, ValidationError, OSError) as e:
        _fail(EXIT_VALIDATION, e)
    except QuantizationError as e:
        _fail(EXIT_QUANT, e)


# ---------------------------------------------------------------------------
# stats
# ---------------------------------------------------------------------------


@main.command("stats")
@click.argument("path", type=click.Path())
def cmd_stats(path):
    """Render a stats report (stats.json, or a spill directory)."""
    docs = []
    if os.path.isdir(path):
        for fn in sorted(os.listdir(path)):
            if fn.startswith("stats_") and fn.endswith(".json"):
                with open(os.path.join(path, fn), "r", encoding="utf-8") as f:
                    docs.append(json.load(f))
        report = {"boards": {d.get("board_id", str(i)): d for i, d in enumerate(docs)}}
    else:
        with open(path, "r", encoding="utf-8") as f:
            report = json.load(f)
    click.echo(f"{'board':<10} {'node':<16} {'invocations':>12} {'kernel_ms':>10} {'bytes_in':>10} {'bytes_out':>10}")
    for bid, board in sorted(report.get("boards", {}).items()):
        for nid, rec in sorted(board.get("nodes", {}).items()):
            click.echo(
                f"{bid:<10} {nid:<16} {rec['invocations']:>12} {rec['kernel_us'] / 1e3:>10.2f} "
                f"{rec['bytes_in']:>10} {rec['bytes_out']:>10}"
            )
    missing = report.get("missing_boards")
    if missing:
        click.echo(f"missing boards: {missing}")


# ---------------------------------------------------------------------------
# worker
# ---------------------------------------------------------------------------


@main.command("worker")
@click.option("--listen", required=True, help="host:port (port 0 = ephemeral)")
@click.option("--role", required=True, type=click.Choice(["an", "di"]))
@click.option("--threads", default=0, show_default=True, help="max concurrent kernel executions (0 = unbounded)")
@click.option("--ready-file", default=None, type=click.Path(), help="write the bound address here once listening")
def cmd_worker(listen, role, threads, ready_file):
    """Run one processing-unit worker until it receives Shutdown."""
    worker_serve(listen, role, ready_file=ready_file, max_parallel=threads)


@click.command()
@click.option("--listen", required=True)
@click.option("--role", required=True, type=click.Choice(["an", "di"]))
@click.option("--threads", default=0, show_default=True)
@click.option("--ready-file", default=None, type=click.Path())
@click.option("--log-level", default="warning", show_default=True)
def worker_main(listen, role, threads, ready_file, log_level):
    """Standalone worker entry point (`imce-worker`)."""
    _setup_logging(log_level)
    worker_serve(listen, role, ready_file=ready_file, max_parallel=threads)


if __name__ == "__main__":
    main()
