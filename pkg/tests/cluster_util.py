"""Helpers for spinning up clusters in tests: in-process worker threads for
fast unit-level checks, subprocess pools where process isolation matters."""
from __future__ import annotations

import threading

import numpy as np

from imce.compiler import CalibrationSet, CompiledModel, compile_model
from imce.mapper import Board, HwInfo, emit_configs, map_nodes
from imce.noise import NoiseModel
from imce.runtime.cluster import ClusterHandle, configure_cluster
from imce.runtime.worker import Worker


def hw_info(n_an: int, n_di: int, fthreads: int = 4, sthreads: int = 64) -> HwInfo:
    return HwInfo(
        [Board(f"an{i:02d}", "an", "auto", fthreads, sthreads) for i in range(n_an)]
        + [Board(f"di{i:02d}", "di", "auto", fthreads, sthreads) for i in range(n_di)]
    )


def compile_for_tests(g, n_cal: int = 4, seed: int = 0) -> CompiledModel:
    rng = np.random.default_rng(seed)
    shape = g.graph_inputs[0].shape
    cal = CalibrationSet(rng.uniform(-1, 1, size=(n_cal, *shape)).astype(np.float32))
    return compile_model(g, cal)


class InprocessWorkers:
    """Worker instances running on daemon threads inside the test process."""

    def __init__(self, hw: HwInfo, boards: list[str]):
        self.workers: dict[str, Worker] = {}
        self.address_map: dict[str, str] = {}
        for bid in boards:
            role = hw.board(bid).accel
            w = Worker("127.0.0.1", 0, role)
            t = threading.Thread(target=w.serve, daemon=True, name=f"worker-{bid}")
            t.start()
            self.workers[bid] = w
            self.address_map[bid] = w.address

    def stop(self):
        for w in self.workers.values():
            w.stopping.set()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


def deploy(cm: CompiledModel, hw: HwInfo, tmpdir: str, strategy: str = "loadbalance",
           noise: NoiseModel | None = None, timeout_s: float = 10.0):
    """Map + emit + start in-process workers + configure; returns (handle, pool)."""
    plan = map_nodes(cm, hw, strategy)
    emit_configs(plan, cm, hw, noise or NoiseModel(), tmpdir)
    boards = sorted(set(plan.assignment.values()))
    pool = InprocessWorkers(hw, boards)
    try:
        handle = configure_cluster(tmpdir, hw, pool.address_map, timeout_s=timeout_s)
    except Exception:
        pool.stop()
        raise
    return handle, pool
