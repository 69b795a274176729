"""Cluster orchestration: board configuration, pipelined inference, stats.

The orchestrator connects to every worker over one control connection, pushes
board configuration and weights, waits for all S-links to establish, then
streams inference requests keeping up to `window` sequences in flight.
Results are emitted strictly in sequence order.
"""
from __future__ import annotations

import json
import logging
import os
import queue
import socket
import subprocess
import sys
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from ..errors import DistributedError
from ..mapper import HwInfo
from ..quant import QuantParams, quantize_fp32
from .protocol import ComMessage, MsgType, pack_tensor, pack_weights, read_message, send_message, unpack_tensor
from .stats import merge_reports

log = logging.getLogger(__name__)

DEFAULT_CONFIG_TIMEOUT_S = 10.0
RUN_STALL_TIMEOUT_S = 120.0


@dataclass
class InferenceResult:
    seq: int
    outputs: dict[str, np.ndarray]  # INT8 codes per graph output
    wall_ms: float


@dataclass
class _BoardConn:
    board_id: str
    sock: socket.socket
    send_lock: threading.Lock = field(default_factory=threading.Lock)

    def send(self, msg: ComMessage) -> None:
        with self.send_lock:
            send_message(self.sock, msg)


class ClusterHandle:
    """Live connections to a configured cluster."""

    def __init__(self, cfg_dir: str, hw: HwInfo, address_map: dict[str, str] | None = None,
                 timeout_s: float = DEFAULT_CONFIG_TIMEOUT_S):
        self.cfg_dir = cfg_dir
        self.hw = hw
        self.timeout_s = timeout_s
        self.events: queue.Queue = queue.Queue()
        self.conns: dict[str, _BoardConn] = {}
        self.cfgs: dict[str, dict] = {}
        self.ready = False
        self._seq_ctl = 0
        self._infer_base = 0  # wire seq is strictly increasing across runs

        self.boards = self._load_cfgs()
        self.addresses = {}
        for bid in self.boards:
            addr = (address_map or {}).get(bid) or self.hw.board(bid).address
            if not addr or addr == "auto":
                raise DistributedError(f"no address known for board '{bid}'", board=bid)
            self.addresses[bid] = addr

        # union views of the graph boundary
        self.graph_inputs: dict[str, dict] = {}
        self.graph_outputs: dict[str, dict] = {}
        self.input_boards: dict[str, list[str]] = {}
        for bid, cfg in sorted(self.cfgs.items()):
            for gi in cfg.get("graph_inputs", []):
                self.graph_inputs[gi["tensor"]] = gi
                self.input_boards.setdefault(gi["tensor"], []).append(bid)
            for go in cfg.get("graph_outputs", []):
                self.graph_outputs[go["tensor"]] = go

    def _load_cfgs(self) -> list[str]:
        boards = []
        for fn in sorted(os.listdir(self.cfg_dir)):
            if fn.startswith("board_") and fn.endswith(".cfg"):
                with open(os.path.join(self.cfg_dir, fn), "r", encoding="utf-8") as f:
                    cfg = json.load(f)
                self.cfgs[cfg["board_id"]] = cfg
                boards.append(cfg["board_id"])
        if not boards:
            raise DistributedError(f"no board configurations found in '{self.cfg_dir}'")
        return boards

    # -- configuration -----------------------------------------------------

    def configure(self) -> None:
        """Connect, push configs and weights, wait for all links; Ready or raise."""
        unreachable = []
        for bid in self.boards:
            host, port = self.addresses[bid].rsplit(":", 1)
            try:
                sock = socket.create_connection((host, int(port)), timeout=self.timeout_s)
            except OSError:
                unreachable.append(bid)
                continue
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self.conns[bid] = _BoardConn(bid, sock)
            threading.Thread(target=self._reader, args=(self.conns[bid],), daemon=True).start()
        if unreachable:
            self.shutdown()
            raise DistributedError(f"unreachable boards: {sorted(unreachable)}", board=unreachable[0])

        for bid in self.boards:
            self._ctl(bid, ComMessage.with_json(MsgType.Hello, {"role": "cda"}, seq=self._next_seq()))
            self._await_ack(bid, MsgType.Hello)
            cfg = dict(self.cfgs[bid])
            cfg["peers"] = {b: self.addresses[b] for b in self.boards if b != bid}
            self._ctl(bid, ComMessage.with_json(MsgType.Configure, cfg, seq=self._next_seq()))
            self._await_ack(bid, MsgType.Configure, phase="configured")
            self._send_weights(bid, cfg)

        deadline = time.time() + self.timeout_s * max(1, len(self.boards))
        pending = set(self.boards)
        while pending:
            ev = self._next_event(deadline, during="link establishment")
            kind, bid, msg = ev
            if kind == "dead":
                raise DistributedError(f"board '{bid}' dropped during configuration", board=bid)
            if kind == "msg" and msg.type == MsgType.Ack:
                doc = msg.json()
                if doc.get("phase") == "links_ready":
                    pending.discard(doc.get("board_id", bid))
            elif kind == "msg" and msg.type == MsgType.Error:
                doc = msg.json()
                raise DistributedError(f"board '{bid}': {doc.get('message')}", board=bid)
        self.ready = True

    def _send_weights(self, bid: str, cfg: dict) -> None:
        blob_path = os.path.join(self.cfg_dir, cfg["blob"])
        blob = b""
        if os.path.exists(blob_path):
            with open(blob_path, "rb") as f:
                blob = f.read()
        for rec in cfg["nodes"]:
            if "weights" not in rec:
                continue
            wm = rec["weights"]
            raw = blob[wm["offset"] : wm["offset"] + wm["length"]]
            msg = ComMessage(
                MsgType.Weights, 0, self._next_seq(),
                pack_weights({"node": rec["id"], "kind": "weights2d"}, raw),
            )
            self._ctl(bid, msg)
            self._await_ack(bid, MsgType.Weights)
            if "bias" in rec:
                bm = rec["bias"]
                raw = blob[bm["offset"] : bm["offset"] + bm["length"]]
                msg = ComMessage(
                    MsgType.Weights, 0, self._next_seq(),
                    pack_weights({"node": rec["id"], "kind": "bias"}, raw),
                )
                self._ctl(bid, msg)
                self._await_ack(bid, MsgType.Weights)

    def _next_seq(self) -> int:
        self._seq_ctl += 1
        return self._seq_ctl

    def _ctl(self, bid: str, msg: ComMessage) -> None:
        try:
            self.conns[bid].send(msg)
        except OSError as e:
            raise DistributedError(f"board '{bid}' connection failed: {e}", board=bid) from e

    def _reader(self, conn: _BoardConn) -> None:
        try:
            while True:
                msg = read_message(conn.sock)
                if msg is None:
                    break
                self.events.put(("msg", conn.board_id, msg))
        except Exception:
            pass
        self.events.put(("dead", conn.board_id, None))

    def _next_event(self, deadline: float, during: str):
        remain = deadline - time.time()
        if remain <= 0:
            raise DistributedError(f"timeout during {during}")
        try:
            return self.events.get(timeout=remain)
        except queue.Empty:
            raise DistributedError(f"timeout during {during}") from None

    def _await_ack(self, bid: str, acked: MsgType, phase: str | None = None) -> dict:
        deadline = time.time() + self.timeout_s
        stash = []
        try:
            while True:
                kind, eb, msg = self._next_event(deadline, during=f"waiting for {acked.name} ack from '{bid}'")
                if kind == "dead":
                    raise DistributedError(f"board '{bid}' dropped", board=bid)
                if msg.type == MsgType.Error:
                    doc = msg.json()
                    raise DistributedError(
                        f"board '{eb}' rejected {acked.name}: {doc.get('message')}", board=eb
                    )
                if eb == bid and msg.type == MsgType.Ack:
                    doc = msg.json()
                    if doc.get("ack_type") == int(acked) and (phase is None or doc.get("phase") == phase):
                        return doc
                stash.append((kind, eb, msg))
        finally:
            for ev in stash:
                self.events.put(ev)

    # -- inference -----------------------------------------------------------

    def run_inference(self, inputs, window: int = 1):
        """Yield InferenceResult in seq order, keeping `window` in flight.

        `inputs` is an iterable of FP32 arrays for the single graph input (or
        dicts name->array for multi-input graphs); they are quantized at the
        boundary scale here.
        """
        if not self.ready:
            raise DistributedError("cluster is not configured")
        if window < 1:
            raise ValueError("window must be >= 1")
        expected = set(self.graph_outputs)
        it = iter(inputs)
        in_flight: dict[int, dict] = {}
        done: dict[int, InferenceResult] = {}
        sent = {}
        base = self._infer_base
        next_seq = base
        next_emit = base
        exhausted = False

        def _send_next():
            nonlocal next_seq, exhausted
            try:
                x = next(it)
            except StopIteration:
                exhausted = True
                return
            if not isinstance(x, dict):
                if len(self.graph_inputs) != 1:
                    raise DistributedError("multi-input graph needs dict inputs")
                x = {next(iter(self.graph_inputs)): x}
            seq = next_seq
            next_seq += 1
            self._infer_base = next_seq
            in_flight[seq] = {}
            sent[seq] = time.perf_counter()
            for name, arr in x.items():
                gi = self.graph_inputs[name]
                q = quantize_fp32(np.asarray(arr, dtype=np.float32).reshape(gi["shape"]), gi["scale"])
                payload = pack_tensor(name, q.tobytes())
                for bid in self.input_boards[name]:
                    self._ctl(bid, ComMessage(MsgType.Infer, 0, seq, payload))

        while not exhausted and len(in_flight) < window:
            _send_next()
        while in_flight or (not exhausted):
            if not in_flight and not exhausted:
                _send_next()
                continue
            deadline = time.time() + RUN_STALL_TIMEOUT_S
            kind, bid, msg = self._next_event(deadline, during=f"inference (seq {next_emit})")
            if kind == "dead":
                raise DistributedError(
                    f"board '{bid}' failed during inference at seq {next_emit - base}",
                    board=bid, seq=next_emit - base,
                )
            if msg.type == MsgType.Error:
                doc = msg.json()
                raise DistributedError(
                    f"board '{bid}' reported: {doc.get('message')}", board=bid, seq=msg.seq
                )
            if msg.type != MsgType.Tensor:
                continue
            name, data = unpack_tensor(msg.payload)
            rec = in_flight.get(msg.seq)
            if rec is None or name not in expected:
                continue
            go = self.graph_outputs[name]
            rec[name] = np.frombuffer(data, dtype=np.int8).reshape(go["shape"]).copy()
            if set(rec) == expected:
                wall_ms = (time.perf_counter() - sent[msg.seq]) * 1e3
                done[msg.seq] = InferenceResult(msg.seq - base, rec, wall_ms)
                del in_flight[msg.seq]
                if not exhausted:
                    _send_next()
                while next_emit in done:
                    yield done.pop(next_emit)
                    next_emit += 1

    def output_scale(self, name: str) -> QuantParams:
        return QuantParams(self.graph_outputs[name]["scale"])

    # -- stats / teardown ------------------------------------------------------

    def collect_stats(self) -> dict:
        reports: dict[str, dict] = {}
        missing = []
        for bid in self.boards:
            if bid not in self.conns:
                missing.append(bid)
                continue
            try:
                self._ctl(bid, ComMessage(MsgType.Stats, 0, self._next_seq()))
                deadline = time.time() + self.timeout_s
                stash = []
                got = None
                while got is None:
                    kind, eb, msg = self._next_event(deadline, during=f"stats from '{bid}'")
                    if kind == "msg" and eb == bid and msg.type == MsgType.Stats:
                        got = msg.json()
                    else:
                        stash.append((kind, eb, msg))
                for ev in stash:
                    self.events.put(ev)
                reports[bid] = got
            except DistributedError:
                missing.append(bid)
        return merge_reports(reports, missing)

    def shutdown(self) -> None:
        for bid, conn in list(self.conns.items()):
            try:
                conn.send(ComMessage(MsgType.Shutdown, 0, self._next_seq()))
            except OSError:
                pass
        time.sleep(0.05)
        for conn in self.conns.values():
            try:
                conn.sock.close()
            except OSError:
                pass
        self.conns.clear()
        self.ready = False


def configure_cluster(cfg_dir: str, hw: HwInfo, address_map: dict[str, str] | None = None,
                      timeout_s: float = DEFAULT_CONFIG_TIMEOUT_S) -> ClusterHandle:
    h = ClusterHandle(cfg_dir, hw, address_map, timeout_s)
    h.configure()
    return h


# ---------------------------------------------------------------------------
# Local worker pool
# ---------------------------------------------------------------------------


class LocalCluster:
    """Spawn one worker subprocess per board on loopback; addresses are
    discovered through ready files, so the full socket path is exercised."""

    def __init__(self, hw: HwInfo, workdir: str):
        self.hw = hw
        self.workdir = workdir
        self.procs: dict[str, subprocess.Popen] = {}
        self.address_map: dict[str, str] = {}

    def start(self, boards: list[str] | None = None, timeout_s: float = 20.0) -> dict[str, str]:
        os.makedirs(self.workdir, exist_ok=True)
        wanted = boards if boards is not None else [b.board_id for b in self.hw.boards]
        for bid in wanted:
            board = self.hw.board(bid)
            ready = os.path.join(self.workdir, f"ready_{bid}.txt")
            if os.path.exists(ready):
                os.unlink(ready)
            cmd = [
                sys.executable, "-m", "imce.cli", "worker",
                "--listen", "127.0.0.1:0", "--role", board.accel, "--ready-file", ready,
            ]
            self.procs[bid] = subprocess.Popen(
                cmd, stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL,
            )
        deadline = time.time() + timeout_s
        for bid in wanted:
            ready = os.path.join(self.workdir, f"ready_{bid}.txt")
            while not os.path.exists(ready):
                if time.time() > deadline:
                    self.stop()
                    raise DistributedError(f"worker for board '{bid}' never came up", board=bid)
                if self.procs[bid].poll() is not None:
                    self.stop()
                    raise DistributedError(f"worker for board '{bid}' exited early", board=bid)
                time.sleep(0.02)
            with open(ready, "r", encoding="utf-8") as f:
                self.address_map[bid] = f.read().strip()
        return self.address_map

    def kill_board(self, bid: str) -> None:
        p = self.procs.get(bid)
        if p is not None:
            p.kill()
            p.wait(timeout=5)

    def stop(self) -> None:
        for p in self.procs.values():
            if p.poll() is None:
                p.terminate()
        for p in self.procs.values():
            try:
                p.wait(timeout=5)
            except subprocess.TimeoutExpired:
                p.kill()
        self.procs.clear()

    def __enter__(self) -> "LocalCluster":
        return self

    def __exit__(self, *exc) -> None:
        self.stop()
