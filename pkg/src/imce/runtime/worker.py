"""Worker process emulating one processing-unit board.

A worker accepts a configuration (node parameters + weights + link map),
instantiates one F-thread per hosted node and one sender thread per outbound
S-link, then serves inference traffic compute-and-forward style: an F-thread
fires the moment all input slots for a sequence number are filled and
immediately forwards its outputs to local F-threads, S-links, or back to the
orchestrator for graph outputs.

Transport rules: every S-link channel is one dedicated TCP connection carrying
Tensor frames with strictly increasing seq; malformed traffic yields an Error
frame or a dropped connection, never a dead worker.
"""
from __future__ import annotations

import logging
import os
import queue
import socket
import threading
import time

import numpy as np

from ..compiler import CompiledNode
from ..errors import ConfigError
from ..ir import GraphNode, OpKind
from ..noise import NoiseModel
from ..quant import QuantParams
from .executor import NodeRunner
from .protocol import (
    HEADER_SIZE,
    ComMessage,
    MsgType,
    ProtocolError,
    pack_tensor,
    read_message,
    send_message,
    unpack_tensor,
    unpack_weights,
)
from .stats import StatsSink

log = logging.getLogger(__name__)

_STOP = object()
CONNECT_RETRY_S = 0.1
CONNECT_TIMEOUT_S = 20.0
CONFIG_WAIT_S = 60.0


def _node_from_cfg(rec: dict) -> CompiledNode:
    quant = {t: QuantParams(s) for t, s in rec.get("quant", {}).items()}
    weight_inputs = [rec["weight_tensor"]] if "weight_tensor" in rec else []
    n = GraphNode(
        rec["id"],
        OpKind(rec["kind"]),
        rec["act_inputs"] + weight_inputs,
        rec["outputs"],
        rec.get("attrs", {}),
        quant,
    )
    # normalize input layout to (x, weights[, bias]) expected by the runner
    if weight_inputs:
        n.inputs = [rec["act_inputs"][0], weight_inputs[0]]
    cn = CompiledNode(
        node=n,
        accel="an" if "weights" in rec else "di",
        act_inputs=list(rec["act_inputs"]),
        in_shapes=[tuple(s) for s in rec["in_shapes"]],
        out_shapes=[tuple(s) for s in rec["out_shapes"]],
        cost_hint_us=rec.get("cost_hint_us", 0.0),
    )
    if "weights" in rec:
        m = rec["weights"]
        cn.out_features = int(m["out_features"])
        cn.in_features = int(m["in_features"])
        cn.in_scale = quant[cn.act_inputs[0]]
        cn.out_scale = quant[n.outputs[0]]
        cn.weight_scale = quant[rec["weight_tensor"]]
    return cn


class FThread(threading.Thread):
    """Dedicated execution task for one hosted node."""

    def __init__(self, worker: "Worker", cn: CompiledNode, fanout: list[list[dict]]):
        super().__init__(name=f"fthread-{cn.id}", daemon=True)
        self.worker = worker
        self.cn = cn
        self.fanout = fanout
        self.n_slots = len(cn.act_inputs)
        self.inbox: queue.Queue = queue.Queue()
        self.pending: dict[int, dict[int, np.ndarray]] = {}
        self.runner: NodeRunner | None = None  # built once weights arrive

    def deposit(self, seq: int, slot: int, arr: np.ndarray) -> None:
        self.inbox.put((seq, slot, arr))
        self.worker.stats.queue_depth(self.cn.id, self.inbox.qsize())

    def stop(self) -> None:
        self.inbox.put(_STOP)

    def run(self) -> None:
        while True:
            item = self.inbox.get()
            if item is _STOP:
                return
            seq, slot, arr = item
            slots = self.pending.setdefault(seq, {})
            if slot in slots:
                log.warning("node %s: duplicate input for seq=%d slot=%d", self.cn.id, seq, slot)
                continue
            slots[slot] = arr
            if len(slots) < self.n_slots:
                continue
            del self.pending[seq]
            try:
                self._fire(seq, [slots[i] for i in range(self.n_slots)])
            except Exception as e:  # surfaced to the orchestrator as an Error frame
                log.exception("node %s failed at seq=%d", self.cn.id, seq)
                self.worker.report_failure(self.cn.id, seq, e)

    def _fire(self, seq: int, inputs: list[np.ndarray]) -> None:
        t0 = time.perf_counter()
        with self.worker.kernel_slots:
            outs = self.runner.run(inputs, seq)
        kernel_us = (time.perf_counter() - t0) * 1e6
        bytes_in = sum(a.nbytes for a in inputs)
        bytes_out = sum(a.nbytes for a in outs)
        self.worker.stats.node_fired(self.cn.id, kernel_us, bytes_in, bytes_out)
        for oi, arr in enumerate(outs):
            for tgt in self.fanout[oi]:
                self.worker.forward(tgt, seq, self.cn.node.outputs[oi], arr)


class SLinkSender(threading.Thread):
    """Outbound half of an S-thread pair: owns one channel's connection."""

    def __init__(self, worker: "Worker", channel: int, dst_board: str, dst_addr: str, tensor: str):
        super().__init__(name=f"slink-out-{channel}", daemon=True)
        self.worker = worker
        self.channel = channel
        self.dst_board = dst_board
        self.dst_addr = dst_addr
        self.tensor = tensor
        self.q: queue.Queue = queue.Queue()
        self.connected = threading.Event()
        self.last_seq = -1

    def send(self, seq: int, data: bytes) -> None:
        self.q.put((seq, data))

    def stop(self) -> None:
        self.q.put(_STOP)

    def run(self) -> None:
        host, port = self.dst_addr.rsplit(":", 1)
        deadline = time.time() + CONNECT_TIMEOUT_S
        sock = None
        while time.time() < deadline and not self.worker.stopping.is_set():
            try:
                sock = socket.create_connection((host, int(port)), timeout=5.0)
                break
            except OSError:
                time.sleep(CONNECT_RETRY_S)
        if sock is None:
            log.error("channel %d: cannot reach %s", self.channel, self.dst_addr)
            return
        try:
            sock.settimeout(30.0)
            hello = ComMessage.with_json(
                MsgType.Hello,
                {"role": "slink", "channel": self.channel, "board": self.worker.board_id},
                channel_id=self.channel,
            )
            send_message(sock, hello)
            ack = read_message(sock)
            if ack is None or ack.type != MsgType.Ack:
                log.error("channel %d: peer rejected the link", self.channel)
                return
            sock.settimeout(None)
            self.connected.set()
            self.worker.link_event()
            while True:
                item = self.q.get()
                if item is _STOP:
                    return
                seq, data = item
                assert seq > self.last_seq, "S-link seq must be strictly increasing"
                self.last_seq = seq
                msg = ComMessage(MsgType.Tensor, self.channel, seq, pack_tensor(self.tensor, data))
                n = send_message(sock, msg)
                self.worker.stats.sent(self.channel, n, len(data))
        except OSError as e:
            log.warning("channel %d: send path failed: %s", self.channel, e)
        finally:
            sock.close()


class Worker:
    def __init__(self, host: str = "127.0.0.1", port: int = 0, role: str = "an",
                 max_parallel: int = 0):
        if role not in ("an", "di"):
            raise ConfigError(f"unknown role '{role}'")
        self.role = role
        self.listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self.listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self.listener.bind((host, port))
        self.listener.listen(64)
        self.address = "%s:%d" % self.listener.getsockname()[:2]
        self.stats = StatsSink()
        self.stopping = threading.Event()
        self.configured = threading.Event()
        self.links_ready = threading.Event()
        self.kernel_slots = threading.BoundedSemaphore(max_parallel) if max_parallel > 0 else _NullSlot()
        self.board_id = ""
        self.cfg: dict = {}
        self.fthreads: dict[str, FThread] = {}
        self.senders: dict[int, SLinkSender] = {}
        self.inbound_expected: dict[int, dict] = {}
        self.inbound_bound: set[int] = set()
        self.input_targets: dict[str, dict] = {}
        self._lock = threading.Lock()
        self._links_ready_sent = False
        self._pending_weights: set[str] = set()
        self._weight_bufs: dict[str, dict] = {}
        self._control_socks: list[socket.socket] = []
        self._control_lock = threading.Lock()
        self._threads: list[threading.Thread] = []

    # -- lifecycle --------------------------------------------------------

    def serve(self) -> None:
        """Accept loop; returns after Shutdown."""
        log.info("worker role=%s listening on %s", self.role, self.address)
        while not self.stopping.is_set():
            try:
                self.listener.settimeout(0.25)
                conn, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._handle_conn, args=(conn,), daemon=True)
            t.start()
            self._threads.append(t)
        self._teardown()

    def _teardown(self) -> None:
        for ft in self.fthreads.values():
            ft.stop()
        for s in self.senders.values():
            s.stop()
        self.stats.spill()
        try:
            self.listener.close()
        except OSError:
            pass

    # -- connection handling -----------------------------------------------

    def _handle_conn(self, sock: socket.socket) -> None:
        try:
            while not self.stopping.is_set():
                try:
                    msg = read_message(sock)
                except ProtocolError as e:
                    self._reply(sock, ComMessage.with_json(MsgType.Error, {"code": "ProtocolError", "message": str(e)}))
                    return
                if msg is None:
                    return
                if msg.type == MsgType.Hello:
                    doc = msg.json()
                    if doc.get("role") == "slink":
                        self._serve_inbound_link(sock, msg.channel_id or int(doc.get("channel", 0)))
                        return
                    with self._control_lock:
                        self._control_socks.append(sock)
                    self._reply(sock, ComMessage.with_json(
                        MsgType.Ack, {"ack_type": int(MsgType.Hello), "seq": msg.seq, "role": self.role}))
                elif msg.type == MsgType.Configure:
                    self._on_configure(sock, msg)
                elif msg.type == MsgType.Weights:
                    self._on_weights(sock, msg)
                elif msg.type == MsgType.Infer:
                    self._on_infer(sock, msg)
                elif msg.type == MsgType.Stats:
                    self._reply(sock, ComMessage.with_json(MsgType.Stats, self.stats.snapshot(), seq=msg.seq))
                elif msg.type == MsgType.Shutdown:
                    self._reply(sock, ComMessage.with_json(MsgType.Ack, {"ack_type": int(MsgType.Shutdown), "seq": msg.seq}))
                    self.stopping.set()
                    return
                elif msg.type == MsgType.Tensor:
                    self._reply(sock, ComMessage.with_json(
                        MsgType.Error, {"code": "ProtocolError", "message": "Tensor frame on a control connection"}))
                else:  # Ack/Error from a peer: informational
                    log.debug("control connection received %s", msg.type.name)
        except (ConnectionError, OSError) as e:
            log.debug("connection closed: %s", e)
        except ProtocolError as e:
            self._reply(sock, ComMessage.with_json(MsgType.Error, {"code": "ProtocolError", "message": str(e)}))
        finally:
            with self._control_lock:
                if sock in self._control_socks:
                    self._control_socks.remove(sock)
            sock.close()

    def _reply(self, sock: socket.socket, msg: ComMessage) -> None:
        try:
            with self._control_lock:
                send_message(sock, msg)
        except OSError:
            pass

    def _error(self, sock, code: str, message: str, seq: int = 0) -> None:
        self._reply(sock, ComMessage.with_json(MsgType.Error, {"code": code, "message": message}, seq=seq))

    # -- configuration ------------------------------------------------------

    def _on_configure(self, sock, msg: ComMessage) -> None:
        if self.configured.is_set():
            self._error(sock, "ConfigError", "board is already configured", msg.seq)
            return
        cfg = msg.json()
        if cfg.get("class") != self.role:
            self._error(sock, "ConfigError",
                        f"role mismatch: board config is '{cfg.get('class')}', worker is '{self.role}'", msg.seq)
            return
        try:
            self._apply_config(cfg)
        except Exception as e:
            # roll back the partial state so a corrected Configure can retry
            self.fthreads.clear()
            self.senders.clear()
            self.inbound_expected.clear()
            self.input_targets.clear()
            self._pending_weights.clear()
            self._weight_bufs.clear()
            self.configured.clear()
            self._error(sock, "ConfigError", str(e), msg.seq)
            return
        self._reply(sock, ComMessage.with_json(
            MsgType.Ack, {"ack_type": int(MsgType.Configure), "seq": msg.seq, "phase": "configured",
                          "board_id": self.board_id}))
        if not self._pending_weights:
            self._finalize_config()

    def _apply_config(self, cfg: dict) -> None:
        self.cfg = cfg
        self.board_id = cfg["board_id"]
        self.stats.board_id = self.board_id
        noise = NoiseModel.from_json(cfg.get("noise"))
        peers = cfg.get("peers", {})
        for rec in cfg["nodes"]:
            cn = _node_from_cfg(rec)
            if cn.kind.value not in OpKind._value2member_map_:
                raise ConfigError(f"unknown op kind '{rec['kind']}'")
            ft = FThread(self, cn, rec.get("fanout", [[] for _ in cn.node.outputs]))
            self.fthreads[cn.id] = ft
            if "weights" in rec:
                self._pending_weights.add(cn.id)
                self._weight_bufs[cn.id] = {"meta": rec["weights"], "bias_meta": rec.get("bias")}
        for li in cfg.get("slinks_in", []):
            self.inbound_expected[int(li["channel"])] = li
        for lo in cfg.get("slinks_out", []):
            dst = lo["dst_board"]
            if dst not in peers:
                raise ConfigError(f"no address for peer board '{dst}'")
            self.senders[int(lo["channel"])] = SLinkSender(
                self, int(lo["channel"]), dst, peers[dst], lo["tensor"])
        for gi in cfg.get("graph_inputs", []):
            self.input_targets[gi["tensor"]] = gi
        self._noise = noise
        self.configured.set()

    def _on_weights(self, sock, msg: ComMessage) -> None:
        if not self.configured.is_set():
            self._error(sock, "ConfigError", "Weights before Configure", msg.seq)
            return
        try:
            meta, raw = unpack_weights(msg.payload)
            node_id = meta["node"]
            if node_id not in self._pending_weights:
                raise ConfigError(f"unexpected weights for node '{node_id}'")
            buf = self._weight_bufs[node_id]
            wm = buf["meta"]
            kind = meta.get("kind", "weights2d")
            if kind == "weights2d":
                expect = wm["rows"] * wm["cols"]
                if len(raw) != expect:
                    raise ConfigError(f"node '{node_id}': weights blob is {len(raw)} bytes, expected {expect}")
                buf["weights2d"] = np.frombuffer(raw, dtype=np.int8).reshape(wm["rows"], wm["cols"]).copy()
            elif kind == "bias":
                bm = buf["bias_meta"]
                if bm is None or len(raw) != bm["n"] * 4:
                    raise ConfigError(f"node '{node_id}': unexpected bias blob of {len(raw)} bytes")
                buf["bias"] = np.frombuffer(raw, dtype="<i4").copy()
            else:
                raise ConfigError(f"unknown weights kind '{kind}'")
            done = "weights2d" in buf and (buf["bias_meta"] is None or "bias" in buf)
            if done:
                self._pending_weights.discard(node_id)
            self._reply(sock, ComMessage.with_json(
                MsgType.Ack, {"ack_type": int(MsgType.Weights), "seq": msg.seq, "node": node_id}))
            if not self._pending_weights:
                self._finalize_config()
        except (ConfigError, ProtocolError, KeyError, ValueError) as e:
            self._error(sock, "ConfigError", str(e), msg.seq)

    def _finalize_config(self) -> None:
        """All weights present: program noise, start F-threads and S-links."""
        with self._lock:
            if any(ft.runner is not None for ft in self.fthreads.values()):
                return
            for nid, ft in self.fthreads.items():
                buf = self._weight_bufs.get(nid)
                if buf is not None:
                    ft.cn.weights2d = buf["weights2d"]
                    if buf.get("bias") is not None:
                        ft.cn.bias = buf["bias"]
                ft.runner = NodeRunner.build(ft.cn, self._noise)
                ft.start()
            for s in self.senders.values():
                s.start()
        self.link_event()

    # -- link readiness ------------------------------------------------------

    def link_event(self) -> None:
        with self._lock:
            if self._links_ready_sent or not self.configured.is_set():
                return
            if self._pending_weights:
                return
            out_ok = all(s.connected.is_set() for s in self.senders.values())
            in_ok = set(self.inbound_expected) <= self.inbound_bound
            if out_ok and in_ok:
                self._links_ready_sent = True
            else:
                return
        self.broadcast(ComMessage.with_json(
            MsgType.Ack, {"ack_type": int(MsgType.Configure), "phase": "links_ready",
                          "board_id": self.board_id, "seq": 0}))

    def broadcast(self, msg: ComMessage) -> None:
        with self._control_lock:
            for sock in list(self._control_socks):
                try:
                    send_message(sock, msg)
                except OSError:
                    pass

    # -- inbound S-link -------------------------------------------------------

    def _serve_inbound_link(self, sock: socket.socket, channel: int) -> None:
        if not self.configured.wait(CONFIG_WAIT_S):
            self._error(sock, "ConfigError", "board never configured")
            return
        li = self.inbound_expected.get(channel)
        if li is None:
            self._error(sock, "ConfigError", f"unknown S-link channel {channel}")
            return
        self._reply(sock, ComMessage.with_json(MsgType.Ack, {"ack_type": int(MsgType.Hello), "channel": channel}))
        with self._lock:
            self.inbound_bound.add(channel)
        self.link_event()
        ft = self.fthreads[li["dst_node"]]
        slot = int(li["dst_slot"])
        expect = int(np.prod(ft.cn.in_shapes[slot]))
        last_seq = -1
        while not self.stopping.is_set():
            msg = read_message(sock)
            if msg is None:
                return
            if msg.type != MsgType.Tensor:
                self._error(sock, "ProtocolError", f"{msg.type.name} frame on an S-link")
                return
            if msg.seq <= last_seq:
                self._error(sock, "ProtocolError",
                            f"channel {channel}: seq {msg.seq} not greater than {last_seq}")
                return
            last_seq = msg.seq
            name, data = unpack_tensor(msg.payload)
            self.stats.received(channel, len(msg.payload) + HEADER_SIZE, len(data))
            if len(data) != expect:
                self._error(sock, "ShapeError",
                            f"channel {channel}: tensor '{name}' has {len(data)} bytes, expected {expect}")
                return
            ft.deposit(msg.seq, slot, np.frombuffer(data, dtype=np.int8).copy())

    # -- inference ------------------------------------------------------------

    def _on_infer(self, sock, msg: ComMessage) -> None:
        if not self.configured.is_set():
            self._error(sock, "ConfigError", "Infer before Configure", msg.seq)
            return
        try:
            name, data = unpack_tensor(msg.payload)
        except ProtocolError as e:
            self._error(sock, "ProtocolError", str(e), msg.seq)
            return
        gi = self.input_targets.get(name)
        if gi is None:
            self._error(sock, "ConfigError", f"this board hosts no consumer of input '{name}'", msg.seq)
            return
        expect = int(np.prod(gi["shape"]))
        if len(data) != expect:
            self._error(sock, "ShapeError",
                        f"input '{name}': got {len(data)} bytes, expected {expect}", msg.seq)
            return
        arr = np.frombuffer(data, dtype=np.int8).copy()
        for tgt in gi["targets"]:
            self.fthreads[tgt["node"]].deposit(msg.seq, int(tgt["slot"]), arr)

    # -- forwarding -------------------------------------------------------------

    def forward(self, tgt: dict, seq: int, tensor: str, arr: np.ndarray) -> None:
        kind = tgt["kind"]
        if kind == "local":
            self.fthreads[tgt["node"]].deposit(seq, int(tgt["slot"]), arr)
        elif kind == "slink":
            self.senders[int(tgt["channel"])].send(seq, arr.tobytes())
        elif kind == "cda":
            self.broadcast(ComMessage(MsgType.Tensor, 0, seq, pack_tensor(tgt["tensor"], arr.tobytes())))
        else:
            raise ConfigError(f"unknown fanout target kind '{kind}'")

    def report_failure(self, node_id: str, seq: int, err: Exception) -> None:
        self.broadcast(ComMessage.with_json(
            MsgType.Error,
            {"code": type(err).__name__, "message": str(err), "node": node_id, "board": self.board_id},
            seq=seq,
        ))


class _NullSlot:
    def __enter__(self):
        return self

    def __exit__(self, *exc):
        return False


def worker_serve(listen: str, role: str, ready_file: str | None = None,
                 max_parallel: int = 0) -> None:
    """Blocking entry point: bind, optionally announce the bound address,
    serve until Shutdown."""
    host, port = listen.rsplit(":", 1)
    w = Worker(host, int(port), role, max_parallel=max_parallel)
    if ready_file:
        tmp = ready_file + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            f.write(w.address + "\n")
        os.replace(tmp, ready_file)
    w.serve()
