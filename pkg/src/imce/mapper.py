"""Nodes2Boards mapping and board configuration file emission.

A deployment assigns every compiled node to a board of its accelerator class
subject to per-board F-thread (node) caps and S-thread (inter-board link)
caps.  One S-link serves one graph transition, i.e. one (consumer node,
input slot) fed from another board; intra-board transitions are in-memory
and free.  All outputs are deterministic: same inputs, byte-identical files.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .compiler import CompiledModel
from .errors import CapacityError, ConnectivityError, ParseError, ValidationError
from .noise import NoiseModel

STRATEGIES = ("loadbalance", "mincut", "roundrobin")


@dataclass(frozen=True)
class Board:
    board_id: str
    accel: str  # "an" | "di"
    address: str  # host:port, or "auto" for locally spawned workers
    max_fthreads: int
    max_sthreads: int

    def __post_init__(self):
        if self.accel not in ("an", "di"):
            raise ValidationError(f"board '{self.board_id}': unknown class '{self.accel}'")
        if self.max_fthreads < 1 or self.max_sthreads < 1:
            raise ValidationError(f"board '{self.board_id}': limits must be >= 1")


@dataclass
class HwInfo:
    boards: list[Board]

    def __post_init__(self):
        ids = [b.board_id for b in self.boards]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate board ids in hardware info")

    def by_class(self, accel: str) -> list[Board]:
        return sorted((b for b in self.boards if b.accel == accel), key=lambda b: b.board_id)

    def board(self, board_id: str) -> Board:
        for b in self.boards:
            if b.board_id == board_id:
                return b
        raise KeyError(board_id)

    def to_json(self) -> dict:
        return {
            "boards": [
                {
                    "board_id": b.board_id,
                    "class": b.accel,
                    "address": b.address,
                    "max_fthreads": b.max_fthreads,
                    "max_sthreads": b.max_sthreads,
                }
                for b in self.boards
            ]
        }

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json(), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def from_json(cls, doc: dict) -> "HwInfo":
        try:
            boards = [
                Board(d["board_id"], d["class"], d.get("address", "auto"),
                      int(d["max_fthreads"]), int(d["max_sthreads"]))
                for d in doc["boards"]
            ]
        except (KeyError, TypeError) as e:
            raise ParseError(f"malformed hardware info: {e}") from e
        return cls(boards)

    @classmethod
    def load(cls, path: str) -> "HwInfo":
        try:
            with open(path, "r", encoding="utf-8") as f:
                return cls.from_json(json.load(f))
        except (OSError, json.JSONDecodeError) as e:
            raise ParseError(f"cannot read hardware info '{path}': {e}") from e


@dataclass(frozen=True)
class SLink:
    channel: int
    src_board: str
    src_node: str
    out_index: int
    dst_board: str
    dst_node: str
    dst_slot: int
    tensor: str


@dataclass
class DeploymentPlan:
    assignment: dict[str, str]  # node id -> board id
    fthreads: dict[str, int]  # board id -> assigned node count
    slinks: list[SLink]
    strategy: str = "loadbalance"

    def sthreads(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for l in self.slinks:
            out[l.src_board] = out.get(l.src_board, 0) + 1
            out[l.dst_board] = out.get(l.dst_board, 0) + 1
        return out

    def cut_edges(self) -> int:
        return len(self.slinks)


# ---------------------------------------------------------------------------
# Transitions
# ---------------------------------------------------------------------------


def _transitions(cm: CompiledModel) -> list[tuple[str, int, str, int, str]]:
    """(src_node, out_index, dst_node, dst_slot, tensor) for every node-to-node
    data movement, ordered by consumer then slot."""
    producer: dict[str, tuple[str, int]] = {}
    for cn in cm.nodes:
        for oi, t in enumerate(cn.node.outputs):
            producer[t] = (cn.id, oi)
    out = []
    for cn in sorted(cm.nodes, key=lambda c: c.id):
        for slot, t in enumerate(cn.act_inputs):
            if t in producer:
                src, oi = producer[t]
                out.append((src, oi, cn.id, slot, t))
    return out


def _build_slinks(cm: CompiledModel, assignment: dict[str, str]) -> list[SLink]:
    links = []
    chan = 1
    for src, oi, dst, slot, t in _transitions(cm):
        if assignment[src] != assignment[dst]:
            links.append(SLink(chan, assignment[src], src, oi, assignment[dst], dst, slot, t))
            chan += 1
    return links


def _cut_count(cm_transitions, assignment) -> int:
    return sum(1 for src, _, dst, _, _ in cm_transitions if assignment[src] != assignment[dst])


def _sthread_overflow(cm_transitions, assignment, hw: HwInfo) -> int:
    counts: dict[str, int] = {}
    for src, _, dst, _, _ in cm_transitions:
        a, b = assignment[src], assignment[dst]
        if a != b:
            counts[a] = counts.get(a, 0) + 1
            counts[b] = counts.get(b, 0) + 1
    over = 0
    for bid, c in counts.items():
        over += max(0, c - hw.board(bid).max_sthreads)
    return over


# ---------------------------------------------------------------------------
# Strategies
# ---------------------------------------------------------------------------


def map_nodes(cm: CompiledModel, hw: HwInfo, strategy: str = "loadbalance") -> DeploymentPlan:
    """Assign nodes to boards; deterministic for a given strategy.

    loadbalance: greedy bin-pack by cost descending onto the least-loaded
    compatible board.  mincut: loadbalance seed, then pairwise-swap/move
    hill-climb minimizing (S-thread overflow, inter-board edges).
    roundrobin: topological order striped across compatible boards.
    """
    strategy = strategy.lower()
    if strategy not in STRATEGIES:
        raise ValidationError(f"unknown strategy '{strategy}' (expected one of {STRATEGIES})")

    for accel in ("an", "di"):
        need = sum(1 for cn in cm.nodes if cn.accel == accel)
        have = sum(b.max_fthreads for b in hw.by_class(accel))
        if need > have:
            raise CapacityError(accel, need, have)

    if strategy == "roundrobin":
        assignment = _round_robin(cm, hw)
    else:
        assignment = _load_balance(cm, hw)
        if strategy == "mincut":
            assignment = _mincut_climb(cm, hw, assignment)

    trans = _transitions(cm)
    if _sthread_overflow(trans, assignment, hw) > 0:
        counts: dict[str, int] = {}
        for src, _, dst, _, _ in trans:
            if assignment[src] != assignment[dst]:
                counts[assignment[src]] = counts.get(assignment[src], 0) + 1
                counts[assignment[dst]] = counts.get(assignment[dst], 0) + 1
        bad = sorted(b for b, c in counts.items() if c > hw.board(b).max_sthreads)
        raise ConnectivityError(
            f"boards {bad} exceed their S-thread caps under strategy '{strategy}'"
        )

    fthreads: dict[str, int] = {b.board_id: 0 for b in hw.boards}
    for bid in assignment.values():
        fthreads[bid] += 1
    return DeploymentPlan(assignment, fthreads, _build_slinks(cm, assignment), strategy)


def _load_balance(cm: CompiledModel, hw: HwInfo) -> dict[str, str]:
    assignment: dict[str, str] = {}
    load = {b.board_id: 0.0 for b in hw.boards}
    used = {b.board_id: 0 for b in hw.boards}
    order = sorted(cm.nodes, key=lambda c: (-c.cost_hint_us, c.id))
    for cn in order:
        cands = [b for b in hw.by_class(cn.accel) if used[b.board_id] < b.max_fthreads]
        best = min(cands, key=lambda b: (load[b.board_id], b.board_id))
        assignment[cn.id] = best.board_id
        load[best.board_id] += cn.cost_hint_us
        used[best.board_id] += 1
    return assignment


def _round_robin(cm: CompiledModel, hw: HwInfo) -> dict[str, str]:
    assignment: dict[str, str] = {}
    used = {b.board_id: 0 for b in hw.boards}
    cursor = {"an": 0, "di": 0}
    for cn in cm.nodes:  # already topological
        boards = hw.by_class(cn.accel)
        for probe in range(len(boards)):
            b = boards[(cursor[cn.accel] + probe) % len(boards)]
            if used[b.board_id] < b.max_fthreads:
                assignment[cn.id] = b.board_id
                used[b.board_id] += 1
                cursor[cn.accel] = (cursor[cn.accel] + probe + 1) % len(boards)
                break
    return assignment


def _mincut_climb(cm: CompiledModel, hw: HwInfo, assignment: dict[str, str],
                  max_rounds: int = 400) -> dict[str, str]:
    trans = _transitions(cm)
    assignment = dict(assignment)
    accel_of = {cn.id: cn.accel for cn in cm.nodes}
    used: dict[str, int] = {b.board_id: 0 for b in hw.boards}
    for bid in assignment.values():
        used[bid] += 1

    def score(a) -> tuple[int, int]:
        return (_sthread_overflow(trans, a, hw), _cut_count(trans, a))

    current = score(assignment)
    node_ids = sorted(assignment)
    for _ in range(max_rounds):
        improved = False
        for nid in node_ids:
            src_board = assignment[nid]
            for b in hw.by_class(accel_of[nid]):
                if b.board_id == src_board:
                    continue
                if used[b.board_id] < b.max_fthreads:
                    assignment[nid] = b.board_id
                    cand = score(assignment)
                    if cand < current:
                        used[src_board] -= 1
                        used[b.board_id] += 1
                        current = cand
                        improved = True
                        break
                    assignment[nid] = src_board
            if improved:
                break
        if improved:
            continue
        # pairwise swaps between same-class nodes on different boards
        for i, na in enumerate(node_ids):
            for nb in node_ids[i + 1 :]:
                if accel_of[na] != accel_of[nb] or assignment[na] == assignment[nb]:
                    continue
                assignment[na], assignment[nb] = assignment[nb], assignment[na]
                cand = score(assignment)
                if cand < current:
                    current = cand
                    improved = True
                    break
                assignment[na], assignment[nb] = assignment[nb], assignment[na]
            if improved:
                break
        if not improved:
            break
    return assignment


# ---------------------------------------------------------------------------
# Independent validator
# ---------------------------------------------------------------------------


def validate_plan(plan: DeploymentPlan, cm: CompiledModel, hw: HwInfo) -> None:
    """Re-derive every invariant from scratch; raises ValidationError on breach."""
    boards = {b.board_id: b for b in hw.boards}
    for cn in cm.nodes:
        bid = plan.assignment.get(cn.id)
        if bid is None:
            raise ValidationError(f"node '{cn.id}' is unassigned")
        if bid not in boards:
            raise ValidationError(f"node '{cn.id}' assigned to unknown board '{bid}'")
        if boards[bid].accel != cn.accel:
            raise ValidationError(
                f"node '{cn.id}' ({cn.accel}) assigned to {boards[bid].accel} board '{bid}'"
            )
    counts: dict[str, int] = {}
    for nid, bid in plan.assignment.items():
        counts[bid] = counts.get(bid, 0) + 1
    for bid, c in counts.items():
        if c > boards[bid].max_fthreads:
            raise ValidationError(f"board '{bid}' holds {c} F-threads, cap {boards[bid].max_fthreads}")
        if plan.fthreads.get(bid) != c:
            raise ValidationError(f"board '{bid}': recorded F-thread count disagrees with assignment")

    expected = {
        (src, oi, dst, slot, t)
        for src, oi, dst, slot, t in _transitions(cm)
        if plan.assignment[src] != plan.assignment[dst]
    }
    got = {(l.src_node, l.out_index, l.dst_node, l.dst_slot, l.tensor) for l in plan.slinks}
    if expected != got:
        raise ValidationError(
            f"S-link set mismatch: missing {sorted(expected - got)}, extra {sorted(got - expected)}"
        )
    chans = [l.channel for l in plan.slinks]
    if len(set(chans)) != len(chans):
        raise ValidationError("duplicate S-link channel ids")
    for l in plan.slinks:
        if plan.assignment[l.src_node] != l.src_board or plan.assignment[l.dst_node] != l.dst_board:
            raise ValidationError(f"S-link channel {l.channel} disagrees with the assignment")
    incident: dict[str, int] = {}
    for l in plan.slinks:
        incident[l.src_board] = incident.get(l.src_board, 0) + 1
        incident[l.dst_board] = incident.get(l.dst_board, 0) + 1
    for bid, c in incident.items():
        if c > boards[bid].max_sthreads:
            raise ValidationError(f"board '{bid}' uses {c} S-threads, cap {boards[bid].max_sthreads}")


# ---------------------------------------------------------------------------
# Configuration files
# ---------------------------------------------------------------------------


def emit_configs(plan: DeploymentPlan, cm: CompiledModel, hw: HwInfo, nm: NoiseModel,
                 out_dir: str) -> list[str]:
    """Write topology.dfl plus one board_<id>.cfg / board_<id>.bin per used board.

    Each cfg is self-contained: node parameters, scales, blob references for
    weights/bias, the noise section, and its S-link endpoints.
    """
    os.makedirs(out_dir, exist_ok=True)
    producer: dict[str, tuple[str, int]] = {}
    for cn in cm.nodes:
        for oi, t in enumerate(cn.node.outputs):
            producer[t] = (cn.id, oi)
    out_names = {spec.name for spec, _ in cm.graph_outputs}
    link_by_dst = {(l.dst_node, l.dst_slot): l for l in plan.slinks}

    # fanout per (node, out_index): local deposits, s-links, cda outputs
    fanout: dict[tuple[str, int], list[dict]] = {}
    for src, oi, dst, slot, t in _transitions(cm):
        tgt: dict
        if plan.assignment[src] == plan.assignment[dst]:
            tgt = {"kind": "local", "node": dst, "slot": slot}
        else:
            tgt = {"kind": "slink", "channel": link_by_dst[(dst, slot)].channel}
        fanout.setdefault((src, oi), []).append(tgt)
    for cn in cm.nodes:
        for oi, t in enumerate(cn.node.outputs):
            if t in out_names:
                fanout.setdefault((cn.id, oi), []).append({"kind": "cda", "tensor": t})

    files = []
    used_boards = sorted(set(plan.assignment.values()))
    for bid in used_boards:
        board = hw.board(bid)
        blob = bytearray()

        def _store(arr: np.ndarray) -> dict:
            raw = np.ascontiguousarray(arr).tobytes()
            meta = {"offset": len(blob), "length": len(raw)}
            blob.extend(raw)
            return meta

        node_recs = []
        for cn in cm.nodes:
            if plan.assignment[cn.id] != bid:
                continue
            n = cn.node
            rec = {
                "id": n.id,
                "kind": n.kind.value,
                "attrs": n.attrs,
                "act_inputs": cn.act_inputs,
                "outputs": n.outputs,
                "in_shapes": [list(s) for s in cn.in_shapes],
                "out_shapes": [list(s) for s in cn.out_shapes],
                "quant": {t: float(q.scale) for t, q in sorted((n.quant or {}).items())},
                "cost_hint_us": cn.cost_hint_us,
                "fanout": [fanout.get((cn.id, oi), []) for oi in range(len(n.outputs))],
            }
            if cn.weights2d is not None:
                rec["weights"] = dict(
                    _store(cn.weights2d),
                    rows=cn.weights2d.shape[0],
                    cols=cn.weights2d.shape[1],
                    out_features=cn.out_features,
                    in_features=cn.in_features,
                )
                rec["weight_tensor"] = n.inputs[1]
            if cn.bias is not None:
                rec["bias"] = dict(_store(cn.bias.astype("<i4")), n=len(cn.bias))
            node_recs.append(rec)

        nodes_here = {r["id"] for r in node_recs}
        cfg = {
            "format": "imce-board-config",
            "version": 1,
            "board_id": bid,
            "class": board.accel,
            "noise": nm.to_json(),
            "nodes": node_recs,
            "slinks_in": [
                {
                    "channel": l.channel,
                    "src_board": l.src_board,
                    "dst_node": l.dst_node,
                    "dst_slot": l.dst_slot,
                    "tensor": l.tensor,
                }
                for l in plan.slinks
                if l.dst_board == bid
            ],
            "slinks_out": [
                {"channel": l.channel, "dst_board": l.dst_board, "tensor": l.tensor}
                for l in plan.slinks
                if l.src_board == bid
            ],
            "graph_inputs": [
                {
                    "tensor": spec.name,
                    "shape": list(spec.shape),
                    "scale": float(q.scale),
                    "targets": [
                        {"node": cn.id, "slot": slot}
                        for cn in cm.nodes
                        if cn.id in nodes_here
                        for slot, t in enumerate(cn.act_inputs)
                        if t == spec.name
                    ],
                }
                for spec, q in cm.graph_inputs
            ],
            "graph_outputs": [
                {"tensor": spec.name, "shape": list(spec.shape), "scale": float(q.scale)}
                for spec, q in cm.graph_outputs
                if producer[spec.name][0] in nodes_here
            ],
            "blob": f"board_{bid}.bin",
        }
        cfg["graph_inputs"] = [gi for gi in cfg["graph_inputs"] if gi["targets"]]
        cfg_path = os.path.join(out_dir, f"board_{bid}.cfg")
        with open(cfg_path, "w", encoding="utf-8") as f:
            json.dump(cfg, f, indent=1, sort_keys=True)
            f.write("\n")
        with open(os.path.join(out_dir, f"board_{bid}.bin"), "wb") as f:
            f.write(bytes(blob))
        files.append(cfg_path)

    dfl = {
        "format": "imce-dfl",
        "version": 1,
        "strategy": plan.strategy,
        "boards": [
            {
                "board_id": b.board_id,
                "class": b.accel,
                "address": b.address,
                "fthreads_used": plan.fthreads.get(b.board_id, 0),
                "max_fthreads": b.max_fthreads,
                "max_sthreads": b.max_sthreads,
            }
            for b in sorted(hw.boards, key=lambda b: b.board_id)
        ],
        "assignment": dict(sorted(plan.assignment.items())),
        "slinks": [
            {
                "channel": l.channel,
                "src_board": l.src_board,
                "src_node": l.src_node,
                "out_index": l.out_index,
                "dst_board": l.dst_board,
                "dst_node": l.dst_node,
                "dst_slot": l.dst_slot,
                "tensor": l.tensor,
            }
            for l in plan.slinks
        ],
    }
    dfl_path = os.path.join(out_dir, "topology.dfl")
    with open(dfl_path, "w", encoding="utf-8") as f:
        json.dump(dfl, f, indent=1, sort_keys=True)
        f.write("\n")
    files.append(dfl_path)
    return files


def load_plan(out_dir: str) -> DeploymentPlan:
    """Reconstruct the DeploymentPlan from an emitted topology.dfl."""
    path = os.path.join(out_dir, "topology.dfl")
    try:
        with open(path, "r", encoding="utf-8") as f:
            dfl = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ParseError(f"cannot read '{path}': {e}") from e
    if dfl.get("format") != "imce-dfl":
        raise ParseError(f"'{path}' is not a connectivity description")
    assignment = dict(dfl["assignment"])
    fthreads: dict[str, int] = {}
    for bid in assignment.values():
        fthreads[bid] = fthreads.get(bid, 0) + 1
    for b in dfl["boards"]:
        fthreads.setdefault(b["board_id"], 0)
    slinks = [
        SLink(
            d["channel"], d["src_board"], d["src_node"], d["out_index"],
            d["dst_board"], d["dst_node"], d["dst_slot"], d["tensor"]
        )
        for d in dfl["slinks"]
    ]
    return DeploymentPlan(assignment, fthreads, slinks, dfl.get("strategy", "loadbalance"))
