"""Per-worker statistics sink and report aggregation.

Each worker keeps one StatsSink (the software stand-in for the per-PU
hidden-memory region on the analytics server).  Counters are updated from
F-thread and S-thread contexts, so all mutation goes through one lock.
If IMCE_STATS_DIR is set, the sink spills its snapshot there on shutdown.
"""
from __future__ import annotations

import json
import os
import threading
import time

STATS_DIR_ENV = "IMCE_STATS_DIR"


class StatsSink:
    def __init__(self, board_id: str = ""):
        self.board_id = board_id
        self._lock = threading.Lock()
        self._nodes: dict[str, dict] = {}
        self._channels: dict[int, dict] = {}
        self._started = time.time()

    def _node(self, node_id: str) -> dict:
        return self._nodes.setdefault(
            node_id,
            {"invocations": 0, "kernel_us": 0.0, "bytes_in": 0, "bytes_out": 0, "max_queue": 0},
        )

    def _chan(self, channel: int) -> dict:
        return self._channels.setdefault(
            channel,
            {"msgs_sent": 0, "msgs_received": 0, "wire_bytes_sent": 0,
             "wire_bytes_received": 0, "data_bytes_sent": 0, "data_bytes_received": 0},
        )

    def node_fired(self, node_id: str, kernel_us: float, bytes_in: int, bytes_out: int) -> None:
        with self._lock:
            rec = self._node(node_id)
            rec["invocations"] += 1
            rec["kernel_us"] += kernel_us
            rec["bytes_in"] += bytes_in
            rec["bytes_out"] += bytes_out

    def queue_depth(self, node_id: str, depth: int) -> None:
        with self._lock:
            rec = self._node(node_id)
            rec["max_queue"] = max(rec["max_queue"], depth)

    def sent(self, channel: int, wire_bytes: int, data_bytes: int) -> None:
        with self._lock:
            rec = self._chan(channel)
            rec["msgs_sent"] += 1
            rec["wire_bytes_sent"] += wire_bytes
            rec["data_bytes_sent"] += data_bytes

    def received(self, channel: int, wire_bytes: int, data_bytes: int) -> None:
        with self._lock:
            rec = self._chan(channel)
            rec["msgs_received"] += 1
            rec["wire_bytes_received"] += wire_bytes
            rec["data_bytes_received"] += data_bytes

    def snapshot(self) -> dict:
        with self._lock:
            return {
                "board_id": self.board_id,
                "uptime_s": round(time.time() - self._started, 3),
                "nodes": {k: dict(v) for k, v in sorted(self._nodes.items())},
                "channels": {str(k): dict(v) for k, v in sorted(self._channels.items())},
            }

    def spill(self) -> str | None:
        """Write the snapshot into IMCE_STATS_DIR, if configured."""
        d = os.environ.get(STATS_DIR_ENV)
        if not d:
            return None
        os.makedirs(d, exist_ok=True)
        path = os.path.join(d, f"stats_{self.board_id or 'board'}.json")
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.snapshot(), f, indent=1, sort_keys=True)
            f.write("\n")
        return path


def merge_reports(per_board: dict[str, dict], missing: list[str] | None = None) -> dict:
    """Cluster-level stats report; missing boards are flagged, not fatal."""
    return {
        "boards": {k: per_board[k] for k in sorted(per_board)},
        "missing_boards": sorted(missing or []),
        "totals": {
            "invocations": sum(
                n["invocations"] for b in per_board.values() for n in b.get("nodes", {}).values()
            ),
            "kernel_us": round(
                sum(n["kernel_us"] for b in per_board.values() for n in b.get("nodes", {}).values()), 3
            ),
        },
    }
