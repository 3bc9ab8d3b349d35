"""The instruction repository and matching unit.

One graph instance is created per submitted stream item.  The pool routes
result tokens to waiting instructions, keeps a FIFO queue of fireable
instructions for the worker control loops, and emits external outputs as
ResultRecords.  Execution is at-least-once (a requeued instruction may run
twice) but emission is exactly-once: completions are deduplicated by
(gid, instruction id) marks kept until graph retirement.
"""
from __future__ import annotations

import threading
import time
from collections import deque
from dataclasses import dataclass
from typing import Any, Callable, Optional

from . import codec
from .core import (
    MdfError,
    MdfGraph,
    MdfInstruction,
    instantiate,
    is_fireable,
    store_token,
    Dest,
)


class PoolClosed(MdfError):
    pass


class UnknownGraph(MdfError):
    pass


class NotInFlight(MdfError):
    pass


@dataclass
class ResultRecord:
    """One emitted result: seq is the submission sequence number."""

    seq: int
    gid: int
    value: Optional[bytes]
    dispatch_ts: float
    complete_ts: float
    error: Optional[str] = None


class TaskPool:
    """Shared, internally synchronized repository of live graphs.

    Many producers (submitters, token deliverers) and many consumers
    (worker control loops) operate concurrently; token storage, the
    fireability check and enqueueing are atomic per instruction.
    """

    def __init__(self, throughput_window_s: float = 10.0) -> None:
        self._cond = threading.Condition()
        self._graphs: dict[int, MdfGraph] = {}
        self._queue: deque[tuple[int, int]] = deque()
        self._queued: set[tuple[int, int]] = set()
        self._inflight: set[tuple[int, int]] = set()
        self._done: set[tuple[int, int]] = set()
        self._next_gid = 1
        self._seq_by_gid: dict[int, int] = {}
        self._submit_ts: dict[int, float] = {}
        self._dispatch_ts: dict[tuple[int, int], float] = {}
        self._submitted = 0
        self._emitted = 0
        self._closed = False
        self._paused = False
        self._sinks: list[Callable[[ResultRecord], None]] = []
        self.results: list[ResultRecord] = []
        self.window_s = throughput_window_s
        self._emit_ts: deque[float] = deque()
        #: dispatch timestamps, for protocol-conformance assertions
        self.dispatch_log: list[float] = []
        #: per-instruction execution records (opcode, dispatch, complete)
        self.execution_log: list[dict] = []

    # -- submission ---------------------------------------------------------

    def add_sink(self, sink: Callable[[ResultRecord], None]) -> None:
        with self._cond:
            self._sinks.append(sink)

    def submit_task(self, template: MdfGraph, payload: bytes) -> int:
        """Instantiate the template with a fresh gid; the task appears as the
        input token of the graph's input instruction."""
        with self._cond:
            if self._closed:
                raise PoolClosed("pool closed")
            gid = self._next_gid
            self._next_gid += 1
            graph = instantiate(template, gid)
            instr = graph.instructions[graph.input_id]
            store_token(instr, 1, payload)
            self._register(gid, graph)
            self._maybe_enqueue(gid, instr)
            return gid

    def submit_call(self, opcode: str, payloads: list[bytes],
                    dests: Optional[list[Dest]] = None) -> int:
        """Submit an already-fireable single-instruction graph (the workflow
        matching unit path)."""
        from .core import make_instruction, OUT

        with self._cond:
            if self._closed:
                raise PoolClosed("pool closed")
            gid = self._next_gid
            self._next_gid += 1
            instr = make_instruction(1, gid, opcode, len(payloads), dests or [OUT])
            for slot, p in enumerate(payloads, start=1):
                store_token(instr, slot, p)
            graph = MdfGraph({1: instr}, 1, gid=gid)
            self._register(gid, graph)
            self._maybe_enqueue(gid, instr)
            return gid

    def _register(self, gid: int, graph: MdfGraph) -> None:
        self._graphs[gid] = graph
        self._seq_by_gid[gid] = self._submitted
        self._submit_ts[gid] = time.time()
        self._submitted += 1

    def _maybe_enqueue(self, gid: int, instr: MdfInstruction) -> None:
        key = (gid, instr.id)
        if (is_fireable(instr) and key not in self._queued
                and key not in self._inflight and key not in self._done):
            self._queue.append(key)
            self._queued.add(key)
            self._cond.notify()

    def close(self) -> None:
        with self._cond:
            self._closed = True

    # -- token routing ------------------------------------------------------

    def deliver_token(self, gid: int, dest: Dest, value: Optional[bytes],
                      producer: Optional[int] = None, error: Optional[str] = None) -> None:
        """Route one token: external Dest emits a ResultRecord and retires the
        graph; an internal Dest stores the token and may make its target
        fireable.  `producer` is the instruction that computed the value (used
        for dispatch timing on emission)."""
        with self._cond:
            self._deliver(gid, dest, value, producer, error)

    def _deliver(self, gid: int, dest: Dest, value: Optional[bytes],
                 producer: Optional[int], error: Optional[str] = None) -> None:
        if gid not in self._graphs:
            raise UnknownGraph(f"graph {gid} is not live")
        if dest.is_external:
            self._retire(gid, value, producer, error)
            return
        graph = self._graphs[gid]
        if dest.instr_id not in graph.instructions:
            raise UnknownGraph(f"graph {gid} has no instruction {dest.instr_id}")
        instr = graph.instructions[dest.instr_id]
        store_token(instr, dest.slot, value)
        self._maybe_enqueue(gid, instr)

    def _retire(self, gid: int, value: Optional[bytes], producer: Optional[int],
                error: Optional[str] = None) -> None:
        now = time.time()
        dispatch = self._dispatch_ts.get((gid, producer), now) if producer else now
        record = ResultRecord(self._seq_by_gid[gid], gid, value, dispatch, now, error)
        del self._graphs[gid]
        del self._seq_by_gid[gid]
        self._submit_ts.pop(gid, None)
        self._done = {k for k in self._done if k[0] != gid}
        self._dispatch_ts = {k: v for k, v in self._dispatch_ts.items() if k[0] != gid}
        self._emitted += 1
        self._emit_ts.append(now)
        self.results.append(record)
        for sink in self._sinks:
            sink(record)
        self._cond.notify_all()

    def complete(self, gid: int, iid: int, outputs: list[bytes]) -> bool:
        """Record a finished execution and deliver its outputs atomically.

        Returns False (and delivers nothing) for duplicates: a second
        completion of a requeued instruction, or a completion arriving after
        the graph retired."""
        with self._cond:
            key = (gid, iid)
            if gid not in self._graphs or key in self._done:
                self._inflight.discard(key)
                return False
            self._done.add(key)
            self._inflight.discard(key)
            instr = self._graphs[gid].instructions[iid]
            dests = instr.dests
            if len(outputs) != len(dests):
                if len(dests) == 1:
                    # multi-output opcode behind a single destination: the
                    # token carries the whole output vector
                    outputs = [codec.encode([codec.decode(o) for o in outputs])]
                else:
                    raise MdfError(
                        f"instruction {iid}: {len(outputs)} outputs for {len(dests)} dests")
            now = time.time()
            self.execution_log.append({
                "gid": gid, "iid": iid, "opcode": instr.opcode,
                "dispatched": self._dispatch_ts.get(key, now), "completed": now,
            })
            for dest, value in zip(dests, outputs):
                self._deliver(gid, dest, value, producer=iid)
            return True

    def fail_graph(self, gid: int, message: str) -> None:
        """Retire a graph with a failure record (deterministic opcode fault)."""
        with self._cond:
            if gid not in self._graphs:
                return
            for key in list(self._queued):
                if key[0] == gid:
                    self._queue.remove(key)
                    self._queued.discard(key)
            self._inflight = {k for k in self._inflight if k[0] != gid}
            self._retire(gid, None, None, error=message)

    # -- worker-facing ------------------------------------------------------

    def fetch_fireable(self, timeout: float) -> Optional[tuple[int, MdfInstruction]]:
        """Oldest enqueued fireable instruction, marked in-flight; None after
        the timeout with an empty (or paused) queue."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while True:
                if not self._paused and self._queue:
                    key = self._queue.popleft()
                    self._queued.discard(key)
                    self._inflight.add(key)
                    now = time.time()
                    self.dispatch_log.append(now)
                    self._dispatch_ts[key] = now
                    gid, iid = key
                    return gid, self._graphs[gid].instructions[iid].snapshot()
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return None
                self._cond.wait(remaining)

    def requeue(self, gid: int, iid: int) -> None:
        """Return an in-flight instruction to the queue head (retry priority)."""
        with self._cond:
            key = (gid, iid)
            if key not in self._inflight:
                raise NotInFlight(f"instruction {key} is not in flight")
            self._inflight.discard(key)
            if gid in self._graphs and key not in self._done:
                self._queue.appendleft(key)
                self._queued.add(key)
                self._cond.notify()

    def pause_dispatch(self) -> float:
        """Stop handing out fireable instructions; returns the pause timestamp."""
        with self._cond:
            self._paused = True
            return time.time()

    def resume_dispatch(self) -> float:
        with self._cond:
            self._paused = False
            self._cond.notify_all()
            return time.time()

    # -- introspection ------------------------------------------------------

    def pending_count(self) -> int:
        with self._cond:
            return len(self._graphs)

    def wait_quiescent(self, timeout: float) -> bool:
        """Block until all submitted tasks have been emitted."""
        deadline = time.monotonic() + timeout
        with self._cond:
            while self._graphs:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    return False
                self._cond.wait(min(remaining, 0.25))
            return True

    def throughput(self, window_s: Optional[float] = None) -> float:
        """Emissions per second over the trailing window."""
        w = window_s if window_s is not None else self.window_s
        cutoff = time.time() - w
        with self._cond:
            while self._emit_ts and self._emit_ts[0] < cutoff:
                self._emit_ts.popleft()
            return len(self._emit_ts) / w

    def metrics(self) -> dict[str, Any]:
        with self._cond:
            return {
                "submitted": self._submitted,
                "emitted": self._emitted,
                "in_flight": len(self._inflight),
                "fireable": len(self._queue),
                "live_graphs": len(self._graphs),
                "throughput_window": self.window_s,
            }
