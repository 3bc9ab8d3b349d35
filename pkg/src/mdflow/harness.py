"""Experiment drivers: full runs, grain/efficiency sweeps, adaptation
scenarios, fault injection, and the sequential oracle entry point.

Grain is realized as sleep inside synthetic opcodes; the injected
communication delay occupies a shared link exclusively per dispatch, which
is what makes fine-grain programs stop scaling as workers are added.
Overload multiplies a worker's execution time deterministically instead of
competing for the CPU, so scripted scenarios reproduce exactly.
"""
from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence, Union

from . import codec
from .compiler import Skeleton, compile_skeleton, normalize, parse_skeleton
from .core import MdfGraph, OpcodeRegistry
from .manager import Contract, EventLog, Manager, Throughput, parse_contract
from .ops import default_registry
from .oracle import eval_skeleton, eval_workflow
from .runtime import Runtime, WorkerSpec
from .taskpool import TaskPool
from .workflow import WorkflowEngine, load_workflow

EXIT_OK = 0
EXIT_ESCALATED = 2
EXIT_INFRA = 3


@dataclass
class ExperimentConfig:
    program: str = "farm(seq:work)"
    tasks: int = 100
    grain_ms: float = 0.0
    comm_delay_ms: float = 0.0
    workers: Sequence[WorkerSpec] = ("local",)
    contract: Optional[Contract] = None
    normalize: bool = False
    #: (time_s, worker index) pairs: simulated worker deaths
    fault_script: Sequence[tuple[float, int]] = ()
    #: (time_s, worker index, slowdown factor) triples
    overload_script: Sequence[tuple[float, int, float]] = ()
    #: manager recruitment reserve, beyond the initial workers
    spare_workers: Sequence[WorkerSpec] = ()
    window_s: float = 10.0
    tick_s: float = 1.0
    #: delay before the contract is armed, letting the trailing throughput
    #: window fill so the first ticks do not read an artificially low rate
    contract_delay_s: float = 0.0
    run_duration_s: Optional[float] = None  # stop feeding/draining after this
    drain_timeout_s: float = 600.0


@dataclass
class RunReport:
    completion_ms: float
    tasks: int
    emitted: int
    failures: int
    workers: int
    efficiency: Optional[float]
    latencies_ms: list[float]
    throughput_series: list[tuple[int, int]]  # (second bucket, emissions)
    results: dict[int, Any]  # seq -> decoded value
    events: list[dict] = field(default_factory=list)
    escalated: bool = False
    exit_code: int = EXIT_OK

    def to_json(self) -> str:
        doc = {
            "completion_ms": self.completion_ms,
            "tasks": self.tasks,
            "emitted": self.emitted,
            "failures": self.failures,
            "workers": self.workers,
            "efficiency": self.efficiency,
            "latency_ms_p50": _median(self.latencies_ms),
            "throughput_series": self.throughput_series,
            "escalated": self.escalated,
            "exit_code": self.exit_code,
            "events": self.events,
        }
        return json.dumps(doc, indent=2)


def _median(xs: Sequence[float]) -> Optional[float]:
    if not xs:
        return None
    s = sorted(xs)
    return s[len(s) // 2]


def template_cost_ms(template: MdfGraph, registry: OpcodeRegistry) -> float:
    """Ideal sequential compute per task: the sum of synthetic opcode costs."""
    return sum(registry.resolve(i.opcode).cost_ms for i in template.instructions.values())


def run_experiment(config: ExperimentConfig,
                   registry: Optional[OpcodeRegistry] = None,
                   inputs: Optional[Sequence[Any]] = None) -> RunReport:
    """Full pipeline: compile -> recruit -> submit stream -> drain -> report."""
    registry = registry or default_registry(config.grain_ms)
    skeleton = parse_skeleton(config.program)
    if config.normalize:
        skeleton = normalize(skeleton)
    template = compile_skeleton(skeleton)
    opcodes = sorted({i.opcode for i in template.instructions.values()})

    pool = TaskPool(throughput_window_s=config.window_s)
    runtime = Runtime(pool, registry, comm_delay_ms=config.comm_delay_ms,
                      required_opcodes=opcodes)
    events = EventLog()
    descriptors = [runtime.recruit(spec) for spec in config.workers]
    runtime.start()

    manager: Optional[Manager] = None
    if config.contract is not None:
        manager = Manager(runtime, pool, recruit_specs=list(config.spare_workers),
                          tick_s=config.tick_s, window_s=config.window_s,
                          event_log=events)
        manager.set_contract(config.contract)
        manager.start()

    timers: list[threading.Timer] = []
    for at_s, widx in config.fault_script:
        timers.append(threading.Timer(
            at_s, lambda i=widx: runtime.kill_worker(descriptors[i])))
    for at_s, widx, factor in config.overload_script:
        def apply(i=widx, f=factor):
            descriptors[i].slowdown = f
            events.append("overload", {"worker": descriptors[i].wid, "factor": f})
        timers.append(threading.Timer(at_s, apply))
    for t in timers:
        t.daemon = True
        t.start()

    if inputs is None:
        inputs = list(range(config.tasks))
    t_start = time.time()
    for task in inputs:
        pool.submit_task(template, codec.encode(task))

    if config.run_duration_s is not None:
        time.sleep(config.run_duration_s)
    else:
        pool.wait_quiescent(config.drain_timeout_s)
    t_end = time.time()

    if manager is not None:
        manager.stop()
    for t in timers:
        t.cancel()
    pool.close()
    runtime.shutdown()

    completion_ms = (t_end - t_start) * 1000.0
    records = list(pool.results)
    failures = sum(1 for r in records if r.error is not None)
    results = {r.seq: codec.decode(r.value) for r in records if r.error is None}
    latencies = [(r.complete_ts - r.dispatch_ts) * 1000.0 for r in records]
    series: dict[int, int] = {}
    for r in records:
        bucket = int(r.complete_ts - t_start)
        series[bucket] = series.get(bucket, 0) + 1
    cost = template_cost_ms(template, registry)
    w = len(descriptors)
    efficiency = None
    if cost > 0 and completion_ms > 0 and w > 0 and len(records) == len(inputs):
        efficiency = (len(inputs) * cost) / (w * completion_ms)
    escalated = bool(manager.escalations) if manager is not None else False
    exit_code = EXIT_ESCALATED if escalated else EXIT_OK
    if config.run_duration_s is None and len(records) < len(inputs):
        exit_code = EXIT_INFRA
    return RunReport(
        completion_ms=completion_ms,
        tasks=len(inputs),
        emitted=len(records),
        failures=failures,
        workers=w,
        efficiency=efficiency,
        latencies_ms=latencies,
        throughput_series=sorted(series.items()),
        results=results,
        events=events.entries(),
        escalated=escalated,
        exit_code=exit_code,
    )


def bench_grain(grains_ms: Sequence[float], worker_counts: Sequence[int],
                tasks: int = 1000, comm_delay_ms: float = 1.0) -> list[dict]:
    """Cross-product grain x workers sweep; rows carry measured efficiency."""
    rows = []
    for grain in grains_ms:
        for w in worker_counts:
            config = ExperimentConfig(
                program="farm(seq:work)", tasks=tasks, grain_ms=grain,
                comm_delay_ms=comm_delay_ms, workers=["local"] * w)
            report = run_experiment(config)
            rows.append({"grain": grain, "workers": w,
                         "efficiency": report.efficiency,
                         "completion_ms": report.completion_ms})
    return rows


def grain_csv(rows: list[dict], noise_epsilon: float = 0.03) -> str:
    lines = ["grain,workers,efficiency"]
    for row in rows:
        lines.append(f"{row['grain']},{row['workers']},{row['efficiency']:.4f}")
    for grain in sorted({r["grain"] for r in rows}):
        series = [r["efficiency"] for r in sorted(
            (r for r in rows if r["grain"] == grain), key=lambda r: r["workers"])]
        monotone = all(b <= a + noise_epsilon for a, b in zip(series, series[1:]))
        lines.append(f"# monotone_nonincreasing grain={grain}: {monotone}")
    return "\n".join(lines) + "\n"


@dataclass
class AdaptReport:
    throughput_series: list[tuple[float, float]]
    worker_series: list[tuple[float, int]]
    reconfigurations: list[dict]
    escalations: list[dict]
    events: list[dict]
    emitted: int


def bench_adapt(config: ExperimentConfig,
                registry: Optional[OpcodeRegistry] = None) -> AdaptReport:
    """Self-optimization scenario: long stream, scripted overload, a
    throughput contract, and the manager free to add workers."""
    if not isinstance(config.contract, Throughput):
        raise ValueError("bench_adapt needs a Throughput contract")
    registry = registry or default_registry(config.grain_ms)
    template = compile_skeleton(parse_skeleton(config.program))
    opcodes = sorted({i.opcode for i in template.instructions.values()})
    pool = TaskPool(throughput_window_s=config.window_s)
    runtime = Runtime(pool, registry, comm_delay_ms=config.comm_delay_ms,
                      required_opcodes=opcodes)
    events = EventLog()
    descriptors = [runtime.recruit(spec) for spec in config.workers]
    runtime.start()
    manager = Manager(runtime, pool, recruit_specs=list(config.spare_workers),
                      tick_s=config.tick_s, window_s=config.window_s,
                      event_log=events)
    if config.contract_delay_s <= 0:
        manager.set_contract(config.contract)
    manager.start()

    for task in range(config.tasks):
        pool.submit_task(template, codec.encode(task))

    duration = config.run_duration_s or 120.0
    t0 = time.time()
    script = sorted(config.overload_script)
    throughput_series: list[tuple[float, float]] = []
    worker_series: list[tuple[float, int]] = []
    next_overload = 0
    contract_armed = config.contract_delay_s <= 0
    while time.time() - t0 < duration:
        now = time.time() - t0
        if not contract_armed and now >= config.contract_delay_s:
            manager.set_contract(config.contract)
            contract_armed = True
        while next_overload < len(script) and script[next_overload][0] <= now:
            _, widx, factor = script[next_overload]
            descriptors[widx].slowdown = factor
            events.append("overload", {"worker": descriptors[widx].wid, "factor": factor})
            next_overload += 1
        throughput_series.append((now, pool.throughput(config.window_s)))
        worker_series.append((now, runtime.active_count()))
        time.sleep(0.5)

    manager.stop()
    pool.close()
    runtime.shutdown()
    return AdaptReport(
        throughput_series=throughput_series,
        worker_series=worker_series,
        reconfigurations=events.entries("add_worker") + events.entries("remove_worker"),
        escalations=events.entries("escalation"),
        events=events.entries(),
        emitted=pool.metrics()["emitted"],
    )


def run_oracle(program: str, inputs: Sequence[Any],
               registry: Optional[OpcodeRegistry] = None) -> dict[int, Any]:
    """Sequential evaluation with no pool/runtime involvement, keyed by seq."""
    registry = registry or default_registry()
    if program.startswith("wf:@"):
        with open(program[4:], "r", encoding="utf-8") as fh:
            nodes = json.load(fh)
        return {i: eval_workflow(nodes, task, registry) for i, task in enumerate(inputs)}
    skeleton = parse_skeleton(program)
    return {i: eval_skeleton(skeleton, task, registry) for i, task in enumerate(inputs)}


def parse_workers(spec: str) -> list[WorkerSpec]:
    """Parse "local:8" or a comma list of local / host:port entries."""
    specs: list[WorkerSpec] = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            continue
        if part == "local":
            specs.append("local")
        elif part.startswith("local:"):
            specs.extend(["local"] * int(part.split(":")[1]))
        else:
            host, port = part.rsplit(":", 1)
            specs.append((host, int(port)))
    return specs


def parse_config_file(path: str) -> list[tuple[str, str]]:
    """TOML-style key = value lines; keys may repeat (script entries)."""
    pairs = []
    with open(path, "r", encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            pairs.append((key.strip(), value.strip()))
    return pairs


def parse_fault_script(pairs: list[tuple[str, str]]) -> list[tuple[float, int]]:
    """Entries `kill = <time_s>:<worker index>`."""
    script = []
    for key, value in pairs:
        if key == "kill":
            at, widx = value.split(":")
            script.append((float(at), int(widx)))
    return script


def parse_overload_script(pairs: list[tuple[str, str]]) -> list[tuple[float, int, float]]:
    """Entries `overload = <time_s>:<worker index>:<factor>`."""
    script = []
    for key, value in pairs:
        if key == "overload":
            at, widx, factor = value.split(":")
            script.append((float(at), int(widx), float(factor)))
    return script
