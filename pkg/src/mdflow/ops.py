"""Built-in opcodes for programs, experiments and tests.

The synthetic compute cost (grain) of f/g/h/work is charged by the worker
as sleep, so one desk-scale machine can reproduce grain/efficiency
behavior; the functions themselves stay deterministic so the sequential
oracle can check every run.
"""
from __future__ import annotations

from .core import OpcodeRegistry


def default_registry(grain_ms: float = 0.0) -> OpcodeRegistry:
    reg = OpcodeRegistry()
    reg.register("identity", lambda x: x)
    reg.register("echo", lambda x: x)
    reg.register("inc", lambda x: x + 1)
    reg.register("double", lambda x: x * 2)
    reg.register("sq", lambda x: x * x)
    # synthetic stream opcodes carrying the experiment grain
    reg.register("f", lambda x: x + 1, cost_ms=grain_ms)
    reg.register("g", lambda x: x * 2, cost_ms=grain_ms)
    reg.register("h", lambda x: x * x, cost_ms=grain_ms)
    reg.register("work", lambda x: x, cost_ms=grain_ms)
    # small fixed-degree map/workflow helpers
    reg.register("split2", lambda x: (x, x + 1), out_arity=2)
    reg.register("split3", lambda x: (x, x + 1, x + 2), out_arity=3)
    reg.register("merge2", lambda a, b: [a, b], in_arity=2)
    reg.register("merge3", lambda a, b, c: [a, b, c], in_arity=3)
    reg.register("add2", lambda a, b: a + b, in_arity=2)
    return reg
