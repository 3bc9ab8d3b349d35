"""Shared test helpers: registries, random skeleton trees, small runtimes."""
from __future__ import annotations

import random

import pytest

from mdflow import Farm, Pipe, Seq, Skeleton, default_registry

#: pure unary opcodes safe for randomized equivalence tests (no squaring:
#: composing k squarings yields x**(2**k), which blows up at depth 6)
PURE_OPS = ["f", "g", "inc", "double", "identity"]


@pytest.fixture
def registry():
    return default_registry()


def random_skeleton(rng: random.Random, max_depth: int = 6) -> Skeleton:
    """A random Custom-free skeleton tree of bounded depth."""
    if max_depth <= 0 or rng.random() < 0.3:
        return Seq(rng.choice(PURE_OPS))
    if rng.random() < 0.5:
        return Pipe(random_skeleton(rng, max_depth - 1),
                    random_skeleton(rng, max_depth - 1))
    return Farm(random_skeleton(rng, max_depth - 1))
