"""Built-in linear benchmark problems with closed-form flows."""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy.linalg import expm

from .dsl import SafetyProblem, parse_problem


@dataclass(frozen=True)
class Benchmark:
    name: str
    text: str
    A: tuple  # system matrix of the linear field, row-major
    safe: bool
    barrier: str | None = None

    @cached_property
    def problem(self) -> SafetyProblem:
        return parse_problem(self.text, name=self.name)

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.A, dtype=float)

    def flow(self, x, t: float) -> np.ndarray:
        """Closed-form ``exp(A t) x``; ``x`` may be a batch of rows."""
        x = np.asarray(x, dtype=float)
        return x @ expm(self.matrix * t).T


LIN1D_STABLE = Benchmark(
    name="lin1d-stable",
    text="""\
# scalar contraction toward the origin
dim = 1
field = ["-x1"]
domain = [[-2.2, 2.2]]
init = "x1^2 <= 0.25"
unsafe = "x1^2 >= 4"
""",
    A=((-1.0,),),
    safe=True,
    barrier="1 - x1^2",
)

LIN1D_UNSTABLE = Benchmark(
    name="lin1d-unstable",
    text="""\
# scalar expansion away from the origin
dim = 1
field = ["x1"]
domain = [[-2.2, 2.2]]
init = "x1^2 <= 0.25"
unsafe = "x1^2 >= 4"
""",
    A=((1.0,),),
    safe=False,
)

SPIRAL2D = Benchmark(
    name="spiral2d",
    text="""\
# stable focus with eigenvalues -0.5 +- i
dim = 2
field = ["-x2 - 0.5*x1", "x1 - 0.5*x2"]
domain = [[-3.3, 3.3], [-3.3, 3.3]]
init = "(x1 - 1)^2 + x2^2 <= 0.04"
unsafe = "x1^2 + x2^2 >= 9"
""",
    A=((-0.5, -1.0), (1.0, -0.5)),
    safe=True,
)

_ALL = (LIN1D_STABLE, LIN1D_UNSTABLE, SPIRAL2D)


def list_benchmarks() -> tuple[Benchmark, ...]:
    return _ALL


def get_benchmark(name: str) -> Benchmark:
    for b in _ALL:
        if b.name == name:
            return b
    known = ", ".join(b.name for b in _ALL)
    raise KeyError(f"unknown benchmark {name!r} (known: {known})")
