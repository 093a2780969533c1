"""Generic MCMC driver: burn-in, thinning, traces."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable


def is_retained(i: int, burnin: int, thin: int) -> bool:
    """Sweep i (0-based) is kept when past burn-in and on the thinning grid."""
    return i >= burnin and (i - burnin) % thin == 0


def check_schedule(iters: int, burnin: int, thin: int) -> None:
    if iters < 1:
        raise ValueError("iters must be positive")
    if not 0 <= burnin < iters:
        raise ValueError("burn-in must be nonnegative and smaller than iters")
    if thin < 1:
        raise ValueError("thin must be at least 1")


def n_retained(iters: int, burnin: int, thin: int) -> int:
    return len(range(burnin, iters, thin))


@dataclass
class ChainResult:
    samples: list = field(default_factory=list)
    trace: list = field(default_factory=list)
    final: object = None


def run_chain(
    state,
    sweep: Callable,
    iters: int,
    burnin: int = 0,
    thin: int = 1,
    trace_row: Callable | None = None,
    on_sweep: Callable | None = None,
) -> ChainResult:
    """Run ``iters`` sweeps of ``sweep(state) -> state``.

    ``trace_row(i, state)`` builds one trace entry per sweep and
    ``on_sweep(i, state, retained)`` is called after every sweep (used for
    streaming output).
    """
    check_schedule(iters, burnin, thin)
    result = ChainResult()
    for i in range(iters):
        state = sweep(state)
        keep = is_retained(i, burnin, thin)
        if trace_row is not None:
            result.trace.append(trace_row(i, state))
        if keep:
            result.samples.append(state)
        if on_sweep is not None:
            on_sweep(i, state, keep)
    result.final = state
    return result
