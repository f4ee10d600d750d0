"""Shrinking a failing run: find the smallest prefix of injected chaos
events that still reproduces a violation.

Only generated (chaos) events shrink — scripted `at` events are part of
the scenario's intent.  The search first bisects on prefix length, then
tries dropping each remaining event once.  Every candidate is a full
deterministic re-run, so the result is directly replayable.
"""

from __future__ import annotations

from .scenario import Scenario
from .world import run_world

Event = tuple[int, str, tuple]


def _fails(sc: Scenario, seed: str, events: list[Event]) -> bool:
    return not run_world(sc, seed, injected=events).passed


def shrink(sc: Scenario, seed: str,
           events: list[Event]) -> list[Event]:
    """Returns a minimal-ish event list that still fails; `events` must
    already produce a failing run."""
    lo, hi = 0, len(events)
    # smallest n with events[:n] failing (failure is usually prefix-
    # monotone for injected faults; bisection is a heuristic here)
    while lo < hi:
        mid = (lo + hi) // 2
        if _fails(sc, seed, events[:mid]):
            hi = mid
        else:
            lo = mid + 1
    best = events[:hi]
    # one greedy pass removing single events
    i = 0
    while i < len(best):
        candidate = best[:i] + best[i + 1:]
        if _fails(sc, seed, candidate):
            best = candidate
        else:
            i += 1
    return best
