"""Extended finite-state monitors for the ten complex events, and the online labeler.

Each monitor is a small eFSM: a control location plus a few bounded tick
counters. Thresholds are declared in seconds (or plain counts) and turned
into window ticks with :func:`cedkit.core.ticks`; every counter is clamped
at ``threshold_ticks + 1`` so the reachable configuration space is finite.

Transitions are pure: ``step(state, x, t)`` returns a new state and an
output. ``t`` (0-based window index) is used only to record anchors, never
to decide a transition. Counters whose value can no longer influence the
output before being overwritten are normalised to 0, which keeps the
flattened automata small without changing any firing.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import ClassVar, Iterable, NamedTuple, Sequence

from .core import (
    CE_IDS,
    CE_NAMES,
    DEFAULT_WINDOW,
    AtomicEvent,
    CedError,
    Completion,
    ConceptTrace,
    LabeledTrace,
    WindowSpec,
    ticks,
)

A = AtomicEvent
WORK = frozenset({A.CLICK_MOUSE, A.TYPE})
MEAL = frozenset({A.EAT, A.DRINK})
# "touching things" in the eating-hygiene monitor: hands must be washed again
TOUCH = frozenset({A.BRUSH_TEETH, A.CLICK_MOUSE, A.FLUSH_TOILET, A.TYPE})


class SimultaneousCompletion(CedError):
    def __init__(self, window: int, fired: Iterable[int]):
        self.window = window
        self.fired = frozenset(fired)
        super().__init__(f"complex events {sorted(self.fired)} complete together at window {window}")


class MonitorState(NamedTuple):
    ce_id: int
    location: str
    counters: tuple[int, ...]
    anchor: int | None = None

    @property
    def key(self) -> tuple[str, tuple[int, ...]]:
        """Behavioural part of the state (the anchor is bookkeeping only)."""
        return self.location, self.counters


class MonitorOutput(NamedTuple):
    fired: bool
    ce_id: int
    anchor: int | None = None


@dataclass(frozen=True)
class Counter:
    name: str
    threshold: int
    unit: str = "s"  # "s" (seconds, converted to ticks) or "count"

    def threshold_ticks(self, window: WindowSpec) -> int:
        return ticks(window, self.threshold) if self.unit == "s" else self.threshold


class Monitor:
    """Base class; subclasses declare locations/counters and implement ``step``."""

    ce_id: ClassVar[int]
    category: ClassVar[str]
    locations: ClassVar[tuple[str, ...]]
    counters: ClassVar[tuple[Counter, ...]] = ()

    def __init__(self, window: WindowSpec = DEFAULT_WINDOW):
        self.window = window
        self.limit = {c.name: c.threshold_ticks(window) for c in self.counters}
        self.clamp = tuple(self.limit[c.name] + 1 for c in self.counters)
        self.quiet = MonitorOutput(False, self.ce_id)

    @property
    def name(self) -> str:
        return CE_NAMES[self.ce_id]

    @property
    def counter_names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.counters)

    def initial(self) -> MonitorState:
        return MonitorState(self.ce_id, self.locations[0], (0,) * len(self.counters))

    def named(self, state: MonitorState) -> dict[str, int]:
        return dict(zip(self.counter_names, state.counters))

    def _state(self, loc: str, *counters: int, anchor: int | None = None) -> MonitorState:
        return MonitorState(self.ce_id, loc, tuple(min(v, m) for v, m in zip(counters, self.clamp)), anchor)

    def _fire(self, anchor: int | None) -> MonitorOutput:
        return MonitorOutput(True, self.ce_id, anchor)

    def step(self, state: MonitorState, x: AtomicEvent, t: int) -> tuple[MonitorState, MonitorOutput]:
        raise NotImplementedError

    def describe(self) -> dict:
        return {
            "ce_id": self.ce_id,
            "name": self.name,
            "category": self.category,
            "locations": list(self.locations),
            "counters": [
                {
                    "name": c.name,
                    "threshold": c.threshold,
                    "unit": c.unit,
                    "threshold_ticks": self.limit[c.name],
                    "clamp": self.limit[c.name] + 1,
                }
                for c in self.counters
            ],
        }


class RestroomWashMonitor(Monitor):
    """e1: starting work after the restroom without 20 s of continuous washing."""

    ce_id = 1
    category = "sequential + temporal"
    locations = ("idle", "after_restroom")
    counters = (Counter("wash_counter", 20),)

    def step(self, state, x, t):
        loc, (wash,) = state.key
        need = self.limit["wash_counter"]
        if loc == "idle":
            if x == A.FLUSH_TOILET:
                return self._state("after_restroom", 0, anchor=t), self.quiet
            return state, self.quiet
        if x == A.WASH:
            wash += 1
            if wash >= need:
                return self._state("idle", 0), self.quiet
            return self._state("after_restroom", wash, anchor=state.anchor), self.quiet
        if x in WORK:
            out = self._fire(state.anchor) if wash < need else self.quiet
            return self._state("idle", 0), out
        return self._state("after_restroom", 0, anchor=state.anchor), self.quiet


class MealHygieneMonitor(Monitor):
    """e2: a meal session starts without clean hands.

    Hands are clean after 20 s of continuous washing and stay clean for
    120 s unless something is touched. The transition structure follows the
    published eFSM for this event literally (including its meal-session
    state that suppresses repeated reports within one session).
    """

    ce_id = 2
    category = "sequential + temporal"
    locations = ("unclean", "washing", "clean", "meal")
    counters = (Counter("wash_count", 20), Counter("time_since_wash", 120))

    def step(self, state, x, t):
        loc, (wash, since) = state.key
        need = self.limit["wash_count"]
        stale = self.limit["time_since_wash"]
        meal = x in MEAL
        quiet = self.quiet
        if loc == "unclean":
            if x == A.WASH:
                return self._state("washing", 1, 0, anchor=t), quiet
            if meal:
                return self._state("meal", 0, 0), self._fire(t)
            return self._state("unclean", 0, 0), quiet
        if loc == "washing":
            if x == A.WASH:
                wash += 1
                if wash >= need:
                    return self._state("clean", wash, 0), quiet
                return self._state("washing", wash, 0, anchor=state.anchor), quiet
            if meal:
                return self._state("meal", 0, 0), self._fire(state.anchor)
            return self._state("unclean", 0, 0), quiet
        if loc == "clean":
            nxt = "clean"
            if meal:
                nxt = "meal"
            elif x in TOUCH:
                nxt = "unclean"
            elif x == A.WASH:
                since = 0
            else:
                since += 1
            if since > stale:
                nxt = "unclean"
            if nxt == "unclean":
                return self._state("unclean", 0, 0), quiet
            return self._state(nxt, wash, since), quiet
        # meal session: the staleness timer is stopped
        if meal or x == A.SIT:
            return state, quiet
        if x in TOUCH:
            return self._state("unclean", 0, 0), quiet
        if x == A.WASH:
            if wash >= need:
                return self._state("clean", wash, 0), quiet
            # the washing counter restarts from zero here, as published
            return self._state("washing", 0, 0, anchor=t), quiet
        if wash >= need:
            return self._state("clean", wash, since + 1), quiet
        return self._state("unclean", 0, 0), quiet


class ShortBrushingMonitor(Monitor):
    """e3: brushing session shorter than 2 minutes, with a 10 s grace period."""

    ce_id = 3
    category = "temporal (relative + duration)"
    locations = ("idle", "brushing", "waiting")
    counters = (Counter("brush_counter", 120), Counter("time_since_brush", 10))

    def step(self, state, x, t):
        loc, (brushed, since) = state.key
        quiet = self.quiet
        if loc == "idle":
            if x == A.BRUSH_TEETH:
                return self._state("brushing", brushed + 1, 0, anchor=t), quiet
            return state, quiet
        if loc == "brushing":
            if x == A.BRUSH_TEETH:
                return self._state("brushing", brushed + 1, since, anchor=state.anchor), quiet
            return self._state("waiting", brushed, since + 1, anchor=state.anchor), quiet
        if x == A.BRUSH_TEETH:
            return self._state("brushing", brushed + 1, 0, anchor=state.anchor), quiet
        since += 1
        if since > self.limit["time_since_brush"]:
            out = self._fire(state.anchor) if brushed < self.limit["brush_counter"] else quiet
            return self._state("idle", 0, 0), out
        return self._state("waiting", brushed, since, anchor=state.anchor), quiet


class RoutineSequenceMonitor(Monitor):
    """e4: brush -> eat -> drink or brush -> drink -> eat, unrelated events allowed between.

    A repeat of the key event matched last is a continuation of the same
    activity; any other out-of-order key event restarts from the longest
    suffix that is still a valid pattern prefix.
    """

    ce_id = 4
    category = "sequential - relaxed"
    locations = ("idle", "brush", "brush_eat", "brush_drink")

    def step(self, state, x, t):
        loc = state.location
        quiet = self.quiet
        if x == A.BRUSH_TEETH:
            if loc == "brush":
                return state, quiet
            return self._state("brush", anchor=t), quiet
        if loc == "idle":
            return state, quiet
        if loc == "brush":
            if x == A.EAT:
                return self._state("brush_eat", anchor=state.anchor), quiet
            if x == A.DRINK:
                return self._state("brush_drink", anchor=state.anchor), quiet
            return state, quiet
        if (loc, x) in (("brush_eat", A.DRINK), ("brush_drink", A.EAT)):
            return self._state("idle"), self._fire(state.anchor)
        return state, quiet


class WorkBreakMonitor(Monitor):
    """e5: sit -> type/click -> walk with don't-care events in between.

    Before work starts the don't-care set excludes sit/type/click/walk; after
    work has started only type/click/walk are excluded, so sitting down
    again does not break the match.
    """

    ce_id = 5
    category = "sequential - relaxed"
    locations = ("idle", "seated", "working")

    def step(self, state, x, t):
        loc = state.location
        quiet = self.quiet
        if loc == "idle":
            if x == A.SIT:
                return self._state("seated", anchor=t), quiet
            return state, quiet
        if loc == "seated":
            if x in WORK:
                return self._state("working", anchor=state.anchor), quiet
            if x == A.WALK:
                return self._state("idle"), quiet
            return state, quiet
        if x == A.WALK:
            return self._state("idle"), self._fire(state.anchor)
        return state, quiet


class LongWashMonitor(Monitor):
    """e6: washing for 30 s consecutively."""

    ce_id = 6
    category = "temporal - duration"
    locations = ("run",)
    counters = (Counter("wash_run", 30),)

    def step(self, state, x, t):
        (run,) = state.counters
        quiet = self.quiet
        if x != A.WASH:
            return (state if run == 0 else self._state("run", 0)), quiet
        anchor = t if run == 0 else state.anchor
        run += 1
        if run >= self.limit["wash_run"]:
            return self._state("run", 0), self._fire(anchor)
        return self._state("run", run, anchor=anchor), quiet


class TotalBrushingMonitor(Monitor):
    """e7: 2 minutes of brushing in total; the timer pauses between brushing windows."""

    ce_id = 7
    category = "temporal (relative + duration)"
    locations = ("timer",)
    counters = (Counter("brush_total", 120),)

    def step(self, state, x, t):
        (total,) = state.counters
        if x != A.BRUSH_TEETH:
            return state, self.quiet
        anchor = t if total == 0 else state.anchor
        total += 1
        if total >= self.limit["brush_total"]:
            return self._state("timer", 0), self._fire(anchor)
        return self._state("timer", total, anchor=anchor), self.quiet


class PostMealRestMonitor(Monitor):
    """e8: work resumes only after resting at least 3 minutes since the last eating window.

    Each eating window restarts the clock; working earlier abandons the
    pending instance without a report.
    """

    ce_id = 8
    category = "temporal - relative"
    locations = ("idle", "resting")
    counters = (Counter("time_since_eat", 180),)

    def step(self, state, x, t):
        quiet = self.quiet
        if x == A.EAT:
            return self._state("resting", 0, anchor=t), quiet
        if state.location == "idle":
            return state, quiet
        (since,) = state.counters
        since += 1
        if x in WORK:
            out = self._fire(state.anchor) if since >= self.limit["time_since_eat"] else quiet
            return self._state("idle", 0), out
        return self._state("resting", since, anchor=state.anchor), quiet


class TypingSessionsMonitor(Monitor):
    """e9: three complete typing sessions within 60 s of the first session's start.

    A session starts on a typing window preceded by a non-typing window (or
    the start of the trace) and ends on the next non-typing window. The
    clock expiring clears all session state; a typing run that is still in
    progress at expiry cannot count as a new session.
    """

    ce_id = 9
    category = "repetition - frequency"
    locations = ("idle", "typing", "gap", "blocked")
    counters = (Counter("sessions", 3, "count"), Counter("clock", 60))

    def step(self, state, x, t):
        loc, (sessions, clock) = state.key
        quiet = self.quiet
        typing = x == A.TYPE
        if loc == "idle":
            if typing:
                return self._state("typing", 0, 0, anchor=t), quiet
            return state, quiet
        if loc == "blocked":
            return (state if typing else self._state("idle", 0, 0)), quiet
        clock += 1
        window = self.limit["clock"]
        if loc == "typing" and not typing:
            sessions += 1
            if sessions >= self.limit["sessions"] and clock <= window:
                return self._state("idle", 0, 0), self._fire(state.anchor)
        if clock > window:
            if not typing:
                return self._state("idle", 0, 0), quiet
            if loc == "gap":
                return self._state("typing", 0, 0, anchor=t), quiet
            return self._state("blocked", 0, 0), quiet
        return self._state("typing" if typing else "gap", sessions, clock, anchor=state.anchor), quiet


class FocusedWorkMonitor(Monitor):
    """e10: exactly five clicks after the most recent sit, with no walking in between."""

    ce_id = 10
    category = "repetition - contextual"
    locations = ("disarmed", "armed")
    counters = (Counter("clicks", 5, "count"),)

    def step(self, state, x, t):
        quiet = self.quiet
        if state.location == "disarmed":
            if x == A.SIT:
                return self._state("armed", 0, anchor=t), quiet
            return state, quiet
        (clicks,) = state.counters
        if x == A.WALK:
            return self._state("disarmed", 0), quiet
        if x == A.SIT and clicks:
            # sitting down again restarts the count from the new sit
            return self._state("armed", 0, anchor=t), quiet
        if x == A.CLICK_MOUSE:
            clicks += 1
            if clicks >= self.limit["clicks"]:
                return self._state("disarmed", 0), self._fire(state.anchor)
            return self._state("armed", clicks, anchor=state.anchor), quiet
        return state, quiet


MONITOR_CLASSES: dict[int, type[Monitor]] = {
    cls.ce_id: cls
    for cls in (
        RestroomWashMonitor,
        MealHygieneMonitor,
        ShortBrushingMonitor,
        RoutineSequenceMonitor,
        WorkBreakMonitor,
        LongWashMonitor,
        TotalBrushingMonitor,
        PostMealRestMonitor,
        TypingSessionsMonitor,
        FocusedWorkMonitor,
    )
}
assert tuple(sorted(MONITOR_CLASSES)) == CE_IDS


@lru_cache(maxsize=None)
def get_monitor(ce_id: int, window: WindowSpec = DEFAULT_WINDOW) -> Monitor:
    try:
        return MONITOR_CLASSES[ce_id](window)
    except KeyError:
        raise ValueError(f"no monitor for complex event {ce_id!r}") from None


def monitors(window: WindowSpec = DEFAULT_WINDOW) -> tuple[Monitor, ...]:
    return tuple(get_monitor(ce, window) for ce in CE_IDS)


def monitor_step(
    state: MonitorState, x: AtomicEvent, t: int, window: WindowSpec = DEFAULT_WINDOW
) -> tuple[MonitorState, MonitorOutput]:
    return get_monitor(state.ce_id, window).step(state, AtomicEvent(x), t)


def catalogue(window: WindowSpec = DEFAULT_WINDOW) -> dict:
    """Machine-readable description of every monitor."""
    return {
        "window_s": window.window_seconds,
        "monitors": [m.describe() for m in monitors(window)],
    }


# --- ensemble labeling ----------------------------------------------------


def run_monitors(
    events: Sequence[AtomicEvent], window: WindowSpec = DEFAULT_WINDOW
) -> tuple[list[frozenset[int]], list[Completion]]:
    """Run all ten monitors in lockstep; return per-window fired sets and completions."""
    mons = monitors(window)
    states = [m.initial() for m in mons]
    fired_sets: list[frozenset[int]] = []
    completions: list[Completion] = []
    for t, x in enumerate(events):
        fired = []
        for i, m in enumerate(mons):
            states[i], out = m.step(states[i], x, t)
            if out.fired:
                fired.append(m.ce_id)
                completions.append(Completion(t, m.ce_id, out.anchor))
        fired_sets.append(frozenset(fired))
    return fired_sets, completions


def label_trace_multi(trace: ConceptTrace) -> tuple[tuple[frozenset[int], ...], tuple[Completion, ...]]:
    """Multi-label view: the full set of completing events at every window."""
    sets, comps = run_monitors(trace.events, trace.window)
    return tuple(sets), tuple(comps)


def label_trace(trace: ConceptTrace) -> LabeledTrace:
    """Online single-label annotation; raises SimultaneousCompletion on ties."""
    sets, comps = run_monitors(trace.events, trace.window)
    labels = []
    for t, fired in enumerate(sets):
        if len(fired) > 1:
            raise SimultaneousCompletion(t, fired)
        labels.append(next(iter(fired)) if fired else 0)
    return LabeledTrace(trace, tuple(labels), tuple(comps))


def prefix_labels(trace: ConceptTrace, t: int) -> tuple[int, ...]:
    """Labels for the first ``t`` windows computed from the truncated trace only."""
    return label_trace(trace.prefix(t)).labels


def detect_labels(trace: ConceptTrace) -> tuple[int, ...]:
    """Detector-style labeling: never raises, ties go to the lowest class id."""
    sets, _ = run_monitors(trace.events, trace.window)
    return tuple(min(s) if s else 0 for s in sets)
