"""Belief-state execution of the monitors over distribution-valued inputs.

Each eFSM monitor is flattened into an explicit automaton whose states are
(behavioural monitor state, just-fired flag) pairs. A belief is a
probability vector over those states; it is pushed forward linearly by the
per-window input distribution, and the mass entering accepting states is
compared against a threshold.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from .core import (
    CE_IDS,
    DEFAULT_WINDOW,
    N_AE,
    AtomicEvent,
    CedError,
    ProbTrace,
    WindowSpec,
    check_distributions,
)
from .fsm import MonitorState, get_monitor

DEFAULT_THRESHOLD = 0.5
DEFAULT_STATE_CAP = 1_000_000


class StateExplosion(CedError):
    """Reachable state set exceeded the configured cap."""


@dataclass(frozen=True, eq=False)
class ExplicitAutomaton:
    """Explicit finite automaton equivalent to one monitor.

    ``transition[s, a]`` is the successor of state ``s`` on symbol ``a``.
    ``reset[s]`` maps an accepting state to its non-accepting twin (the
    monitor's post-report configuration); it is the identity elsewhere.
    """

    ce_id: int
    states: tuple[tuple, ...]
    transition: np.ndarray
    accepting: np.ndarray
    initial: int
    reset: np.ndarray
    index: dict = field(repr=False)

    @property
    def n_states(self) -> int:
        return len(self.states)

    def state_of(self, state: MonitorState, fired: bool = False) -> int:
        return self.index[(state.key, fired)]

    def run(self, events) -> list[bool]:
        s = self.initial
        out = []
        for x in events:
            s = int(self.transition[s, int(x)])
            out.append(bool(self.accepting[s]))
        return out

    def to_json(self) -> dict:
        return {
            "ce_id": self.ce_id,
            "n_states": self.n_states,
            "symbols": [ae.symbol for ae in AtomicEvent],
            "states": [
                {"location": key[0], "counters": list(key[1]), "fired": fired}
                for key, fired in self.states
            ],
            "transitions": self.transition.tolist(),
            "accepting": np.flatnonzero(self.accepting).tolist(),
            "initial": self.initial,
            "reset": self.reset.tolist(),
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), separators=(",", ":"))

    def stacked_transition(self) -> sparse.csr_matrix:
        """Sparse (9*S, S) matrix; row ``a*S + s`` holds a one at ``transition[s, a]``."""
        S = self.n_states
        rows = np.arange(N_AE * S)
        cols = self.transition.T.reshape(-1)
        return sparse.csr_matrix((np.ones(N_AE * S), (rows, cols)), shape=(N_AE * S, S))


def finitize(
    ce_id: int, window: WindowSpec = DEFAULT_WINDOW, cap: int = DEFAULT_STATE_CAP
) -> ExplicitAutomaton:
    """Breadth-first enumeration of a monitor's reachable configurations.

    States reached by a firing transition are accepting; each one gets a
    non-accepting twin with the same configuration, which is where a belief
    reset sends its mass.
    """
    monitor = get_monitor(ce_id, window)
    index: dict = {}
    order: list = []
    queue: deque = deque()

    def visit(node) -> int:
        if node not in index:
            if len(index) >= cap:
                raise StateExplosion(f"e{ce_id}: more than {cap} reachable states")
            index[node] = len(order)
            order.append(node)
            queue.append(node)
            if node[1]:
                visit((node[0], False))
        return index[node]

    visit((monitor.initial().key, False))
    succ: dict[int, list[int]] = {}
    while queue:
        node = queue.popleft()
        (loc, counters), _ = node
        state = MonitorState(ce_id, loc, counters)
        row = []
        for a in AtomicEvent:
            nxt, out = monitor.step(state, a, 0)
            row.append(visit((nxt.key, out.fired)))
        succ[index[node]] = row
    transition = np.array([succ[i] for i in range(len(order))], dtype=np.int64)
    accepting = np.array([fired for _, fired in order], dtype=bool)
    reset = np.array([index[(key, False)] for key, _ in order], dtype=np.int64)
    for arr in (transition, accepting, reset):
        arr.setflags(write=False)
    return ExplicitAutomaton(ce_id, tuple(order), transition, accepting, 0, reset, index)


_CACHE: dict[tuple[int, WindowSpec], ExplicitAutomaton] = {}


def automaton(ce_id: int, window: WindowSpec = DEFAULT_WINDOW) -> ExplicitAutomaton:
    key = (ce_id, window)
    if key not in _CACHE:
        _CACHE[key] = finitize(ce_id, window)
    return _CACHE[key]


@dataclass
class BeliefState:
    automaton: ExplicitAutomaton
    weights: np.ndarray

    @property
    def ce_id(self) -> int:
        return self.automaton.ce_id

    @classmethod
    def initial(cls, aut: ExplicitAutomaton) -> BeliefState:
        w = np.zeros(aut.n_states)
        w[aut.initial] = 1.0
        return cls(aut, w)


def propagate(aut: ExplicitAutomaton, weights: np.ndarray, dist: np.ndarray) -> np.ndarray:
    """Linear push-forward of ``weights`` under input distribution ``dist``."""
    mass = weights[:, None] * dist[None, :]
    return np.bincount(aut.transition.ravel(), weights=mass.ravel(), minlength=aut.n_states)


def _reset(aut: ExplicitAutomaton, new: np.ndarray, p_accept: float) -> np.ndarray:
    acc = np.flatnonzero(aut.accepting)
    out = np.bincount(aut.reset[acc], weights=new[acc], minlength=aut.n_states) / p_accept
    support = np.flatnonzero(out)
    if support.size == 1:
        out[support[0]] = 1.0
    return out


def belief_step(
    belief: BeliefState, dist, threshold: float = DEFAULT_THRESHOLD
) -> tuple[BeliefState, bool, float]:
    """Advance one window; returns (new belief, fired, accepting mass on entry).

    On a report the belief is conditioned on the report and every accepting
    state is mapped to its post-report twin. For monitors that reset on
    report this is the point mass on the initial state.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    dist = np.asarray(dist, dtype=float)
    if dist.shape != (N_AE,):
        raise ValueError(f"expected a 9-vector, got shape {dist.shape}")
    check_distributions(dist)
    aut = belief.automaton
    new = propagate(aut, belief.weights, dist)
    p_accept = float(new[aut.accepting].sum())
    fired = p_accept >= threshold
    if fired:
        new = _reset(aut, new, p_accept)
    return BeliefState(aut, new), fired, p_accept


def _resolve(fired: np.ndarray, p_accept: np.ndarray) -> np.ndarray:
    """Pick one label per row: highest accepting mass among fired, ties to lowest id."""
    score = np.where(fired, p_accept, -1.0)
    best = np.argmax(score, axis=-1)  # argmax returns the first maximum
    any_fired = fired.any(axis=-1)
    return np.where(any_fired, best + 1, 0)


def detect_batch(
    dists: np.ndarray,
    threshold: float = DEFAULT_THRESHOLD,
    window: WindowSpec = DEFAULT_WINDOW,
    return_details: bool = False,
):
    """Run all ten belief machines over a batch of equal-length traces.

    ``dists`` has shape (B, T, 9). Returns integer labels of shape (B, T);
    with ``return_details`` also the per-class fired flags and accepting
    masses (B, T, 10) and the largest belief-normalisation error seen.
    """
    if not 0 < threshold <= 1:
        raise ValueError("threshold must lie in (0, 1]")
    dists = np.asarray(dists, dtype=float)
    if dists.ndim != 3 or dists.shape[2] != N_AE:
        raise ValueError(f"expected shape (B, T, 9), got {dists.shape}")
    check_distributions(dists)
    B, T, _ = dists.shape
    fired = np.zeros((B, T, len(CE_IDS)), dtype=bool)
    p_acc = np.zeros((B, T, len(CE_IDS)))
    max_dev = 0.0
    # beliefs are kept as (S, B) columns so the sparse product needs no copies
    dists_t = np.ascontiguousarray(dists.transpose(1, 2, 0))  # (T, 9, B)
    for k, ce in enumerate(CE_IDS):
        aut = automaton(ce, window)
        S = aut.n_states
        stacked_t = aut.stacked_transition().T.tocsr()
        acc_idx = np.flatnonzero(aut.accepting)
        reset_acc = aut.reset[acc_idx]
        # (S, n_acc) 0/1 matrix sending each accepting state to its twin
        to_twin = np.zeros((S, acc_idx.size))
        to_twin[reset_acc, np.arange(acc_idx.size)] = 1.0
        w = np.zeros((S, B))
        w[aut.initial] = 1.0
        mass = np.empty((N_AE, S, B))
        for t in range(T):
            np.multiply(dists_t[t][:, None, :], w[None, :, :], out=mass)
            new = stacked_t @ mass.reshape(N_AE * S, B)
            pa = new[acc_idx].sum(axis=0)
            hit = pa >= threshold
            if hit.any():
                cols = np.flatnonzero(hit)
                reset_w = (to_twin @ new[np.ix_(acc_idx, cols)]) / pa[cols]
                single = (reset_w > 0).sum(axis=0) == 1
                if single.any():
                    reset_w[:, single] = (reset_w[:, single] > 0).astype(float)
                new[:, cols] = reset_w
            dev = float(np.abs(new.sum(axis=0) - 1.0).max())
            max_dev = max(max_dev, dev)
            w = new
            fired[:, t, k] = hit
            p_acc[:, t, k] = pa
    labels = _resolve(fired, p_acc)
    if return_details:
        return labels, fired, p_acc, max_dev
    return labels


def detect_prob(ptrace: ProbTrace, threshold: float = DEFAULT_THRESHOLD) -> tuple[int, ...]:
    """Per-window complex-event labels for one probabilistic trace."""
    labels = detect_batch(ptrace.as_array()[None], threshold, ptrace.window)
    return tuple(int(y) for y in labels[0])


def detect_many(ptraces, threshold: float = DEFAULT_THRESHOLD) -> list[tuple[int, ...]]:
    """Batch traces of equal length and window together; preserves input order."""
    ptraces = list(ptraces)
    groups: dict[tuple[int, WindowSpec], list[int]] = {}
    for i, pt in enumerate(ptraces):
        groups.setdefault((len(pt), pt.window), []).append(i)
    out: list[tuple[int, ...] | None] = [None] * len(ptraces)
    for (_, window), idx in groups.items():
        arr = np.stack([ptraces[i].as_array() for i in idx])
        labels = detect_batch(arr, threshold, window)
        for i, row in zip(idx, labels):
            out[i] = tuple(int(y) for y in row)
    return out  # type: ignore[return-value]

