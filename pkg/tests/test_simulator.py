from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cedkit.core import AtomicEvent, ConceptTrace, WindowSpec, dumps, ticks
from cedkit.simulator import (
    DEFAULT_SUITE,
    InvalidConfig,
    InvalidMatrix,
    bundled_configs,
    config_from_dict,
    config_to_dict,
    corrupt,
    derive_seed,
    generate,
    generate_many,
    load_config,
    load_suite,
    simulate,
    stretch,
    uniform_confusion,
)

seeds = st.integers(0, 2**64 - 1)
config_names = st.sampled_from(DEFAULT_SUITE)


def test_bundled_suite():
    assert len(DEFAULT_SUITE) == 10
    assert set(DEFAULT_SUITE) <= set(bundled_configs())
    assert [c.name for c in load_suite("default")] == list(DEFAULT_SUITE)


def test_published_example_vocabulary():
    cfg = load_config("restroom_work")
    assert {ae.symbol for ae in cfg.vocabulary} == {"click_mouse", "flush_toilet", "sit", "type", "walk", "wash"}
    for seed in range(50):
        tr = generate(cfg, 300, seed)
        assert len(tr) == 60
        assert set(tr.events) <= set(cfg.vocabulary)


@given(name=config_names, seed=seeds, duration=st.integers(5, 700))
def test_length_and_determinism(name, seed, duration):
    cfg = load_config(name)
    a = generate(cfg, duration, seed)
    b = generate(cfg, duration, seed)
    assert len(a) == ticks(cfg.window, duration)
    assert dumps(a) == dumps(b)


@given(name=config_names, seed=seeds)
def test_vocabulary_closure(name, seed):
    cfg = load_config(name)
    gen = simulate(cfg, 300, seed)
    assert set(gen.events) <= set(cfg.vocabulary)
    assert set(gen.clean) <= set(cfg.vocabulary)


@given(name=config_names, seed=seeds, factor=st.sampled_from([1, 3, 6]))
def test_duration_fidelity(name, seed, factor):
    cfg = stretch(load_config(name), factor)
    gen = simulate(cfg, 300 * factor, seed)
    bounds = {}
    for g in cfg.groups.values():
        for a in g.activities.values():
            for s in a.steps:
                bounds.setdefault((g.name, s.ae), []).append(tuple(ticks(cfg.window, v) for v in s.duration_s))
    session_ends = {start: end for _, start, end in gen.groups}
    ends = sorted(session_ends.values())
    assert sum(r.length for r in gen.runs) == len(gen.clean) == len(gen.events)
    for r in gen.runs:
        assert any(lo <= r.sampled <= hi for lo, hi in bounds[(r.group, r.ae)])
        assert 1 <= r.length <= r.sampled
        if r.length < r.sampled:
            # a shortened run always stops at the end of its group session
            assert r.start + r.length in ends
    # runs tile the trace without gaps
    pos = 0
    for r in gen.runs:
        assert r.start == pos
        pos += r.length


def test_independent_seeds_differ():
    cfg = load_config("daytime")
    traces = {dumps(generate(cfg, 300, derive_seed(1, i), id="x")) for i in range(20)}
    assert len(traces) == 20


def test_derive_seed_is_stable():
    assert derive_seed(0, 0, 0) == derive_seed(0, 0, 0)
    assert derive_seed(1, 2) != derive_seed(2, 1)
    assert 0 <= derive_seed(2**64 - 1, 5) < 2**64


def test_generate_many_round_robin():
    suite = load_suite("default")
    out = list(generate_many(suite, 12, 60, seed=5, prefix="s"))
    assert [t.generator_tag for t in out] == [suite[i % 10].name for i in range(12)]
    assert out[3].id == "s-00003"


def _missing_target_fraction(cfg, target, n):
    return sum(all(g != target for g, _, _ in simulate(cfg, 300, derive_seed(77, i)).groups) for i in range(n)) / n


@pytest.mark.parametrize("name", ["meal_hygiene", "handwashing"])
def test_guarantee_effectiveness(name):
    cfg = load_config(name)
    assert cfg.guarantee is not None
    target = cfg.guarantee.target_group
    on = _missing_target_fraction(cfg, target, 400)
    off = _missing_target_fraction(replace(cfg, guarantee=None), target, 400)
    assert on < off


def test_noise_stays_in_vocabulary_and_rate():
    cfg = load_config("office").with_noise(0.3)
    changed = total = 0
    for seed in range(40):
        gen = simulate(cfg, 300, seed)
        changed += sum(a != b for a, b in zip(gen.events, gen.clean))
        total += len(gen.events)
        assert set(gen.events) <= set(cfg.vocabulary)
    assert abs(changed / total - 0.3) < 0.03
    quiet = cfg.with_noise(0.0)
    gen = simulate(quiet, 300, 1)
    assert gen.events == gen.clean


def _long_trace(n=10_000, seed=0):
    return ConceptTrace("long", tuple(np.random.default_rng(seed).integers(0, 9, size=n)))


def test_corrupt_flip_rate():
    tr = _long_trace()
    _, obs = corrupt(tr, 0.95, seed=11)
    rate = np.mean([a != b for a, b in zip(tr.events, obs.events)])
    assert abs(rate - 0.05) <= 0.01


def test_corrupt_noiseless_and_degenerate():
    tr = _long_trace(500)
    pt, obs = corrupt(tr, 1.0, seed=1)
    assert obs.events == tr.events
    assert np.array_equal(pt.as_array(), np.eye(9)[[int(e) for e in tr.events]])
    _, obs = corrupt(tr, 0.0, seed=1)
    assert all(a != b for a, b in zip(tr.events, obs.events))


def test_corrupt_posterior_shape():
    tr = _long_trace(300)
    pt, obs = corrupt(tr, 0.9, seed=3)
    arr = pt.as_array()
    assert np.allclose(arr.sum(axis=1), 1.0)
    for row, o in zip(arr, obs.events):
        assert row[int(o)] == pytest.approx(0.9)
        assert np.allclose(np.delete(row, int(o)), 0.1 / 8)


def test_corrupt_flips_nest_across_noise_levels():
    tr = _long_trace(2000)
    flipped = []
    for acc in (0.95, 0.9, 0.8):
        _, obs = corrupt(tr, acc, seed=9)
        flipped.append({i for i, (a, b) in enumerate(zip(tr.events, obs.events)) if a != b})
    assert flipped[0] <= flipped[1] <= flipped[2]


def test_corrupt_custom_confusion():
    m = np.zeros((9, 9))
    m[:, AtomicEvent.WALK] = 1.0
    tr = _long_trace(1000)
    _, obs = corrupt(tr, 0.0, seed=2, confusion=m)
    assert set(obs.events) == {AtomicEvent.WALK}
    with pytest.raises(InvalidMatrix):
        corrupt(tr, 0.5, seed=2, confusion=np.full((9, 9), 0.2))
    with pytest.raises(InvalidMatrix):
        corrupt(tr, 0.5, seed=2, confusion=np.eye(8))
    with pytest.raises(ValueError):
        corrupt(tr, 1.5, seed=2)
    assert np.allclose(uniform_confusion().sum(axis=1), 1.0)


def test_stretch():
    cfg = load_config("breakfast")
    assert stretch(cfg, 1) is cfg
    s3 = stretch(cfg, 3)
    for gname, g in cfg.groups.items():
        assert s3.groups[gname].duration_s == tuple(3 * v for v in g.duration_s)
        for aname, a in g.activities.items():
            for s, t in zip(a.steps, s3.groups[gname].activities[aname].steps):
                if s.ae in cfg.stretch_exempt:
                    assert t.duration_s == s.duration_s
                else:
                    assert t.duration_s == tuple(3 * v for v in s.duration_s)
    with pytest.raises(ValueError):
        stretch(cfg, 0.5)


@pytest.mark.parametrize("name", DEFAULT_SUITE)
def test_config_dict_round_trip(name):
    cfg = load_config(name)
    again = config_from_dict(config_to_dict(cfg))
    assert again == cfg
    assert again.digest() == cfg.digest()


def _minimal():
    return {
        "schema_version": 1,
        "name": "tiny",
        "initial": {"a": 1.0},
        "groups": {"a": {"duration_s": [5, 10], "activities": {"walk": [5, 5]}}},
        "group_transitions": {"a": {"a": 1.0}},
    }


def test_minimal_config_and_shorthands():
    data = _minimal()
    data["groups"]["a"]["activities"]["stroll"] = {"ae": "walk", "s": [5, 10], "p": 0.5}
    cfg = config_from_dict(data)
    assert cfg.vocabulary == (AtomicEvent.WALK,)
    assert cfg.groups["a"].activities["stroll"].steps[0].p == 0.5
    assert generate(cfg, 30, 0).events == (AtomicEvent.WALK,) * 6


@pytest.mark.parametrize(
    "mutate",
    [
        lambda d: d.update(schema_version=2),
        lambda d: d.update(initial={"a": 0.0}),
        lambda d: d.update(initial={"zzz": 1.0}),
        lambda d: d["groups"]["a"].update(duration_s=[10, 5]),
        lambda d: d["groups"]["a"].update(duration_s=[0, 5]),
        lambda d: d["groups"]["a"].update(activities={}),
        lambda d: d["groups"]["a"].update(activities={"jump": [5, 5]}),
        lambda d: d["groups"]["a"].update(start={"walk": -1.0}),
        lambda d: d["groups"]["a"].update(once_only=["nope"]),
        lambda d: d.update(group_transitions={}),
        lambda d: d.update(noise_rate=1.5),
        lambda d: d.update(guarantee={"target_group": "b", "max_windows_without": 3}),
        lambda d: d.pop("groups"),
    ],
)
def test_invalid_configs(mutate):
    data = _minimal()
    mutate(data)
    with pytest.raises(InvalidConfig):
        config_from_dict(data)


def test_unknown_config_name():
    with pytest.raises(InvalidConfig):
        load_config("no_such_config")


def test_short_duration_rejected():
    with pytest.raises(InvalidConfig):
        generate(load_config("office"), 4, 0)


def test_other_window_sizes():
    data = _minimal()
    data["window_s"] = 10
    cfg = config_from_dict(data)
    tr = generate(cfg, 300, 0)
    assert tr.window == WindowSpec(10) and len(tr) == 30
