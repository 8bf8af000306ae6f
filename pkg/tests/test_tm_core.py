import json

import pytest
from hypothesis import given, settings, strategies as st

from basin_forge import tm_core
from basin_forge.errors import InvalidState, MachineFormatError
from basin_forge.tm_core import Rule, TuringMachine

from oracle_tape import run_tape, step_tape


def test_encode_input(erase):
    assert tm_core.encode_input(erase, 35) == (0, 35, 1)
    assert tm_core.encode_input(erase, 0) == (0, 0, 1)


def test_erase_halts(erase):
    rep = tm_core.run(erase, 35, 100)
    assert rep.halted and rep.clean
    assert rep.steps_used == 3
    assert rep.final == (0, 0, 2)


def test_erase_empty_input(erase):
    rep = tm_core.run(erase, 0, 100)
    assert rep.halted and rep.steps_used == 1
    assert rep.final == (0, 0, 2)


def test_loop_never_halts(loop):
    rep = tm_core.run(loop, 5, 500)
    assert not rep.halted
    assert rep.steps_used == 500


def test_inc_valid_input(inc):
    w = tm_core.encode_binary_input(5)
    assert w == 23
    rep = tm_core.run(inc, w, 100)
    assert rep.halted and rep.clean
    assert rep.steps_used == 8
    assert rep.final == (0, 0, 4)


def test_inc_invalid_encoding_halts_dirty(inc):
    # 9 has a zero digit inside, violating the 1/2-digit input convention;
    # the machine still halts but leaves junk on the tape.
    rep = tm_core.run(inc, 9, 100)
    assert rep.halted and not rep.clean
    assert rep.final == (0, 27, 4)


@pytest.mark.parametrize("n", [0, 1, 2, 5, 12, 31])
def test_inc_actually_increments(inc, n):
    # the carry phase rewrites the numeral of n into the numeral of n+1
    # before the cleanup phases erase it; check the tape right after the
    # carry completes (first transition into state 2).
    cfg = tm_core.encode_input(inc, tm_core.encode_binary_input(n))
    for _ in range(40):
        if cfg[2] == 2:
            break
        cfg = tm_core.step(inc, cfg)
    assert cfg[2] == 2
    w1, w2, _ = cfg
    # reassemble the numeral in tape order: w1 digits are adjacent-first
    # (cell left of head is least significant), w2 digits head-first
    left = []
    v = w1
    while v:
        left.append(v % 3)
        v //= 3
    tail = []
    v = w2
    while v:
        tail.append(v % 3)
        v //= 3
    digits = left[::-1] + tail
    val = 0
    for i, d in enumerate(digits):
        assert d in (1, 2)
        val += (d - 1) << i
    assert val == n + 1


def test_state_m_is_fixed_point(erase):
    cfg = (7, 19, erase.m)
    assert tm_core.step(erase, cfg) == cfg


def test_step_rejects_bad_state(erase):
    with pytest.raises(InvalidState):
        tm_core.step(erase, (0, 0, 0))
    with pytest.raises(InvalidState):
        tm_core.step(erase, (0, 0, erase.m + 1))


def test_inc_rule_arrays(inc):
    write, move, nxt = inc.to_arrays()
    assert write == [2, 2, 1, 0, 1, 2, 0, 0, 0]
    assert move == [1, 1, 1, 2, 1, 1, 0, 2, 2]
    assert nxt == [2, 2, 1, 3, 2, 2, 4, 3, 3]


def test_arbitrary_precision():
    # one state, writes 2 and runs right forever: w1 = 3^k - 1 after k steps
    M = TuringMachine(2, 3, {(1, a): Rule(2, "R", 1) for a in range(3)})
    cfg = (0, 0, 1)
    for _ in range(200):
        cfg = tm_core.step(M, cfg)
    assert cfg[0] == 3 ** 200 - 1
    assert cfg[1] == 0


def test_load_dump_round_trip(inc, tmp_path):
    doc = tm_core.dump_machine(inc)
    M2 = tm_core.load_machine(doc)
    assert M2.m == inc.m and M2.b == inc.b and M2.rules == inc.rules
    M3 = tm_core.load_machine(json.dumps(doc))
    assert M3.rules == inc.rules
    p = tmp_path / "inc.json"
    p.write_text(json.dumps(doc))
    M4 = tm_core.load_machine(p)
    assert M4.rules == inc.rules


def test_load_machine_reports_rule_line():
    doc = {
        "m": 3,
        "b": 2,
        "rules": [
            {"q": 1, "a": 0, "write": 0, "move": "S", "next": 3},
            {"q": 1, "a": 1, "write": 5, "move": "R", "next": 1},
            {"q": 2, "a": 0, "write": 0, "move": "S", "next": 3},
            {"q": 2, "a": 1, "write": 0, "move": "L", "next": 2},
        ],
    }
    with pytest.raises(MachineFormatError) as ei:
        tm_core.load_machine(doc)
    assert ei.value.line == 1


def test_load_machine_rejects_duplicates():
    doc = {
        "m": 2,
        "b": 2,
        "rules": [
            {"q": 1, "a": 0, "write": 0, "move": "S", "next": 2},
            {"q": 1, "a": 1, "write": 0, "move": "S", "next": 2},
            {"q": 1, "a": 1, "write": 1, "move": "R", "next": 1},
        ],
    }
    with pytest.raises(MachineFormatError):
        tm_core.load_machine(doc)


def test_load_machine_rejects_partial_table():
    doc = {
        "m": 2,
        "b": 3,
        "rules": [{"q": 1, "a": 0, "write": 0, "move": "S", "next": 2}],
    }
    with pytest.raises(MachineFormatError):
        tm_core.load_machine(doc)


def machines():
    rule = st.tuples(st.integers(0, 2), st.sampled_from("SRL"), st.integers(1, 4))

    def build(draw_rules, m, b):
        rules = {}
        i = 0
        for q in range(1, m):
            for a in range(b):
                w, mv, nx = draw_rules[i]
                rules[(q, a)] = Rule(min(w, b - 1), mv, min(nx, m))
                i += 1
        return TuringMachine(m, b, rules)

    return st.builds(
        build,
        st.lists(rule, min_size=12, max_size=12),
        st.integers(2, 4),
        st.integers(2, 3),
    )


@settings(max_examples=150, deadline=None)
@given(machines(), st.integers(0, 10 ** 6), st.integers(0, 60))
def test_run_matches_tape_oracle(M, w, budget):
    rep = tm_core.run(M, w, budget)
    halted, steps, final = run_tape(M, w, budget) if budget else (False, 0, (0, w, 1))
    assert rep.halted == halted
    assert rep.steps_used == steps
    assert rep.final == final


@settings(max_examples=150, deadline=None)
@given(
    machines(),
    st.integers(0, 10 ** 30),
    st.integers(0, 10 ** 30),
    st.integers(1, 4),
)
def test_step_matches_tape_oracle(M, w1, w2, q):
    if q > M.m:
        q = M.m
    cfg = (w1, w2, q)
    assert tm_core.step(M, cfg) == step_tape(M, cfg)
