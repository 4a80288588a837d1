import itertools
import json
import os
import random
import tempfile

import pytest
from loguru import logger

from engine import BranchEvent, ConcolicEngine, Exited
from errors import InconsistentTrace
from explorer import (
    ChildState, ExecTree, Explorer, ExploreLimits, Leaf, Node, explore, path_condition, prepare,
)
from solver import Model, Sat, SolverSession, Unknown, Unsat

from rvasm import EXIT, program

BENCH = os.path.join(os.path.dirname(__file__), '..', 'benchmarks', 'bin')

SYM1 = ['li a0, 0x20000', 'li a1, 1', 'li a7, 2', 'ecall']
SYM2 = ['li a0, 0x20000', 'li a1, 2', 'li a7, 2', 'ecall']


def bench(name):
    with open(os.path.join(BENCH, name), 'rb') as f:
        return f.read()


def conditions():
    s = SolverSession()
    x = s.declare_var('x')
    y = s.declare_var('y')
    return s, x, y


def two_branch_tree():
    s, x, y = conditions()
    tree = ExecTree()
    trace = [BranchEvent(0x100, x, True), BranchEvent(0x200, y, False)]
    tree.insert_trace(trace, Exited(0))
    return s, tree, trace


# -- ExecTree ----------------------------------------------------------------

def test_first_insert_builds_a_path():
    _, tree, _ = two_branch_tree()
    root = tree.root
    assert isinstance(root, Node) and root.pc == 0x100
    assert root.children[False] is ChildState.UNEXPLORED
    inner = root.children[True]
    assert isinstance(inner, Node) and inner.pc == 0x200
    assert inner.children[False] == Leaf(Exited(0))
    assert inner.children[True] is ChildState.UNEXPLORED


def test_insert_is_idempotent():
    _, tree, trace = two_branch_tree()
    before = list(tree.slots())
    inner = tree.root.children[True]
    tree.insert_trace(trace, Exited(0))
    assert list(tree.slots()) == before
    assert tree.root.children[True] is inner


def test_insert_rejects_pc_mismatch():
    s, tree, _ = two_branch_tree()
    x = s.lookup('x')
    with pytest.raises(InconsistentTrace) as info:
        tree.insert_trace([BranchEvent(0x100, x, True), BranchEvent(0x300, x, True)], Exited(0))
    assert info.value.position == 1
    assert info.value.expected_pc == 0x200


def test_trace_past_a_leaf_replaces_it():
    s, x, _ = conditions()
    tree = ExecTree()
    tree.insert_trace([], Exited(0))
    assert tree.root == Leaf(Exited(0))
    assert tree.next_target() is None
    tree.insert_trace([BranchEvent(0x100, x, False)], Exited(1))
    assert isinstance(tree.root, Node)
    assert tree.root.children[False] == Leaf(Exited(1))


def test_next_target_prefers_shallow_unexplored_branches():
    s, tree, _ = two_branch_tree()
    x, y = s.lookup('x'), s.lookup('y')

    first = tree.next_target()
    assert first.node is tree.root and first.direction is False
    assert first.decisions == [False]
    assert [c.eq(want) for c, want in zip(path_condition(first), [x == 0])] == [True]
    assert tree.root.children[False] is ChildState.PENDING

    second = tree.next_target()
    assert second.node is tree.root.children[True] and second.direction is True
    assert second.decisions == [True, True]
    pc = path_condition(second)
    assert len(pc) == 2 and pc[0].eq(x != 0) and pc[1].eq(y != 0)

    assert tree.next_target() is None


def test_path_condition_is_satisfiable_for_the_flip():
    s, tree, _ = two_branch_tree()
    tree.next_target()
    target = tree.next_target()
    result = s.check(path_condition(target))
    assert isinstance(result, Sat)
    assert result.model.get('x', 0) != 0 and result.model.get('y', 0) != 0


def test_mark_and_contains():
    _, tree, _ = two_branch_tree()
    target = tree.next_target()
    tree.mark(target, ChildState.UNSAT)
    assert tree.root.children[False] is ChildState.UNSAT
    assert tree.contains('TF')
    assert tree.contains('T')
    assert not tree.contains('F')
    assert not tree.contains('TT')
    assert not tree.contains('TFT')


# -- exploration on small programs ------------------------------------------

NESTED = SYM2 + [
    'lbu t0, 0(a0)',
    'lbu t1, 1(a0)',
    'li t2, 10',
    'bgeu t0, t2, big',
    'beq t0, t1, same',
    'li a0, 2',
    'j done',
    'same:',
    'li a0, 1',
    'j done',
    'big:',
    'li a0, 3',
    'done:',
] + EXIT

INFEASIBLE = SYM1 + [
    'lbu t0, 0(a0)',
    'li t2, 10',
    'bgeu t0, t2, out',
    'li t3, 20',
    'bltu t3, t0, never',
    'li a0, 0',
    'j done',
    'never:',
    'li a0, 9',
    'j done',
    'out:',
    'li a0, 1',
    'done:',
] + EXIT


def test_no_symbolic_input_is_one_path():
    report = explore(program(['li a0, 0'] + EXIT))
    assert report.paths_completed == 1
    assert len(report.runs) == 1
    assert report.exhausted
    assert report.decision_strings() == ['']


def test_nested_branches():
    report = explore(program(NESTED, data=b'\x05\x06'))
    assert report.exhausted
    assert sorted(report.decision_strings()) == ['FF', 'FT', 'T']
    assert sorted(r.status for r in report.runs) == ['Exited(1)', 'Exited(2)', 'Exited(3)']
    assert report.unsat_branches == 0


def test_infeasible_branch_is_counted_unsat():
    report = explore(program(INFEASIBLE, data=b'\x05'))
    assert report.paths_completed == 2
    assert report.unsat_branches == 1
    assert sorted(report.decision_strings()) == ['FF', 'T']
    assert 'Exited(9)' not in {r.status for r in report.runs}


def test_faulting_path_counts_as_completed():
    lines = SYM1 + [
        'lbu t0, 0(a0)',
        'beq t0, zero, bad',
        'li a0, 0',
    ] + EXIT + [
        'bad:',
        'ebreak',
    ]
    report = explore(program(lines, data=b'\x01'))
    assert report.paths_completed == 2
    assert any(r.status.startswith('Fault(breakpoint') for r in report.runs)
    assert 'fault' in {e for e, _ in report.events}


def test_step_limit_path_is_truncated():
    lines = SYM1 + [
        'lbu t0, 0(a0)',
        'beq t0, zero, out',
        'spin:',
        'j spin',
        'out:',
        'li a0, 0',
    ] + EXIT
    report = explore(program(lines, data=b'\x00'), ExploreLimits(step_limit=1000))
    assert report.paths_completed == 1
    assert report.paths_truncated == 1
    assert report.decision_strings() == ['T']
    assert report.decision_strings(include_truncated=True) == ['T', 'F']
    assert report.runs[1].status == 'StepLimit'


def test_concretization_events_reach_the_report():
    lines = SYM1 + [
        'lbu t0, 0(a0)',
        'add t1, a0, t0',
        'lbu t2, 0(t1)',
        'li a0, 0',
    ] + EXIT
    report = explore(program(lines, data=b'\x00'))
    assert report.paths_completed == 1
    assert 'symbolic-address' in {e for e, _ in report.events}


def _warnings_during(fn):
    messages = []
    handler = logger.add(messages.append, level='WARNING', format='{message}')
    try:
        result = fn()
    finally:
        logger.remove(handler)
    return result, messages


def test_echoed_input_does_not_warn():
    lines = SYM1 + ['lbu a0, 0(a0)', 'li a7, 3', 'ecall', 'li a0, 0'] + EXIT
    report, messages = _warnings_during(lambda: explore(program(lines, data=b'\x00')))
    assert report.paths_completed == 1
    assert {e for e, _ in report.events} == {'symbolic-output'}
    assert not any('concretization' in m for m in messages)


def test_symbolic_address_warns():
    lines = SYM1 + ['lbu t0, 0(a0)', 'add t1, a0, t0', 'lbu t2, 0(t1)', 'li a0, 0'] + EXIT
    _, messages = _warnings_during(lambda: explore(program(lines, data=b'\x00')))
    assert any('1 distinct concretization events' in m for m in messages)


def test_on_run_sees_every_record():
    seen = []
    report = explore(program(NESTED, data=b'\x05\x06'), on_run=seen.append)
    assert seen == report.runs
    assert [r.run_id for r in seen] == [0, 1, 2]


# -- benchmarks ---------------------------------------------------------------

@pytest.mark.parametrize('name,expected', [
    ('bubble-sort-3.elf', 6),
    ('bubble-sort-4.elf', 24),
    ('bubble-sort-5.elf', 120),
    ('insertion-sort-3.elf', 6),
    ('insertion-sort-4.elf', 24),
    ('insertion-sort-5.elf', 120),
])
def test_sorting_path_counts(name, expected):
    report = explore(bench(name))
    assert report.exhausted
    assert report.paths_completed == expected
    assert report.paths_truncated == 0
    assert report.unknown_branches == 0


def test_base64_path_count():
    report = explore(bench('base64-encode.elf'))
    assert report.exhausted
    assert report.paths_completed == 625


def test_is_prime_matches_brute_force():
    image = bench('is-prime.elf')
    snapshot = prepare(image)
    engine = ConcolicEngine(SolverSession())
    oracle = set()
    for value in range(256):
        result = engine.run(snapshot, Model({'in_0_0': value}))
        assert result.inputs == {'in_0_0': value}
        oracle.add(result.decisions)
        expected = b'y' if value in _primes_below(256) else b'n'
        assert result.output == expected, value

    report = explore(image)
    assert report.exhausted
    assert set(report.decision_strings()) == oracle
    assert report.paths_completed == len(oracle)


def _primes_below(n):
    return {p for p in range(2, n) if all(p % d for d in range(2, int(p ** 0.5) + 1))}


# uri-parser: every byte decision depends only on the byte's class, so one
# representative per class enumerates all paths.
URI_CLASSES = {'alpha': ord('a'), 'colon': ord(':'), 'slash': ord('/'), 'other': ord('!')}
URI_STEP = {
    's': {'alpha': 's', 'colon': 'c'},
    'c': {'slash': '/', 'alpha': 'p'},
    '/': {'slash': 'h', 'alpha': 'p', 'colon': 'p', 'other': 'p'},
    'h': {'alpha': 'h', 'slash': 'p'},
    'p': {'slash': 'p', 'alpha': 'p'},
}


def _scan_uri(classes):
    state = 's'
    for cls in classes:
        state = URI_STEP[state].get(cls, 'x')
        if state == 'x':
            break
    return state.encode()


def test_uri_parser_matches_enumerated_oracle():
    image = bench('uri-parser.elf')
    snapshot = prepare(image)
    engine = ConcolicEngine(SolverSession())
    oracle = set()
    for classes in itertools.product(URI_CLASSES, repeat=5):
        values = {f'in_0_{i}': URI_CLASSES[c] for i, c in enumerate(classes)}
        result = engine.run(snapshot, Model(values))
        assert result.status == Exited(0)
        assert result.output == _scan_uri(classes), classes
        oracle.add(result.decisions)
    assert len(oracle) == 60

    rng = random.Random(3)
    for _ in range(200):
        result = engine.run(snapshot, Model({f'in_0_{i}': rng.getrandbits(8) for i in range(5)}))
        assert result.decisions in oracle

    report = explore(image)
    assert report.exhausted
    assert set(report.decision_strings()) == oracle
    assert report.paths_completed == 60
    assert report.events == []


def test_paths_are_unique_and_replays_land_in_the_tree():
    image = bench('bubble-sort-4.elf')
    snapshot = prepare(image)
    engine = ConcolicEngine(SolverSession())
    explorer = Explorer(snapshot)
    report = explorer.explore()
    decisions = report.decision_strings()
    assert len(decisions) == len(set(decisions)) == report.paths_completed
    for record in report.runs:
        assert explorer.tree.contains(record.decisions)
        # replaying the recorded inputs reproduces the same path
        again = engine.run(snapshot, Model(record.inputs))
        assert again.decisions == record.decisions
    assert not any(slot is ChildState.UNEXPLORED or slot is ChildState.PENDING
                   for slot in explorer.tree.slots())


def test_exploration_is_deterministic():
    image = bench('insertion-sort-4.elf')
    a = explore(image, seed=5)
    b = explore(image, seed=5)
    assert [(r.decisions, r.inputs) for r in a.runs] == [(r.decisions, r.inputs) for r in b.runs]


def test_budget_max_paths():
    report = explore(bench('bubble-sort-4.elf'), ExploreLimits(max_paths=5))
    assert report.stop_reason == 'max-paths'
    assert report.paths_completed == 5
    assert not report.exhausted


def test_budget_max_runs():
    report = explore(bench('bubble-sort-4.elf'), ExploreLimits(max_runs=3))
    assert report.stop_reason == 'max-runs'
    assert len(report.runs) == 3


def test_report_lines_and_file():
    report = explore(program(NESTED, data=b'\x05\x06'))
    lines = [json.loads(line) for line in report.to_lines()]
    assert len(lines) == 4
    first = lines[0]
    assert set(first) == {'run_id', 'status', 'steps', 'trace_len', 'inputs'}
    assert first['inputs'] == {'in_0_0': '05', 'in_0_1': '06'}
    assert first['trace_len'] == 2
    summary = lines[-1]
    assert summary['summary'] is True
    assert summary['paths_completed'] == 3
    assert summary['stop_reason'] == 'exhausted'
    assert set(summary['wall_time']) == {'run', 'solve', 'tree', 'total'}

    fd, path = tempfile.mkstemp(suffix='.jsonl')
    os.close(fd)
    try:
        report.write(path)
        with open(path) as f:
            assert [json.loads(line) for line in f] == lines
    finally:
        os.remove(path)


def test_unsat_target_is_not_rerun():
    s, x, _ = conditions()
    tree = ExecTree()
    tree.insert_trace([BranchEvent(0x100, x - x, False)], Exited(0))
    target = tree.next_target()
    assert isinstance(s.check(path_condition(target)), Unsat)
    tree.mark(target, ChildState.UNSAT)
    assert tree.next_target() is None


def _flaky_check(monkeypatch, unknown_calls):
    """Make the listed SolverSession.check calls (0-based) answer unknown."""
    calls = []
    original = SolverSession.check

    def check(self, assertions, timeout_s=None):
        calls.append(timeout_s)
        if unknown_calls == 'all' or len(calls) - 1 in unknown_calls:
            return Unknown('timeout')
        return original(self, assertions, timeout_s=timeout_s)

    monkeypatch.setattr(SolverSession, 'check', check)
    return calls


def test_unknown_is_retried_with_doubled_timeout(monkeypatch):
    calls = _flaky_check(monkeypatch, {0})
    report = explore(program(NESTED, data=b'\x05\x06'), ExploreLimits(query_timeout_s=3))
    assert calls == [None, 6, None]
    assert report.unknown_retries == 1
    assert report.unknown_branches == 0
    assert sorted(report.decision_strings()) == ['FF', 'FT', 'T']


def test_unknown_after_retry_is_recorded(monkeypatch):
    calls = _flaky_check(monkeypatch, 'all')
    report = explore(program(NESTED, data=b'\x05\x06'))
    assert report.exhausted
    assert report.unknown_branches >= 1
    assert report.unknown_retries == report.unknown_branches
    assert len(calls) == 2 * report.unknown_branches
    assert len(report.runs) == 1
    assert 'solver-unknown' in {e for e, _ in report.events}


# -- brute-force oracle over one symbolic byte -------------------------------

RANGES = SYM1 + [
    'lbu t0, 0(a0)',
    'li t1, 10',
    'bltu t0, t1, lt10',
    'li t1, 50',
    'bltu t0, t1, lt50',
    'li t1, 100',
    'bltu t0, t1, lt100',
    'li t1, 200',
    'bltu t0, t1, lt200',
    'li a0, 4',
    'j done',
    'lt10:',
    'li a0, 0',
    'j done',
    'lt50:',
    'li a0, 1',
    'j done',
    'lt100:',
    'li a0, 2',
    'j done',
    'lt200:',
    'li a0, 3',
    'done:',
] + EXIT

BITS = SYM1 + ['lbu t0, 0(a0)', 'li a0, 0'] + [
    line
    for i in range(4)
    for line in (f'andi t1, t0, {1 << i}', f'beq t1, zero, skip{i}', f'addi a0, a0, {1 << i}', f'skip{i}:')
] + EXIT

COUNTDOWN = SYM1 + [
    'lbu t0, 0(a0)',
    'andi t1, t0, 7',
    'li a0, 0',
    'loop:',
    'beq t1, zero, out',
    'addi t1, t1, -1',
    'addi a0, a0, 1',
    'j loop',
    'out:',
] + EXIT

MODULAR = SYM1 + [
    'lbu t0, 0(a0)',
    'li t2, 3',
    'remu t1, t0, t2',
    'beq t1, zero, three',
    'mul t3, t0, t0',
    'li t4, 1000',
    'bltu t3, t4, small',
    'li a0, 2',
    'j done',
    'small:',
    'li a0, 1',
    'j done',
    'three:',
    'li a0, 0',
    'done:',
] + EXIT


@pytest.mark.parametrize('lines,paths', [
    (RANGES, 5),
    (BITS, 16),
    (COUNTDOWN, 8),
    (INFEASIBLE, 2),
    (MODULAR, 3),
], ids=['ranges', 'bits', 'countdown', 'infeasible', 'modular'])
def test_single_byte_programs_match_brute_force(lines, paths):
    image = program(lines, data=b'\x00')
    snapshot = prepare(image)
    engine = ConcolicEngine(SolverSession())
    oracle = {engine.run(snapshot, Model({'in_0_0': v})).decisions for v in range(256)}
    assert len(oracle) == paths

    report = explore(image)
    assert report.exhausted
    assert set(report.decision_strings()) == oracle
    assert report.paths_completed == paths
