"""Path exploration: execution tree, target selection and the concolic loop.

Each run's trace is merged into an ``ExecTree`` whose nodes are symbolic
branch points. Exploration repeatedly picks the first unexplored direction in
a taken-first depth-first walk, asks the solver for inputs that follow the
path prefix and flip that branch, and re-runs the program with them.
"""

import json
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, List, Optional, Tuple, Union

import z3
from loguru import logger

from engine import (
    DEFAULT_STEP_LIMIT, DEFAULT_SYMBOLIC_BUDGET, EV_OUTPUT, ConcolicEngine, ExitStatus, RunResult,
    StepLimit, Trace,
)
from errors import InconsistentTrace, ReplayDivergence
from machine import STACK_TOP, MachineState, Memory, load_elf
from solver import Model, Sat, SatResult, SolverSession, Unknown, Unsat


class ChildState(Enum):
    UNEXPLORED = 'unexplored'
    PENDING = 'pending'
    UNSAT = 'unsat'
    UNKNOWN = 'unknown'


@dataclass(frozen=True)
class Leaf:
    terminal: ExitStatus

    @property
    def truncated(self) -> bool:
        return isinstance(self.terminal, StepLimit)


@dataclass(eq=False)
class Node:
    condition: z3.BitVecRef
    pc: int
    children: Dict[bool, 'ChildSlot'] = field(
        default_factory=lambda: {True: ChildState.UNEXPLORED, False: ChildState.UNEXPLORED})


ChildSlot = Union[ChildState, Node, Leaf]


@dataclass
class PathTarget:
    """Observed decisions from the root down to the branch to flip.

    ``prefix[i]`` holds the direction runs actually took; the last element is
    the one whose direction is negated. ``decisions`` is the branch-decision
    string a run satisfying the path condition is expected to produce.
    """
    prefix: List[Tuple[z3.BitVecRef, bool]]
    node: Node
    direction: bool

    @property
    def flipped_index(self) -> int:
        return len(self.prefix) - 1

    @property
    def decisions(self) -> List[bool]:
        return [taken for _, taken in self.prefix[:-1]] + [self.direction]


class ExecTree:
    def __init__(self):
        self.root: Optional[Union[Node, Leaf]] = None

    def _set(self, parent: Optional[Node], key: bool, slot: ChildSlot):
        if parent is None:
            self.root = slot
        else:
            parent.children[key] = slot

    def insert_trace(self, trace: Trace, terminal: ExitStatus):
        """Merge ``trace`` into the tree and mark where it ended.

        Raises InconsistentTrace when a branch pc differs from the node already
        stored at that depth. Inserting the same trace twice changes nothing.
        """
        parent: Optional[Node] = None
        key = True
        slot = self.root
        for position, event in enumerate(trace):
            if isinstance(slot, Node):
                if slot.pc != event.pc:
                    raise InconsistentTrace(position, slot.pc, event.pc)
                node = slot
            else:
                if isinstance(slot, Leaf):
                    # only possible when concretization hid a data dependency
                    logger.debug('trace extends past a leaf at depth {}', position)
                node = Node(event.condition, event.pc)
                self._set(parent, key, node)
            parent, key = node, event.taken
            slot = node.children[key]
        if not isinstance(slot, Node):
            self._set(parent, key, Leaf(terminal))

    def next_target(self) -> Optional[PathTarget]:
        """First unexplored direction in taken-first DFS order, or None when exhausted.

        The chosen slot is marked PENDING.
        """
        if not isinstance(self.root, Node):
            return None
        stack: List[Tuple[Node, List[Tuple[z3.BitVecRef, bool]]]] = [(self.root, [])]
        while stack:
            node, prefix = stack.pop()
            for direction in (True, False):
                if node.children[direction] is ChildState.UNEXPLORED:
                    node.children[direction] = ChildState.PENDING
                    return PathTarget(prefix + [(node.condition, not direction)], node, direction)
            # push not-taken first so the taken subtree is searched first
            for direction in (False, True):
                child = node.children[direction]
                if isinstance(child, Node):
                    stack.append((child, prefix + [(node.condition, direction)]))
        return None

    def mark(self, target: PathTarget, state: ChildState):
        target.node.children[target.direction] = state

    def contains(self, decisions: str) -> bool:
        """True when the branch-decision string is a path in the tree."""
        slot = self.root
        for d in decisions:
            if not isinstance(slot, Node):
                return False
            slot = slot.children[d == 'T']
        return isinstance(slot, (Node, Leaf))

    def slots(self):
        """Yield every child slot value in the tree (leaves and states)."""
        stack = [self.root] if self.root is not None else []
        while stack:
            slot = stack.pop()
            if isinstance(slot, Node):
                stack.extend(slot.children.values())
            else:
                yield slot


def path_condition(target: PathTarget) -> List[z3.BoolRef]:
    conditions = []
    last = target.flipped_index
    for i, (cond, taken) in enumerate(target.prefix):
        if i == last:
            taken = not taken
        conditions.append(cond != 0 if taken else cond == 0)
    return conditions


@dataclass
class ExploreLimits:
    max_paths: int = 1_000_000
    max_runs: int = 1_000_000
    query_timeout_s: float = 30.0
    step_limit: int = DEFAULT_STEP_LIMIT
    symbolic_budget: int = DEFAULT_SYMBOLIC_BUDGET


def hex_inputs(inputs: Dict[str, int]) -> Dict[str, str]:
    return {name: f'{value:02x}' for name, value in inputs.items()}


def status_name(status: ExitStatus) -> str:
    return str(status)


@dataclass
class RunRecord:
    run_id: int
    status: str
    steps: int
    trace_len: int
    inputs: Dict[str, int]
    decisions: str
    truncated: bool = False
    output: bytes = b''

    def to_json(self) -> dict:
        return {
            'run_id': self.run_id,
            'status': self.status,
            'steps': self.steps,
            'trace_len': self.trace_len,
            'inputs': hex_inputs(self.inputs),
        }


@dataclass
class ExplorationReport:
    paths_completed: int = 0
    paths_truncated: int = 0
    unsat_branches: int = 0
    unknown_branches: int = 0
    unknown_retries: int = 0
    runs: List[RunRecord] = field(default_factory=list)
    wall_time: Dict[str, float] = field(
        default_factory=lambda: {'run': 0.0, 'solve': 0.0, 'tree': 0.0, 'total': 0.0})
    stop_reason: str = 'exhausted'
    events: List[Tuple[str, str]] = field(default_factory=list)

    @property
    def exhausted(self) -> bool:
        return self.stop_reason == 'exhausted'

    def decision_strings(self, include_truncated: bool = False) -> List[str]:
        return [
            r.decisions for r in self.runs
            if include_truncated or not r.truncated
        ]

    def summary(self) -> dict:
        return {
            'summary': True,
            'paths_completed': self.paths_completed,
            'paths_truncated': self.paths_truncated,
            'unsat_branches': self.unsat_branches,
            'unknown_branches': self.unknown_branches,
            'unknown_retries': self.unknown_retries,
            'runs': len(self.runs),
            'stop_reason': self.stop_reason,
            'wall_time': {k: round(v, 6) for k, v in self.wall_time.items()},
        }

    def to_lines(self) -> List[str]:
        lines = [json.dumps(r.to_json(), sort_keys=True) for r in self.runs]
        lines.append(json.dumps(self.summary(), sort_keys=True))
        return lines

    def write(self, path: str):
        with open(path, 'w') as f:
            for line in self.to_lines():
                f.write(line + '\n')


class Explorer:
    """Sequential concolic exploration of one loaded program.

    ``on_run`` is called with every RunRecord as soon as the run finishes.
    """

    def __init__(self, snapshot: MachineState, limits: Optional[ExploreLimits] = None,
                 seed: int = 0, dump_smt: Optional[str] = None,
                 on_run: Optional[Callable[[RunRecord], None]] = None):
        self.snapshot = snapshot
        self.limits = limits or ExploreLimits()
        self.session = SolverSession(timeout_s=self.limits.query_timeout_s, seed=seed, dump_smt=dump_smt)
        self.engine = ConcolicEngine(self.session, step_limit=self.limits.step_limit,
                                     symbolic_budget=self.limits.symbolic_budget)
        self.tree = ExecTree()
        self.report = ExplorationReport()
        self.on_run = on_run
        self._complete = set()
        self._truncated = set()
        self._seen_events = set()

    def _execute(self, overrides: Optional[Model]) -> RunResult:
        started = time.perf_counter()
        result = self.engine.run(self.snapshot, overrides)
        self.report.wall_time['run'] += time.perf_counter() - started

        started = time.perf_counter()
        self.tree.insert_trace(result.trace, result.status)
        self.report.wall_time['tree'] += time.perf_counter() - started

        decisions = result.decisions
        if isinstance(result.status, StepLimit):
            self._truncated.add(decisions)
        else:
            self._complete.add(decisions)
        self.report.paths_completed = len(self._complete)
        self.report.paths_truncated = len(self._truncated)

        for event in result.events:
            if event not in self._seen_events:
                self._seen_events.add(event)
                self.report.events.append(event)

        record = RunRecord(
            run_id=len(self.report.runs),
            status=status_name(result.status),
            steps=result.steps,
            trace_len=len(result.trace),
            inputs=result.inputs,
            decisions=decisions,
            truncated=isinstance(result.status, StepLimit),
            output=result.output,
        )
        self.report.runs.append(record)
        logger.debug('run {}: {} steps={} decisions={}', record.run_id, record.status,
                     record.steps, decisions or '-')
        if self.on_run is not None:
            self.on_run(record)
        return result

    def _check_replay(self, target: PathTarget, result: RunResult):
        expected = target.decisions
        for position, want in enumerate(expected):
            if position >= len(result.trace):
                if isinstance(result.status, StepLimit):
                    return
                raise ReplayDivergence(position, want, 'end of trace')
            got = result.trace[position].taken
            if got != want:
                raise ReplayDivergence(position, want, got)

    def _solve(self, target: PathTarget) -> SatResult:
        """Solve for ``target``; an unknown answer gets one retry at twice the timeout."""
        conditions = path_condition(target)
        outcome = self.session.check(conditions)
        if isinstance(outcome, Unknown):
            timeout_s = 2 * self.session.timeout_s
            logger.debug('unknown at pc=0x{:08x} ({}), retrying with {}s',
                         target.node.pc, outcome.reason, timeout_s)
            self.report.unknown_retries += 1
            outcome = self.session.check(conditions, timeout_s=timeout_s)
        return outcome

    def _budget_left(self) -> bool:
        if self.report.paths_completed >= self.limits.max_paths:
            self.report.stop_reason = 'max-paths'
            return False
        if len(self.report.runs) >= self.limits.max_runs:
            self.report.stop_reason = 'max-runs'
            return False
        return True

    def explore(self) -> ExplorationReport:
        started = time.perf_counter()
        self._execute(None)
        while self._budget_left():
            target = self.tree.next_target()
            if target is None:
                self.report.stop_reason = 'exhausted'
                break
            t0 = time.perf_counter()
            outcome = self._solve(target)
            self.report.wall_time['solve'] += time.perf_counter() - t0

            if isinstance(outcome, Sat):
                result = self._execute(outcome.model)
                try:
                    self._check_replay(target, result)
                except ReplayDivergence as e:
                    logger.error('{} (inputs {})', e, hex_inputs(result.inputs))
                    raise
            elif isinstance(outcome, Unsat):
                self.tree.mark(target, ChildState.UNSAT)
                self.report.unsat_branches += 1
            else:
                self.tree.mark(target, ChildState.UNKNOWN)
                self.report.unknown_branches += 1
                self.report.events.append(
                    ('solver-unknown', f'pc=0x{target.node.pc:08x} reason={outcome.reason}'))
        self.report.wall_time['total'] = time.perf_counter() - started

        concretized = sum(1 for event, _ in self.report.events
                          if event.startswith('symbolic-') and event != EV_OUTPUT)
        if concretized:
            logger.warning('{} distinct concretization events; path counts may be incomplete',
                           concretized)
        logger.info('exploration finished: {} paths ({} truncated), {} runs, stop={}',
                    self.report.paths_completed, self.report.paths_truncated,
                    len(self.report.runs), self.report.stop_reason)
        return self.report


def prepare(image: bytes, stack_top: int = STACK_TOP, strict_memory: bool = False) -> MachineState:
    """Fresh machine state with ``image`` loaded; the snapshot every run starts from."""
    state = MachineState(mem=Memory(strict=strict_memory))
    load_elf(image, state, stack_top=stack_top)
    return state


def explore(image: bytes, limits: Optional[ExploreLimits] = None, stack_top: int = STACK_TOP,
            strict_memory: bool = False, seed: int = 0, dump_smt: Optional[str] = None,
            on_run: Optional[Callable[[RunRecord], None]] = None) -> ExplorationReport:
    snapshot = prepare(image, stack_top=stack_top, strict_memory=strict_memory)
    return Explorer(snapshot, limits, seed=seed, dump_smt=dump_smt, on_run=on_run).explore()
