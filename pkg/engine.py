"""Program runs over concolic state, plus a plain concrete interpreter.

``ConcolicEngine.run`` is the fetch/decode/execute loop: it interprets the
effect sequences from ``isa.semantics_of`` pairwise (concrete value and z3
shadow term) and records a ``BranchEvent`` for every ``RunIf`` whose
condition depends on symbolic input. The concrete part always decides which
way a branch goes.

``ConcreteInterpreter`` walks the same sequences with ``eval_concrete`` over
plain integers. ``--mode concrete`` uses it, and so do the differential tests.

Hypercalls (ECALL, number in a7):
  1  exit(a0)
  2  make_symbolic(addr=a0, len=a1)
  3  putchar(a0 & 0xff)
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, List, Optional, Tuple, Union

import z3
from loguru import logger

from bvexpr import BvExpr, eval_concrete, leaves
from errors import (
    Breakpoint, IllegalInstruction, MisalignedPC, SymbolicBudgetExceeded, UnknownHypercall,
    UnmappedAccess,
)
from isa import (
    Ebreak, Ecall, LoadMem, ReadPC, ReadRegister, RunIf, Sequence, StoreMem, WritePC,
    WriteRegister, decode, semantics_of,
)
from machine import MASK32, ConcolicByte, ConcolicWord, MachineState, Memory
from solver import Model, SolverSession

HC_EXIT = 1
HC_MAKE_SYMBOLIC = 2
HC_PUTCHAR = 3

DEFAULT_STEP_LIMIT = 10 ** 7
# symbolic bytes one run may declare across all make_symbolic calls
DEFAULT_SYMBOLIC_BUDGET = 1 << 16

REG_A0 = 10
REG_A1 = 11
REG_A7 = 17

# concretization event kinds recorded by hypercalls
EV_HYPERCALL = 'symbolic-hypercall'
EV_OUTPUT = 'symbolic-output'


class FaultKind(Enum):
    BREAKPOINT = 'breakpoint'
    ILLEGAL_INSTRUCTION = 'illegal-instruction'
    MISALIGNED_PC = 'misaligned-pc'
    UNMAPPED_ACCESS = 'unmapped-access'
    UNKNOWN_HYPERCALL = 'unknown-hypercall'
    SYMBOLIC_BUDGET = 'symbolic-budget'


@dataclass(frozen=True)
class Exited:
    code: int

    def __str__(self):
        return f'Exited({self.code})'


@dataclass(frozen=True)
class StepLimit:
    def __str__(self):
        return 'StepLimit'


@dataclass(frozen=True)
class Fault:
    kind: FaultKind
    pc: int
    detail: str = ''

    def __str__(self):
        return f'Fault({self.kind.value}, 0x{self.pc:08x})'


ExitStatus = Union[Exited, StepLimit, Fault]

_FAULTS = {
    Breakpoint: FaultKind.BREAKPOINT,
    IllegalInstruction: FaultKind.ILLEGAL_INSTRUCTION,
    MisalignedPC: FaultKind.MISALIGNED_PC,
    UnmappedAccess: FaultKind.UNMAPPED_ACCESS,
    UnknownHypercall: FaultKind.UNKNOWN_HYPERCALL,
    SymbolicBudgetExceeded: FaultKind.SYMBOLIC_BUDGET,
}
_RUN_ERRORS = tuple(_FAULTS)


@dataclass(frozen=True, eq=False)
class BranchEvent:
    pc: int
    condition: z3.BitVecRef
    taken: bool


Trace = List[BranchEvent]


@dataclass(frozen=True)
class HypercallRecord:
    number: int
    args: Tuple[int, int]
    at_step: int


@dataclass
class RunResult:
    status: ExitStatus
    trace: Trace = field(default_factory=list)
    steps: int = 0
    # VarId names in declaration order -> concrete byte the run used
    inputs: Dict[str, int] = field(default_factory=dict)
    hypercalls: List[HypercallRecord] = field(default_factory=list)
    output: bytes = b''
    events: List[Tuple[str, str]] = field(default_factory=list)
    state: Optional[MachineState] = field(default=None, repr=False)

    @property
    def symbolic_inputs(self) -> List[str]:
        return list(self.inputs)

    @property
    def decisions(self) -> str:
        """Branch-decision string: one 'T' or 'F' per tracked branch."""
        return ''.join('T' if e.taken else 'F' for e in self.trace)


def fault_for(err: Exception, pc: int) -> Fault:
    return Fault(_FAULTS[type(err)], pc, str(err))


def check_symbolic_range(mem: Memory, addr: int, length: int, used: int, budget: int):
    """Reject a make_symbolic range before any byte of it is touched."""
    if used + length > budget:
        raise SymbolicBudgetExceeded(addr, length, budget - used)
    if addr + length > MASK32 + 1:
        raise UnmappedAccess(addr)
    mem.check_access(addr, length)


@dataclass
class _Frame:
    """Per-instruction bindings and the pending next pc."""
    instr_pc: int
    read_pc: int
    next_pc: int
    env: Dict[Any, ConcolicWord] = field(default_factory=dict)


@dataclass
class _RunContext:
    overrides: Model = field(default_factory=Model)
    callsites: int = 0
    inputs: Dict[str, int] = field(default_factory=dict)
    hypercalls: List[HypercallRecord] = field(default_factory=list)
    output: bytearray = field(default_factory=bytearray)
    symbolic_bytes: int = 0


def _identity(value: Any) -> Any:
    return value


def _word_width(_value: Any) -> int:
    return 32


def eval_concolic(e: BvExpr, session: SolverSession,
                  resolve: Callable[[Any], ConcolicWord] = _identity) -> ConcolicWord:
    """Evaluate ``e`` on both the concrete and the symbolic side.

    ``resolve`` maps leaf values to ConcolicWords. The symbolic part is only
    built when at least one leaf carries a term; concrete-only leaves then
    lower to constants.
    """
    concrete = eval_concrete(e, leaf_value=lambda v: resolve(v).concrete, leaf_width=_word_width)
    if not any(resolve(v).symbolic is not None for v in leaves(e)):
        return ConcolicWord(concrete)

    def leaf_term(v):
        w = resolve(v)
        return w.symbolic if w.symbolic is not None else session.const(w.concrete, 32)

    return ConcolicWord(concrete, session.lower(e, leaf_term))


class ConcolicEngine:
    """Runs programs over concolic state for one solver session.

    An engine instance handles one run at a time; use one engine per thread.
    """

    def __init__(self, session: SolverSession, step_limit: int = DEFAULT_STEP_LIMIT,
                 symbolic_budget: int = DEFAULT_SYMBOLIC_BUDGET):
        self.session = session
        self.step_limit = step_limit
        self.symbolic_budget = symbolic_budget
        self._run = _RunContext()

    def eval_concolic(self, e: BvExpr, env: Dict[Any, ConcolicWord]) -> ConcolicWord:
        return eval_concolic(e, self.session, env.__getitem__)

    def run(self, snapshot: MachineState, overrides: Optional[Model] = None,
            step_limit: Optional[int] = None) -> RunResult:
        """Execute from a fresh copy of ``snapshot`` until exit, fault or step limit.

        Bytes marked by make_symbolic take their value from ``overrides`` when
        present there and keep the snapshot's value otherwise.
        """
        limit = self.step_limit if step_limit is None else step_limit
        state = snapshot.clone()
        self._run = _RunContext(overrides=overrides or Model())
        trace: Trace = []
        status = None
        while status is None:
            if state.step_count >= limit:
                status = StepLimit()
                break
            instr_pc = state.pc
            try:
                seq = semantics_of(decode(state.fetch_instruction()))
                state.step_count += 1
                state.pc = self.exec_sequence(state, seq, instr_pc, trace)
            except _RUN_ERRORS as err:
                status = fault_for(err, instr_pc)
                state.events.append(('fault', f'{status}: {err}'))
                logger.debug('run faulted: {}', err)
                break
            if state.halted is not None:
                status = Exited(state.halted)

        run = self._run
        return RunResult(
            status=status,
            trace=trace,
            steps=state.step_count,
            inputs=dict(run.inputs),
            hypercalls=list(run.hypercalls),
            output=bytes(run.output),
            events=list(state.events),
            state=state,
        )

    def exec_sequence(self, state: MachineState, seq: Sequence, instr_pc: int, trace: Trace,
                      read_pc: Optional[int] = None) -> int:
        """Run one instruction's effect sequence and return the next pc.

        ReadPC yields ``instr_pc`` unless ``read_pc`` says otherwise (for
        sequences built with ``instr_pc_available=False``).
        """
        frame = _Frame(
            instr_pc=instr_pc,
            read_pc=instr_pc if read_pc is None else read_pc,
            next_pc=(instr_pc + 4) & MASK32,
        )
        self._exec(state, seq, frame, trace)
        return frame.next_pc

    def _exec(self, state: MachineState, seq: Sequence, frame: _Frame, trace: Trace):
        env = frame.env
        for op in seq:
            kind = type(op)
            if kind is ReadRegister:
                env[op.dest] = state.read_register(op.index)
            elif kind is WriteRegister:
                state.write_register(op.index, self.eval_concolic(op.value, env))
            elif kind is LoadMem:
                addr = self.eval_concolic(op.addr, env)
                env[op.dest] = state.load_mem(op.size, op.signed, addr)
            elif kind is StoreMem:
                addr = self.eval_concolic(op.addr, env)
                state.store_mem(op.size, addr, self.eval_concolic(op.value, env))
            elif kind is ReadPC:
                env[op.dest] = ConcolicWord(frame.read_pc)
            elif kind is WritePC:
                frame.next_pc = state.concretize(self.eval_concolic(op.target, env), 'symbolic-pc')
            elif kind is RunIf:
                cond = self.eval_concolic(op.condition, env)
                taken = cond.concrete != 0
                if cond.symbolic is not None:
                    trace.append(BranchEvent(frame.instr_pc, cond.symbolic, taken))
                if taken:
                    self._exec(state, op.body, frame, trace)
            elif kind is Ecall:
                self.handle_ecall(state)
            elif kind is Ebreak:
                raise Breakpoint(frame.instr_pc)

    def handle_ecall(self, state: MachineState) -> Optional[int]:
        """Dispatch on a7. Returns the exit code on exit, None to continue.

        Only the arguments a call uses are concretized; the exit code and
        putchar byte are recorded under EV_OUTPUT.
        """
        run = self._run
        number = state.concretize(state.read_register(REG_A7), EV_HYPERCALL)
        arg0, arg1 = state.read_register(REG_A0), state.read_register(REG_A1)
        if number == HC_MAKE_SYMBOLIC:
            a0 = state.concretize(arg0, EV_HYPERCALL)
            a1 = state.concretize(arg1, EV_HYPERCALL)
        elif number in (HC_EXIT, HC_PUTCHAR):
            a0, a1 = state.concretize(arg0, EV_OUTPUT), arg1.concrete
        else:
            a0, a1 = arg0.concrete, arg1.concrete
        run.hypercalls.append(HypercallRecord(number, (a0, a1), state.step_count))

        if number == HC_EXIT:
            state.halted = a0
            return a0
        if number == HC_MAKE_SYMBOLIC:
            self._make_symbolic(state, a0, a1)
            return None
        if number == HC_PUTCHAR:
            run.output.append(a0 & 0xFF)
            return None
        raise UnknownHypercall(number)

    def _make_symbolic(self, state: MachineState, addr: int, length: int):
        run = self._run
        check_symbolic_range(state.mem, addr, length, run.symbolic_bytes, self.symbolic_budget)
        run.symbolic_bytes += length
        callsite = run.callsites
        run.callsites += 1
        for offset in range(length):
            name = f'in_{callsite}_{offset}'
            term = self.session.lookup(name)
            if term is None:
                term = self.session.declare_var(name)
            a = addr + offset
            value = run.overrides.get(name, state.mem.read_byte(a).concrete)
            state.mem.write_byte(a, ConcolicByte(value, term))
            run.inputs[name] = value
        logger.debug('make_symbolic #{}: {} bytes at 0x{:08x}', callsite, length, addr)


class ConcreteInterpreter:
    """Executes the semantics table over plain integers.

    Starts from a loaded MachineState; symbolic parts of the state, if any,
    are ignored. make_symbolic is range- and budget-checked like in the
    concolic engine but leaves memory unchanged.
    """

    def __init__(self, state: MachineState, step_limit: int = DEFAULT_STEP_LIMIT,
                 symbolic_budget: int = DEFAULT_SYMBOLIC_BUDGET):
        self.regs: List[int] = [w.concrete for w in state.regs]
        self.mem = state.mem.clone()
        self.pc = state.pc
        self.next_pc = state.pc
        self.steps = 0
        self.step_limit = step_limit
        self.symbolic_budget = symbolic_budget
        self.symbolic_bytes = 0
        self.halted: Optional[int] = None
        self.output = bytearray()
        self.hypercalls: List[HypercallRecord] = []

    def read_register(self, index: int) -> int:
        return 0 if index == 0 else self.regs[index]

    def write_register(self, index: int, value: int):
        if index != 0:
            self.regs[index] = value & MASK32

    def load(self, addr: int, size: int, signed: bool) -> int:
        value = self.mem.read_concrete(addr, size)
        bits = 8 * size
        if signed and value >> (bits - 1):
            value |= MASK32 ^ ((1 << bits) - 1)
        return value

    def store(self, addr: int, size: int, value: int):
        self.mem.check_access(addr, size)
        self.mem.write_bytes(addr, (value & ((1 << (8 * size)) - 1)).to_bytes(size, 'little'))

    def step(self):
        """Execute one instruction; raises the machine/ISA errors directly."""
        if self.pc & 3:
            raise MisalignedPC(self.pc)
        instr_pc = self.pc
        seq = semantics_of(decode(self.mem.read_concrete(instr_pc, 4)))
        self.steps += 1
        self.next_pc = (instr_pc + 4) & MASK32
        self._exec(seq, instr_pc, {})
        self.pc = self.next_pc

    def _exec(self, seq: Sequence, instr_pc: int, env: Dict[Any, int]):
        def value(e):
            return eval_concrete(e, leaf_value=env.__getitem__)

        for op in seq:
            kind = type(op)
            if kind is ReadRegister:
                env[op.dest] = self.read_register(op.index)
            elif kind is WriteRegister:
                self.write_register(op.index, value(op.value))
            elif kind is LoadMem:
                env[op.dest] = self.load(value(op.addr), op.size.value, op.signed)
            elif kind is StoreMem:
                self.store(value(op.addr), op.size.value, value(op.value))
            elif kind is ReadPC:
                env[op.dest] = instr_pc
            elif kind is WritePC:
                self.next_pc = value(op.target)
            elif kind is RunIf:
                if value(op.condition):
                    self._exec(op.body, instr_pc, env)
            elif kind is Ecall:
                self._ecall()
            elif kind is Ebreak:
                raise Breakpoint(instr_pc)

    def _ecall(self):
        number = self.read_register(REG_A7)
        a0, a1 = self.read_register(REG_A0), self.read_register(REG_A1)
        self.hypercalls.append(HypercallRecord(number, (a0, a1), self.steps))
        if number == HC_EXIT:
            self.halted = a0
        elif number == HC_PUTCHAR:
            self.output.append(a0 & 0xFF)
        elif number == HC_MAKE_SYMBOLIC:
            check_symbolic_range(self.mem, a0, a1, self.symbolic_bytes, self.symbolic_budget)
            self.symbolic_bytes += a1
        else:
            raise UnknownHypercall(number)

    def run(self) -> RunResult:
        status = None
        while status is None:
            if self.steps >= self.step_limit:
                status = StepLimit()
                break
            instr_pc = self.pc
            try:
                self.step()
            except _RUN_ERRORS as err:
                status = fault_for(err, instr_pc)
                break
            if self.halted is not None:
                status = Exited(self.halted)
        return RunResult(status=status, steps=self.steps, hypercalls=list(self.hypercalls),
                         output=bytes(self.output))
