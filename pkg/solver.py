"""z3 adapter: variable declaration, expression lowering and satisfiability checks.

Each ``SolverSession`` owns a private ``z3.Context`` so independent
explorations can run on separate threads. Input variables are 8-bit; wider
symbolic values only arise by composing bytes in memory.
"""

import os
import time
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Iterable, Optional, Union

import z3
from loguru import logger

from bvexpr import (
    Add, And, BinOp, BvExpr, DivS, DivU, Eq, Extract, FromInt, Leaf, Mul, MulhSS,
    MulhSU, MulhUU, Neq, Or, RemS, RemU, SExt, SgeS, SgeU, Sll, SltS, SltU, Sra, Srl,
    Sub, Xor, ZExt, check_width, extended_width,
)
from errors import DuplicateVariable, MalformedExpression

INPUT_WIDTH = 8


@dataclass(frozen=True)
class VarId:
    name: str
    width: int = INPUT_WIDTH


@dataclass(frozen=True)
class Model:
    """Solver witness: variable name -> byte value."""
    values: Dict[str, int] = field(default_factory=dict)

    def get(self, name: str, default: Optional[int] = None) -> Optional[int]:
        return self.values.get(name, default)

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __len__(self) -> int:
        return len(self.values)


@dataclass(frozen=True)
class Sat:
    model: Model


@dataclass(frozen=True)
class Unsat:
    pass


@dataclass(frozen=True)
class Unknown:
    reason: str  # 'timeout' or 'solver-error'


SatResult = Union[Sat, Unsat, Unknown]


def _mulh(extend_a, extend_b):
    def op(a, b):
        w = a.size()
        return z3.Extract(2 * w - 1, w, extend_a(w, a) * extend_b(w, b))
    return op


def _div_s(a, b):
    w = a.size()
    return z3.If(b == z3.BitVecVal(0, w, a.ctx), z3.BitVecVal(-1, w, a.ctx), a / b)


def _flag(pred_of):
    def op(a, b):
        w = a.size()
        return z3.If(pred_of(a, b), z3.BitVecVal(1, w, a.ctx), z3.BitVecVal(0, w, a.ctx))
    return op


_Z3_OPS = {
    Add: lambda a, b: a + b,
    Sub: lambda a, b: a - b,
    And: lambda a, b: a & b,
    Or: lambda a, b: a | b,
    Xor: lambda a, b: a ^ b,
    Sll: lambda a, b: a << b,
    Srl: z3.LShR,
    Sra: lambda a, b: a >> b,
    Mul: lambda a, b: a * b,
    MulhSS: _mulh(z3.SignExt, z3.SignExt),
    MulhUU: _mulh(z3.ZeroExt, z3.ZeroExt),
    MulhSU: _mulh(z3.SignExt, z3.ZeroExt),
    # bvsdiv by zero yields 1 for negative dividends; RISC-V wants -1
    DivS: _div_s,
    DivU: z3.UDiv,
    RemS: z3.SRem,
    RemU: z3.URem,
    Eq: _flag(lambda a, b: a == b),
    Neq: _flag(lambda a, b: a != b),
    SltS: _flag(lambda a, b: a < b),
    SgeS: _flag(lambda a, b: a >= b),
    SltU: _flag(z3.ULT),
    SgeU: _flag(z3.UGE),
}


def _identity(value: Any) -> Any:
    return value


class SolverSession:
    def __init__(self, timeout_s: float = 30.0, seed: int = 0, dump_smt: Optional[str] = None):
        self.ctx = z3.Context()
        self.timeout_s = timeout_s
        self.seed = seed
        self.dump_smt = dump_smt
        self.vars: Dict[str, z3.BitVecRef] = {}
        self.stats = {'queries': 0, 'sat': 0, 'unsat': 0, 'unknown': 0, 'seconds': 0.0}
        if dump_smt:
            os.makedirs(dump_smt, exist_ok=True)

    def declare_var(self, var: Union[VarId, str]) -> z3.BitVecRef:
        if isinstance(var, str):
            var = VarId(var)
        if var.name in self.vars:
            raise DuplicateVariable(var.name)
        term = z3.BitVec(var.name, check_width(var.width), ctx=self.ctx)
        self.vars[var.name] = term
        return term

    def lookup(self, name: str) -> Optional[z3.BitVecRef]:
        return self.vars.get(name)

    def const(self, value: int, width: int = 32) -> z3.BitVecRef:
        return z3.BitVecVal(value, width, ctx=self.ctx)

    def lower(self, e: BvExpr, leaf: Callable[[Any], z3.BitVecRef] = _identity) -> z3.BitVecRef:
        """Translate ``e`` into a z3 term; ``leaf`` maps leaf values to terms."""
        if isinstance(e, Leaf):
            term = leaf(e.value)
            if not z3.is_bv(term):
                raise MalformedExpression(f'leaf {e.value!r} did not lower to a bit-vector')
            return term
        if isinstance(e, FromInt):
            return z3.BitVecVal(e.literal, e.width, ctx=self.ctx)
        if isinstance(e, BinOp):
            a = self.lower(e.lhs, leaf)
            b = self.lower(e.rhs, leaf)
            if a.size() != b.size():
                raise MalformedExpression(
                    f'{type(e).__name__} operands have widths {a.size()} and {b.size()}')
            op = _Z3_OPS.get(type(e))
            if op is None:
                raise MalformedExpression(f'unknown operator {type(e).__name__}')
            return op(a, b)
        if isinstance(e, ZExt):
            inner = self.lower(e.inner, leaf)
            extended_width(e, inner.size())
            return z3.ZeroExt(e.extra_bits, inner) if e.extra_bits else inner
        if isinstance(e, SExt):
            inner = self.lower(e.inner, leaf)
            extended_width(e, inner.size())
            return z3.SignExt(e.extra_bits, inner) if e.extra_bits else inner
        if isinstance(e, Extract):
            inner = self.lower(e.inner, leaf)
            check_width(e.width)
            if e.low_bit < 0 or e.low_bit + e.width > inner.size():
                raise MalformedExpression(
                    f'extract [{e.low_bit}, {e.low_bit + e.width}) out of range for width {inner.size()}')
            return z3.Extract(e.low_bit + e.width - 1, e.low_bit, inner)
        raise MalformedExpression(f'not an expression: {e!r}')

    def truthy(self, term) -> z3.BoolRef:
        """Bit-vector conditions are true when non-zero; booleans pass through."""
        if z3.is_bool(term):
            return term
        return term != z3.BitVecVal(0, term.size(), ctx=self.ctx)

    def check(self, assertions: Iterable, timeout_s: Optional[float] = None) -> SatResult:
        """Check the conjunction of ``assertions``; ``timeout_s`` overrides the session timeout."""
        solver = z3.Solver(ctx=self.ctx)
        timeout_s = self.timeout_s if timeout_s is None else timeout_s
        solver.set('timeout', max(1, int(timeout_s * 1000)))
        solver.set('random_seed', self.seed)
        for a in assertions:
            solver.add(self.truthy(a))
        self.stats['queries'] += 1
        if self.dump_smt:
            self._dump(solver)

        started = time.perf_counter()
        try:
            result = solver.check()
        except z3.Z3Exception as e:
            logger.error('solver error on query #{}: {}', self.stats['queries'], e)
            self.stats['unknown'] += 1
            return Unknown('solver-error')
        finally:
            self.stats['seconds'] += time.perf_counter() - started

        if result == z3.sat:
            self.stats['sat'] += 1
            return Sat(self._model(solver.model()))
        if result == z3.unsat:
            self.stats['unsat'] += 1
            return Unsat()
        reason = solver.reason_unknown()
        self.stats['unknown'] += 1
        logger.debug('query #{} unknown: {}', self.stats['queries'], reason)
        return Unknown('timeout' if 'timeout' in reason or 'canceled' in reason else 'solver-error')

    def _model(self, m: z3.ModelRef) -> Model:
        # Only variables the solver assigned; the rest keep their seed bytes.
        values = {}
        for decl in m.decls():
            name = decl.name()
            if name in self.vars:
                values[name] = m[decl].as_long()
        return Model(values)

    def _dump(self, solver: z3.Solver):
        path = os.path.join(self.dump_smt, f"query-{self.stats['queries']:05d}.smt2")
        with open(path, 'w') as f:
            f.write('(set-logic QF_BV)\n')
            f.write(solver.to_smt2())
