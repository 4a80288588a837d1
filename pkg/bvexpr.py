"""Width-annotated bit-vector expression language.

Every instruction's arithmetic is written in this vocabulary once and then
interpreted twice: concretely here (``eval_concrete``) and symbolically by
``solver.SolverSession.lower``. Leaves are polymorphic: the semantics table
uses binding slots, the concrete evaluator plain integers and the concolic
engine ``ConcolicWord`` values. Callers pass ``leaf_value``/``leaf_width`` to
say how a leaf is read.

Comparison nodes produce 0 or 1 at the width of their operands, so SLT-style
results can be written straight to a register.
"""

from dataclasses import dataclass
from typing import Any, Callable, Generic, Tuple, TypeVar, Union

from errors import MalformedExpression

V = TypeVar('V')

MAX_WIDTH = 64
WORD = 32
WORD_MASK = 0xFFFFFFFF


def check_width(bits: int) -> int:
    if not isinstance(bits, int) or not 1 <= bits <= MAX_WIDTH:
        raise MalformedExpression(f'width {bits!r} outside 1..{MAX_WIDTH}')
    return bits


def mask(bits: int) -> int:
    return (1 << bits) - 1


def to_signed(value: int, bits: int) -> int:
    value &= mask(bits)
    return value - (1 << bits) if value >> (bits - 1) else value


@dataclass(frozen=True)
class Leaf(Generic[V]):
    value: V


@dataclass(frozen=True)
class FromInt:
    width: int
    literal: int

    def __post_init__(self):
        check_width(self.width)
        if not 0 <= self.literal <= mask(self.width):
            raise MalformedExpression(f'literal {self.literal:#x} does not fit in {self.width} bits')


@dataclass(frozen=True)
class ZExt:
    extra_bits: int
    inner: 'BvExpr'


@dataclass(frozen=True)
class SExt:
    extra_bits: int
    inner: 'BvExpr'


@dataclass(frozen=True)
class Extract:
    low_bit: int
    width: int
    inner: 'BvExpr'


@dataclass(frozen=True)
class BinOp:
    lhs: 'BvExpr'
    rhs: 'BvExpr'


class Add(BinOp): pass
class Sub(BinOp): pass
class And(BinOp): pass
class Or(BinOp): pass
class Xor(BinOp): pass
class Sll(BinOp): pass
class Srl(BinOp): pass
class Sra(BinOp): pass
class Mul(BinOp): pass
class MulhSS(BinOp): pass
class MulhUU(BinOp): pass
class MulhSU(BinOp): pass
class DivS(BinOp): pass
class DivU(BinOp): pass
class RemS(BinOp): pass
class RemU(BinOp): pass


class Compare(BinOp):
    """Base of the comparison nodes; the result is 0/1 at operand width."""


class Eq(Compare): pass
class Neq(Compare): pass
class SltS(Compare): pass
class SgeS(Compare): pass
class SltU(Compare): pass
class SgeU(Compare): pass


BvExpr = Union[Leaf, FromInt, ZExt, SExt, Extract, BinOp]

BINARY_NODES: Tuple[type, ...] = (
    Add, Sub, And, Or, Xor, Sll, Srl, Sra, Mul, MulhSS, MulhUU, MulhSU,
    DivS, DivU, RemS, RemU,
)
COMPARISON_NODES: Tuple[type, ...] = (Eq, Neq, SltS, SgeS, SltU, SgeU)


def const(value: int, width: int = WORD) -> FromInt:
    """Literal helper; negative values are taken modulo 2**width."""
    return FromInt(width, value & mask(width))


def _word_width(_value: Any) -> int:
    return WORD


def _identity(value: Any) -> int:
    return value


def extended_width(e, inner_width: int) -> int:
    """Width after a ZExt/SExt node; the extension must not be negative."""
    if e.extra_bits < 0:
        raise MalformedExpression(f'negative extension {e.extra_bits}')
    return check_width(inner_width + e.extra_bits)


def width_of(e: BvExpr, leaf_width: Callable[[Any], int] = _word_width) -> int:
    """Result width of ``e``; raises MalformedExpression on width mismatches."""
    if isinstance(e, Leaf):
        return check_width(leaf_width(e.value))
    if isinstance(e, FromInt):
        return e.width
    if isinstance(e, (ZExt, SExt)):
        return extended_width(e, width_of(e.inner, leaf_width))
    if isinstance(e, Extract):
        inner = width_of(e.inner, leaf_width)
        check_width(e.width)
        if e.low_bit < 0 or e.low_bit + e.width > inner:
            raise MalformedExpression(
                f'extract [{e.low_bit}, {e.low_bit + e.width}) out of range for width {inner}')
        return e.width
    if isinstance(e, BinOp):
        lw = width_of(e.lhs, leaf_width)
        rw = width_of(e.rhs, leaf_width)
        if lw != rw:
            raise MalformedExpression(f'{type(e).__name__} operands have widths {lw} and {rw}')
        return lw
    raise MalformedExpression(f'not an expression: {e!r}')


def _div_s(a: int, b: int, bits: int) -> int:
    if b == 0:
        return mask(bits)
    sa, sb = to_signed(a, bits), to_signed(b, bits)
    q = abs(sa) // abs(sb)
    if (sa < 0) != (sb < 0):
        q = -q
    return q & mask(bits)


def _rem_s(a: int, b: int, bits: int) -> int:
    if b == 0:
        return a
    sa, sb = to_signed(a, bits), to_signed(b, bits)
    q = abs(sa) // abs(sb)
    if (sa < 0) != (sb < 0):
        q = -q
    return (sa - sb * q) & mask(bits)


def _sra(a: int, b: int, bits: int) -> int:
    return (to_signed(a, bits) >> min(b, bits - 1)) & mask(bits)


# (lhs, rhs, width) -> value; operands are already reduced modulo 2**width.
_CONCRETE_OPS = {
    Add: lambda a, b, w: (a + b) & mask(w),
    Sub: lambda a, b, w: (a - b) & mask(w),
    And: lambda a, b, w: a & b,
    Or: lambda a, b, w: a | b,
    Xor: lambda a, b, w: a ^ b,
    Sll: lambda a, b, w: (a << b) & mask(w) if b < w else 0,
    Srl: lambda a, b, w: a >> b if b < w else 0,
    Sra: _sra,
    Mul: lambda a, b, w: (a * b) & mask(w),
    MulhSS: lambda a, b, w: ((to_signed(a, w) * to_signed(b, w)) >> w) & mask(w),
    MulhUU: lambda a, b, w: (a * b) >> w,
    MulhSU: lambda a, b, w: ((to_signed(a, w) * b) >> w) & mask(w),
    DivS: _div_s,
    DivU: lambda a, b, w: a // b if b else mask(w),
    RemS: _rem_s,
    RemU: lambda a, b, w: a % b if b else a,
    Eq: lambda a, b, w: int(a == b),
    Neq: lambda a, b, w: int(a != b),
    SltS: lambda a, b, w: int(to_signed(a, w) < to_signed(b, w)),
    SgeS: lambda a, b, w: int(to_signed(a, w) >= to_signed(b, w)),
    SltU: lambda a, b, w: int(a < b),
    SgeU: lambda a, b, w: int(a >= b),
}


def _eval(e, leaf_value, leaf_width) -> Tuple[int, int]:
    if isinstance(e, Leaf):
        width = check_width(leaf_width(e.value))
        return leaf_value(e.value) & mask(width), width
    if isinstance(e, FromInt):
        return e.literal, e.width
    if isinstance(e, BinOp):
        a, lw = _eval(e.lhs, leaf_value, leaf_width)
        b, rw = _eval(e.rhs, leaf_value, leaf_width)
        if lw != rw:
            raise MalformedExpression(f'{type(e).__name__} operands have widths {lw} and {rw}')
        op = _CONCRETE_OPS.get(type(e))
        if op is None:
            raise MalformedExpression(f'unknown operator {type(e).__name__}')
        return op(a, b, lw), lw
    if isinstance(e, ZExt):
        value, width = _eval(e.inner, leaf_value, leaf_width)
        return value, extended_width(e, width)
    if isinstance(e, SExt):
        value, width = _eval(e.inner, leaf_value, leaf_width)
        out = extended_width(e, width)
        return to_signed(value, width) & mask(out), out
    if isinstance(e, Extract):
        value, width = _eval(e.inner, leaf_value, leaf_width)
        check_width(e.width)
        if e.low_bit < 0 or e.low_bit + e.width > width:
            raise MalformedExpression(
                f'extract [{e.low_bit}, {e.low_bit + e.width}) out of range for width {width}')
        return (value >> e.low_bit) & mask(e.width), e.width
    raise MalformedExpression(f'not an expression: {e!r}')


def eval_concrete(e: BvExpr,
                  leaf_value: Callable[[Any], int] = _identity,
                  leaf_width: Callable[[Any], int] = _word_width) -> int:
    """Evaluate ``e`` with modular arithmetic at each node's width.

    Division follows the RISC-V M convention and never traps. Shift amounts
    are used as-is; masking them to five bits is the instruction semantics'
    job.
    """
    return _eval(e, leaf_value, leaf_width)[0]


def leaves(e: BvExpr):
    """Yield every leaf value of ``e`` in left-to-right order."""
    if isinstance(e, Leaf):
        yield e.value
    elif isinstance(e, BinOp):
        yield from leaves(e.lhs)
        yield from leaves(e.rhs)
    elif isinstance(e, (ZExt, SExt, Extract)):
        yield from leaves(e.inner)
