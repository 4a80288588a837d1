"""RV32IM decoding and instruction semantics.

``decode`` turns a 32-bit word into an ``Instr``; ``semantics_of`` gives that
instruction its one and only meaning as a flat sequence of effect operations
over ``bvexpr`` expressions. Values produced by an operation are bound to a
``Slot`` and referenced by later operations through ``Leaf(slot)``; each slot
is written once per sequence.

Nothing here knows whether values are concrete or concolic. The concrete
interpreter and the concolic engine in ``engine`` both walk the same
sequences.
"""

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Tuple, Union

from bvexpr import (
    Add, And, BvExpr, DivS, DivU, Eq, Leaf, Mul, MulhSS, MulhSU, MulhUU, Neq, Or,
    RemS, RemU, SgeS, SgeU, Sll, SltS, SltU, Sra, Srl, Sub, Xor, const,
)
from errors import IllegalInstruction


class Mnemonic(Enum):
    LUI = 'lui'
    AUIPC = 'auipc'
    JAL = 'jal'
    JALR = 'jalr'
    BEQ = 'beq'
    BNE = 'bne'
    BLT = 'blt'
    BGE = 'bge'
    BLTU = 'bltu'
    BGEU = 'bgeu'
    LB = 'lb'
    LH = 'lh'
    LW = 'lw'
    LBU = 'lbu'
    LHU = 'lhu'
    SB = 'sb'
    SH = 'sh'
    SW = 'sw'
    ADDI = 'addi'
    SLTI = 'slti'
    SLTIU = 'sltiu'
    XORI = 'xori'
    ORI = 'ori'
    ANDI = 'andi'
    SLLI = 'slli'
    SRLI = 'srli'
    SRAI = 'srai'
    ADD = 'add'
    SUB = 'sub'
    SLL = 'sll'
    SLT = 'slt'
    SLTU = 'sltu'
    XOR = 'xor'
    SRL = 'srl'
    SRA = 'sra'
    OR = 'or'
    AND = 'and'
    FENCE = 'fence'
    ECALL = 'ecall'
    EBREAK = 'ebreak'
    MUL = 'mul'
    MULH = 'mulh'
    MULHSU = 'mulhsu'
    MULHU = 'mulhu'
    DIV = 'div'
    DIVU = 'divu'
    REM = 'rem'
    REMU = 'remu'


M = Mnemonic

BRANCHES = frozenset({M.BEQ, M.BNE, M.BLT, M.BGE, M.BLTU, M.BGEU})
JUMPS = frozenset({M.JAL, M.JALR})
LOADS = frozenset({M.LB, M.LH, M.LW, M.LBU, M.LHU})
STORES = frozenset({M.SB, M.SH, M.SW})
SHIFT_IMMEDIATES = frozenset({M.SLLI, M.SRLI, M.SRAI})
REG_IMMEDIATES = frozenset({M.ADDI, M.SLTI, M.SLTIU, M.XORI, M.ORI, M.ANDI})
REG_REG = frozenset({
    M.ADD, M.SUB, M.SLL, M.SLT, M.SLTU, M.XOR, M.SRL, M.SRA, M.OR, M.AND,
    M.MUL, M.MULH, M.MULHSU, M.MULHU, M.DIV, M.DIVU, M.REM, M.REMU,
})


class ByteSize(Enum):
    BYTE = 1
    HALF = 2
    WORD = 4


@dataclass(frozen=True)
class Instr:
    mnemonic: Mnemonic
    rd: int = 0
    rs1: int = 0
    rs2: int = 0
    imm: int = 0
    shamt: int = 0

    def __str__(self) -> str:
        m = self.mnemonic
        name = m.value
        if m in REG_REG:
            return f'{name} x{self.rd}, x{self.rs1}, x{self.rs2}'
        if m in REG_IMMEDIATES:
            return f'{name} x{self.rd}, x{self.rs1}, {self.imm}'
        if m in SHIFT_IMMEDIATES:
            return f'{name} x{self.rd}, x{self.rs1}, {self.shamt}'
        if m in LOADS or m is M.JALR:
            return f'{name} x{self.rd}, {self.imm}(x{self.rs1})'
        if m in STORES:
            return f'{name} x{self.rs2}, {self.imm}(x{self.rs1})'
        if m in BRANCHES:
            return f'{name} x{self.rs1}, x{self.rs2}, {self.imm}'
        if m in (M.LUI, M.AUIPC):
            return f'{name} x{self.rd}, {(self.imm >> 12) & 0xFFFFF}'
        if m is M.JAL:
            return f'{name} x{self.rd}, {self.imm}'
        return name


# -- effect operations -------------------------------------------------------

@dataclass(frozen=True)
class Slot:
    """Binding slot written by one operation and read by later ones."""
    name: str


@dataclass(frozen=True)
class ReadRegister:
    index: int
    dest: Slot


@dataclass(frozen=True)
class WriteRegister:
    index: int
    value: BvExpr


@dataclass(frozen=True)
class LoadMem:
    size: ByteSize
    signed: bool
    addr: BvExpr
    dest: Slot


@dataclass(frozen=True)
class StoreMem:
    size: ByteSize
    addr: BvExpr
    value: BvExpr


@dataclass(frozen=True)
class ReadPC:
    dest: Slot


@dataclass(frozen=True)
class WritePC:
    target: BvExpr


@dataclass(frozen=True)
class RunIf:
    condition: BvExpr
    body: Tuple['Operation', ...]


@dataclass(frozen=True)
class Ecall:
    pass


@dataclass(frozen=True)
class Ebreak:
    pass


Operation = Union[ReadRegister, WriteRegister, LoadMem, StoreMem, ReadPC, WritePC, RunIf, Ecall, Ebreak]
Sequence = Tuple[Operation, ...]


# -- decoding ----------------------------------------------------------------

def _sext(value: int, bits: int) -> int:
    value &= (1 << bits) - 1
    return value - (1 << bits) if value >> (bits - 1) else value


_BRANCH_F3 = {0: M.BEQ, 1: M.BNE, 4: M.BLT, 5: M.BGE, 6: M.BLTU, 7: M.BGEU}
_LOAD_F3 = {0: M.LB, 1: M.LH, 2: M.LW, 4: M.LBU, 5: M.LHU}
_STORE_F3 = {0: M.SB, 1: M.SH, 2: M.SW}
_OPIMM_F3 = {0: M.ADDI, 2: M.SLTI, 3: M.SLTIU, 4: M.XORI, 6: M.ORI, 7: M.ANDI}
_OP_F7_F3 = {
    (0x00, 0): M.ADD, (0x20, 0): M.SUB, (0x00, 1): M.SLL, (0x00, 2): M.SLT,
    (0x00, 3): M.SLTU, (0x00, 4): M.XOR, (0x00, 5): M.SRL, (0x20, 5): M.SRA,
    (0x00, 6): M.OR, (0x00, 7): M.AND,
    (0x01, 0): M.MUL, (0x01, 1): M.MULH, (0x01, 2): M.MULHSU, (0x01, 3): M.MULHU,
    (0x01, 4): M.DIV, (0x01, 5): M.DIVU, (0x01, 6): M.REM, (0x01, 7): M.REMU,
}

ECALL_WORD = 0x00000073
EBREAK_WORD = 0x00100073


@lru_cache(maxsize=65536)
def decode(word: int) -> Instr:
    """Decode one RV32IM instruction word; raises IllegalInstruction."""
    word &= 0xFFFFFFFF
    if word & 0b11 != 0b11:
        raise IllegalInstruction(word, 'compressed encodings are not supported')
    opcode = word & 0x7F
    rd = (word >> 7) & 0x1F
    funct3 = (word >> 12) & 0x7
    rs1 = (word >> 15) & 0x1F
    rs2 = (word >> 20) & 0x1F
    funct7 = word >> 25

    if opcode == 0x37:
        return Instr(M.LUI, rd=rd, imm=_sext(word & 0xFFFFF000, 32))
    if opcode == 0x17:
        return Instr(M.AUIPC, rd=rd, imm=_sext(word & 0xFFFFF000, 32))
    if opcode == 0x6F:
        imm = (((word >> 31) & 1) << 20 | ((word >> 12) & 0xFF) << 12
               | ((word >> 20) & 1) << 11 | ((word >> 21) & 0x3FF) << 1)
        return Instr(M.JAL, rd=rd, imm=_sext(imm, 21))
    if opcode == 0x67:
        if funct3 != 0:
            raise IllegalInstruction(word, 'bad funct3 for jalr')
        return Instr(M.JALR, rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if opcode == 0x63:
        mnemonic = _BRANCH_F3.get(funct3)
        if mnemonic is None:
            raise IllegalInstruction(word, 'bad funct3 for branch')
        imm = (((word >> 31) & 1) << 12 | ((word >> 7) & 1) << 11
               | ((word >> 25) & 0x3F) << 5 | ((word >> 8) & 0xF) << 1)
        return Instr(mnemonic, rs1=rs1, rs2=rs2, imm=_sext(imm, 13))
    if opcode == 0x03:
        mnemonic = _LOAD_F3.get(funct3)
        if mnemonic is None:
            raise IllegalInstruction(word, 'bad funct3 for load')
        return Instr(mnemonic, rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if opcode == 0x23:
        mnemonic = _STORE_F3.get(funct3)
        if mnemonic is None:
            raise IllegalInstruction(word, 'bad funct3 for store')
        imm = (funct7 << 5) | rd
        return Instr(mnemonic, rs1=rs1, rs2=rs2, imm=_sext(imm, 12))
    if opcode == 0x13:
        if funct3 == 1:
            if funct7 != 0:
                raise IllegalInstruction(word, 'bad funct7 for slli')
            return Instr(M.SLLI, rd=rd, rs1=rs1, shamt=rs2)
        if funct3 == 5:
            if funct7 == 0x00:
                return Instr(M.SRLI, rd=rd, rs1=rs1, shamt=rs2)
            if funct7 == 0x20:
                return Instr(M.SRAI, rd=rd, rs1=rs1, shamt=rs2)
            raise IllegalInstruction(word, 'bad funct7 for shift immediate')
        return Instr(_OPIMM_F3[funct3], rd=rd, rs1=rs1, imm=_sext(word >> 20, 12))
    if opcode == 0x33:
        mnemonic = _OP_F7_F3.get((funct7, funct3))
        if mnemonic is None:
            raise IllegalInstruction(word, 'bad funct7/funct3 for register op')
        return Instr(mnemonic, rd=rd, rs1=rs1, rs2=rs2)
    if opcode == 0x0F:
        if funct3 != 0:
            raise IllegalInstruction(word, 'only fence is supported in MISC-MEM')
        return Instr(M.FENCE)
    if opcode == 0x73:
        if word == ECALL_WORD:
            return Instr(M.ECALL)
        if word == EBREAK_WORD:
            return Instr(M.EBREAK)
        raise IllegalInstruction(word, 'privileged or CSR instruction')
    raise IllegalInstruction(word, f'unknown opcode 0x{opcode:02x}')


# -- semantics ---------------------------------------------------------------

RS1 = Slot('rs1')
RS2 = Slot('rs2')
PC = Slot('pc')
LOADED = Slot('loaded')

_rs1 = Leaf(RS1)
_rs2 = Leaf(RS2)

_BRANCH_CMP = {M.BEQ: Eq, M.BNE: Neq, M.BLT: SltS, M.BGE: SgeS, M.BLTU: SltU, M.BGEU: SgeU}
_LOAD_SHAPE = {
    M.LB: (ByteSize.BYTE, True), M.LH: (ByteSize.HALF, True), M.LW: (ByteSize.WORD, False),
    M.LBU: (ByteSize.BYTE, False), M.LHU: (ByteSize.HALF, False),
}
_STORE_SIZE = {M.SB: ByteSize.BYTE, M.SH: ByteSize.HALF, M.SW: ByteSize.WORD}
_IMM_OP = {M.ADDI: Add, M.SLTI: SltS, M.SLTIU: SltU, M.XORI: Xor, M.ORI: Or, M.ANDI: And}
_SHIFT_IMM_OP = {M.SLLI: Sll, M.SRLI: Srl, M.SRAI: Sra}
_REG_OP = {
    M.ADD: Add, M.SUB: Sub, M.SLT: SltS, M.SLTU: SltU, M.XOR: Xor, M.OR: Or, M.AND: And,
    M.MUL: Mul, M.MULH: MulhSS, M.MULHSU: MulhSU, M.MULHU: MulhUU,
    M.DIV: DivS, M.DIVU: DivU, M.REM: RemS, M.REMU: RemU,
}
_REG_SHIFT_OP = {M.SLL: Sll, M.SRL: Srl, M.SRA: Sra}


@lru_cache(maxsize=65536)
def semantics_of(instr: Instr, instr_pc_available: bool = True) -> Sequence:
    """Return the effect sequence of ``instr``.

    The engine sets next-pc to pc+4 before running a sequence, so only jumps
    and taken branches write the PC. With ``instr_pc_available`` false the
    sequence assumes ReadPC yields that already-incremented value and
    subtracts 4 itself.
    """
    m = instr.mnemonic
    pc = Leaf(PC) if instr_pc_available else Sub(Leaf(PC), const(4))
    imm = const(instr.imm)

    if m in REG_IMMEDIATES:
        return (ReadRegister(instr.rs1, RS1), WriteRegister(instr.rd, _IMM_OP[m](_rs1, imm)))
    if m in SHIFT_IMMEDIATES:
        return (ReadRegister(instr.rs1, RS1),
                WriteRegister(instr.rd, _SHIFT_IMM_OP[m](_rs1, const(instr.shamt))))
    if m in _REG_SHIFT_OP:
        return (ReadRegister(instr.rs1, RS1), ReadRegister(instr.rs2, RS2),
                WriteRegister(instr.rd, _REG_SHIFT_OP[m](_rs1, And(_rs2, const(31)))))
    if m in _REG_OP:
        return (ReadRegister(instr.rs1, RS1), ReadRegister(instr.rs2, RS2),
                WriteRegister(instr.rd, _REG_OP[m](_rs1, _rs2)))
    if m in BRANCHES:
        return (ReadRegister(instr.rs1, RS1), ReadRegister(instr.rs2, RS2),
                RunIf(_BRANCH_CMP[m](_rs1, _rs2), (ReadPC(PC), WritePC(Add(pc, imm)))))
    if m in LOADS:
        size, signed = _LOAD_SHAPE[m]
        return (ReadRegister(instr.rs1, RS1),
                LoadMem(size, signed, Add(_rs1, imm), LOADED),
                WriteRegister(instr.rd, Leaf(LOADED)))
    if m in STORES:
        return (ReadRegister(instr.rs1, RS1), ReadRegister(instr.rs2, RS2),
                StoreMem(_STORE_SIZE[m], Add(_rs1, imm), _rs2))
    if m is M.LUI:
        return (WriteRegister(instr.rd, imm),)
    if m is M.AUIPC:
        return (ReadPC(PC), WriteRegister(instr.rd, Add(pc, imm)))
    if m is M.JAL:
        return (ReadPC(PC), WriteRegister(instr.rd, Add(pc, const(4))), WritePC(Add(pc, imm)))
    if m is M.JALR:
        # rs1 is read before rd is written so that jalr x1, 0(x1) works
        return (ReadRegister(instr.rs1, RS1), ReadPC(PC),
                WriteRegister(instr.rd, Add(pc, const(4))),
                WritePC(And(Add(_rs1, imm), const(0xFFFFFFFE))))
    if m is M.ECALL:
        return (Ecall(),)
    if m is M.EBREAK:
        return (Ebreak(),)
    if m is M.FENCE:
        return ()
    raise AssertionError(f'no semantics for {m}')
