import random

import pytest

from bvexpr import Add, And, Eq, Leaf, Sll, SltU, Sub, const
from errors import IllegalInstruction
from isa import (
    BRANCHES, JUMPS, PC, RS1, RS2, ByteSize, Ebreak, Ecall, Instr, Mnemonic as M,
    ReadPC, ReadRegister, RunIf, Slot, StoreMem, WritePC, WriteRegister, decode, semantics_of,
)

from rvasm import read_corpus


def test_corpus_covers_every_mnemonic():
    seen = {text.split()[0] for _, text in read_corpus()}
    assert seen == {m.value for m in M}
    assert sum(1 for _ in read_corpus()) >= 1000


def test_decode_matches_reference_assembler():
    mismatches = []
    for word, text in read_corpus():
        got = str(decode(word))
        if got != text:
            mismatches.append((f'{word:08x}', text, got))
    assert mismatches == []


def test_decode_examples():
    assert decode(0x00000033) == Instr(M.ADD, rd=0, rs1=0, rs2=0)
    assert decode(0x00208463) == Instr(M.BEQ, rs1=1, rs2=2, imm=8)
    assert decode(0x00008067) == Instr(M.JALR, rd=0, rs1=1, imm=0)
    assert decode(0x0FF0000F) == Instr(M.FENCE)
    assert decode(0x00000073) == Instr(M.ECALL)
    assert decode(0x00100073) == Instr(M.EBREAK)


def test_decode_sign_extends_immediates():
    assert decode(0xFFF00093).imm == -1          # addi x1, x0, -1
    assert decode(0xFE000EE3).imm == -4          # beq x0, x0, -4
    assert decode(0xFFDFF0EF).imm == -4          # jal x1, -4
    assert decode(0x800000B7).imm == -0x80000000  # lui x1, 0x80000


@pytest.mark.parametrize('word', [
    0xFFFFFFFF,  # reserved opcode
    0x00000000,  # compressed quadrant 0
    0x00000001,  # c.nop
    0x00009067,  # jalr with funct3=1
    0x40001033,  # sll with funct7=0x20
    0x40001013,  # slli with funct7=0x20
    0x00002063,  # branch funct3=2
    0x00003003,  # ld
    0x00003023,  # sd
    0x0000100F,  # fence.i
    0x30001073,  # csrrw
    0x10500073,  # wfi
    0x0000007F,  # 48-bit+ encodings
])
def test_illegal_words(word):
    with pytest.raises(IllegalInstruction) as info:
        decode(word)
    assert info.value.word == word


def test_decode_is_total():
    rng = random.Random(11)
    for _ in range(20_000):
        word = rng.getrandbits(32)
        try:
            instr = decode(word)
        except IllegalInstruction:
            continue
        assert 0 <= instr.rd < 32 and 0 <= instr.rs1 < 32 and 0 <= instr.rs2 < 32
        assert 0 <= instr.shamt < 32
        if instr.mnemonic in BRANCHES or instr.mnemonic is M.JAL:
            assert instr.imm % 2 == 0


def test_beq_sequence():
    seq = semantics_of(Instr(M.BEQ, rs1=1, rs2=2, imm=8))
    assert seq == (
        ReadRegister(1, RS1),
        ReadRegister(2, RS2),
        RunIf(Eq(Leaf(RS1), Leaf(RS2)), (ReadPC(PC), WritePC(Add(Leaf(PC), const(8))))),
    )


def test_addi_sequence():
    seq = semantics_of(Instr(M.ADDI, rd=5, rs1=0, imm=42))
    assert seq == (ReadRegister(0, RS1), WriteRegister(5, Add(Leaf(RS1), const(42))))


def test_jump_and_memory_sequences():
    jal = semantics_of(Instr(M.JAL, rd=1, imm=-16))
    assert jal == (ReadPC(PC), WriteRegister(1, Add(Leaf(PC), const(4))),
                   WritePC(Add(Leaf(PC), const(-16))))

    jalr = semantics_of(Instr(M.JALR, rd=1, rs1=1, imm=4))
    assert jalr[0] == ReadRegister(1, RS1)
    assert jalr[-1] == WritePC(And(Add(Leaf(RS1), const(4)), const(0xFFFFFFFE)))

    lw = semantics_of(Instr(M.LW, rd=3, rs1=2, imm=-4))
    assert lw[1].size is ByteSize.WORD and lw[1].signed is False
    lb = semantics_of(Instr(M.LB, rd=3, rs1=2, imm=0))
    assert lb[1].size is ByteSize.BYTE and lb[1].signed is True

    sh = semantics_of(Instr(M.SH, rs1=2, rs2=7, imm=6))
    assert sh[-1] == StoreMem(ByteSize.HALF, Add(Leaf(RS1), const(6)), Leaf(RS2))


def test_register_shift_masks_amount():
    seq = semantics_of(Instr(M.SLL, rd=1, rs1=2, rs2=3))
    assert seq[-1] == WriteRegister(1, Sll(Leaf(RS1), And(Leaf(RS2), const(31))))
    sltu = semantics_of(Instr(M.SLTU, rd=1, rs1=2, rs2=3))
    assert sltu[-1] == WriteRegister(1, SltU(Leaf(RS1), Leaf(RS2)))


def test_system_sequences():
    assert semantics_of(Instr(M.ECALL)) == (Ecall(),)
    assert semantics_of(Instr(M.EBREAK)) == (Ebreak(),)
    assert semantics_of(Instr(M.FENCE)) == ()


def test_pc_relative_without_instr_pc():
    seq = semantics_of(Instr(M.AUIPC, rd=4, imm=0x1000), instr_pc_available=False)
    assert seq[-1] == WriteRegister(4, Add(Sub(Leaf(PC), const(4)), const(0x1000)))


def _run_ifs(seq):
    count = 0
    for op in seq:
        if isinstance(op, RunIf):
            count += 1 + _run_ifs(op.body)
    return count


def _check_single_assignment(seq, bound):
    for op in seq:
        for expr in _exprs(op):
            for leaf in _slot_leaves(expr):
                assert leaf in bound, f'{leaf} read before written in {seq}'
        if isinstance(op, RunIf):
            _check_single_assignment(op.body, set(bound))
        dest = getattr(op, 'dest', None)
        if dest is not None:
            assert dest not in bound, f'{dest} written twice'
            bound.add(dest)


def _exprs(op):
    for name in ('value', 'addr', 'target', 'condition'):
        if hasattr(op, name):
            yield getattr(op, name)


def _slot_leaves(e):
    if isinstance(e, Leaf):
        if isinstance(e.value, Slot):
            yield e.value
        return
    for name in ('lhs', 'rhs', 'inner'):
        if hasattr(e, name):
            yield from _slot_leaves(getattr(e, name))


def test_every_corpus_instruction_has_wellformed_semantics():
    for word, _ in read_corpus():
        instr = decode(word)
        for pc_available in (True, False):
            seq = semantics_of(instr, pc_available)
            _check_single_assignment(seq, set())
            if instr.mnemonic in BRANCHES:
                assert _run_ifs(seq) == 1
            elif instr.mnemonic not in JUMPS:
                assert _run_ifs(seq) == 0
