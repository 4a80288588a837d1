"""Concolic machine state: registers, byte-addressed memory, PC and ELF loading.

Every register and memory byte is a pair of a concrete value and an optional
z3 term. Memory is byte-granular; word-sized symbolic values are split into
``Extract`` terms on store and re-joined with ``Concat`` on load.

Addresses and the PC are always concrete. A symbolic address is replaced by
its concrete part and the concretization is recorded on the state.
"""

import io
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import z3
from elftools.elf.elffile import ELFFile
from loguru import logger

from errors import BadImage, MisalignedPC, OverlappingSegments, UnmappedAccess
from isa import ByteSize

MASK32 = 0xFFFFFFFF
STACK_TOP = 0x80000000
STACK_SIZE = 0x100000
NUM_REGS = 32


def _same_term(a, b) -> bool:
    if a is None or b is None:
        return a is b
    return a.eq(b)


@dataclass(frozen=True, eq=False)
class ConcolicWord:
    concrete: int
    symbolic: Optional[z3.BitVecRef] = None

    @property
    def is_symbolic(self) -> bool:
        return self.symbolic is not None

    def __eq__(self, other):
        if not isinstance(other, ConcolicWord):
            return NotImplemented
        return self.concrete == other.concrete and _same_term(self.symbolic, other.symbolic)

    def __hash__(self):
        return hash((self.concrete, None if self.symbolic is None else self.symbolic.hash()))

    def __repr__(self):
        sym = 'none' if self.symbolic is None else str(self.symbolic)
        return f'ConcolicWord(0x{self.concrete:08x}, {sym})'


@dataclass(frozen=True, eq=False)
class ConcolicByte:
    concrete: int
    symbolic: Optional[z3.BitVecRef] = None

    @property
    def is_symbolic(self) -> bool:
        return self.symbolic is not None

    def __eq__(self, other):
        if not isinstance(other, ConcolicByte):
            return NotImplemented
        return self.concrete == other.concrete and _same_term(self.symbolic, other.symbolic)

    def __hash__(self):
        return hash((self.concrete, None if self.symbolic is None else self.symbolic.hash()))


ZERO = ConcolicWord(0)


class Memory:
    """Sparse little-endian byte memory.

    Concrete bytes and symbolic terms live in separate maps so that the
    common all-concrete path is a plain dict lookup. With ``strict`` set,
    any access outside a mapped region raises UnmappedAccess; otherwise
    unwritten bytes read as zero.
    """

    def __init__(self, strict: bool = False):
        self.concrete: Dict[int, int] = {}
        self.symbolic: Dict[int, z3.BitVecRef] = {}
        self.regions: List[Tuple[int, int]] = []
        self.strict = strict

    def map_region(self, start: int, size: int):
        self.regions.append((start & MASK32, size))

    def is_mapped(self, addr: int) -> bool:
        return any(start <= addr < start + size for start, size in self.regions)

    def check_access(self, addr: int, size: int):
        if self.strict:
            for i in range(size):
                if not self.is_mapped((addr + i) & MASK32):
                    raise UnmappedAccess((addr + i) & MASK32)

    def read_byte(self, addr: int) -> ConcolicByte:
        addr &= MASK32
        return ConcolicByte(self.concrete.get(addr, 0), self.symbolic.get(addr))

    def write_byte(self, addr: int, byte: ConcolicByte):
        addr &= MASK32
        self.concrete[addr] = byte.concrete & 0xFF
        if byte.symbolic is None:
            self.symbolic.pop(addr, None)
        else:
            self.symbolic[addr] = byte.symbolic

    def write_bytes(self, addr: int, data: bytes):
        for i, b in enumerate(data):
            a = (addr + i) & MASK32
            self.concrete[a] = b
            self.symbolic.pop(a, None)

    def read_concrete(self, addr: int, size: int) -> int:
        self.check_access(addr, size)
        get = self.concrete.get
        value = 0
        for i in range(size):
            value |= get((addr + i) & MASK32, 0) << (8 * i)
        return value

    def load(self, addr: int, size: ByteSize, signed: bool) -> ConcolicWord:
        n = size.value
        self.check_access(addr, n)
        addrs = [(addr + i) & MASK32 for i in range(n)]
        concrete = 0
        for i, a in enumerate(addrs):
            concrete |= self.concrete.get(a, 0) << (8 * i)
        bits = 8 * n
        if signed and concrete >> (bits - 1):
            concrete |= MASK32 ^ ((1 << bits) - 1)

        syms = [self.symbolic.get(a) for a in addrs]
        if all(s is None for s in syms):
            return ConcolicWord(concrete)
        ctx = next(s for s in syms if s is not None).ctx
        parts = [
            s if s is not None else z3.BitVecVal(self.concrete.get(a, 0), 8, ctx=ctx)
            for a, s in zip(addrs, syms)
        ]
        parts.reverse()
        term = parts[0] if n == 1 else z3.Concat(*parts)
        if bits < 32:
            term = z3.SignExt(32 - bits, term) if signed else z3.ZeroExt(32 - bits, term)
        return ConcolicWord(concrete, term)

    def store(self, addr: int, size: ByteSize, value: ConcolicWord):
        n = size.value
        self.check_access(addr, n)
        for i in range(n):
            a = (addr + i) & MASK32
            self.concrete[a] = (value.concrete >> (8 * i)) & 0xFF
            if value.symbolic is None:
                self.symbolic.pop(a, None)
            else:
                self.symbolic[a] = z3.Extract(8 * i + 7, 8 * i, value.symbolic)

    def clone(self) -> 'Memory':
        m = Memory(self.strict)
        m.concrete = dict(self.concrete)
        m.symbolic = dict(self.symbolic)
        m.regions = list(self.regions)
        return m


@dataclass
class MachineState:
    regs: List[ConcolicWord] = field(default_factory=lambda: [ZERO] * NUM_REGS)
    mem: Memory = field(default_factory=Memory)
    pc: int = 0
    halted: Optional[int] = None
    step_count: int = 0
    # (event, details) pairs, same shape as the run store's logs table
    events: List[Tuple[str, str]] = field(default_factory=list)
    # (event, pc) pairs already in events; one entry per site per run
    concretized: Set[Tuple[str, int]] = field(default_factory=set)

    def read_register(self, index: int) -> ConcolicWord:
        if index == 0:
            return ZERO
        return self.regs[index]

    def write_register(self, index: int, value: ConcolicWord):
        if index != 0:
            self.regs[index] = value

    def concretize(self, value: ConcolicWord, event: str) -> int:
        if value.symbolic is not None and (event, self.pc) not in self.concretized:
            self.concretized.add((event, self.pc))
            logger.debug('{} at pc=0x{:08x} value=0x{:08x}', event, self.pc, value.concrete)
            self.events.append((event, f'pc=0x{self.pc:08x}'))
        return value.concrete & MASK32

    def load_mem(self, size: ByteSize, signed: bool, addr: ConcolicWord) -> ConcolicWord:
        return self.mem.load(self.concretize(addr, 'symbolic-address'), size, signed)

    def store_mem(self, size: ByteSize, addr: ConcolicWord, value: ConcolicWord):
        self.mem.store(self.concretize(addr, 'symbolic-address'), size, value)

    def fetch_instruction(self) -> int:
        """Concrete instruction word at pc; symbolic parts of code bytes are ignored."""
        if self.pc & 3:
            raise MisalignedPC(self.pc)
        return self.mem.read_concrete(self.pc, 4)

    def clone(self) -> 'MachineState':
        return MachineState(
            regs=list(self.regs),
            mem=self.mem.clone(),
            pc=self.pc,
            halted=self.halted,
            step_count=self.step_count,
            events=list(self.events),
            concretized=set(self.concretized),
        )


def _open_elf(image: bytes) -> ELFFile:
    if image[:4] != b'\x7fELF':
        raise BadImage('not an ELF file')
    try:
        elf = ELFFile(io.BytesIO(image))
    except Exception as e:
        # pyelftools raises ELFError or construct stream errors on truncated input
        raise BadImage(f'unreadable ELF: {e}') from e
    if elf.elfclass != 32:
        raise BadImage(f'expected ELF32, got ELF{elf.elfclass}')
    if not elf.little_endian:
        raise BadImage('expected little-endian image')
    if elf['e_machine'] != 'EM_RISCV':
        raise BadImage(f"expected RISC-V machine, got {elf['e_machine']}")
    if elf['e_type'] != 'ET_EXEC':
        raise BadImage(f"expected executable image, got {elf['e_type']}")
    return elf


def load_segments(elf: ELFFile) -> List[Tuple[int, bytes, int]]:
    """(vaddr, file bytes, mem_size) for each PT_LOAD; raises OverlappingSegments."""
    segments = []
    for seg in elf.iter_segments():
        if seg['p_type'] != 'PT_LOAD':
            continue
        segments.append((seg['p_vaddr'], seg.data(), seg['p_memsz']))
    ordered = sorted((s for s in segments if s[2]), key=lambda s: s[0])
    for (a, _, a_size), (b, _, _) in zip(ordered, ordered[1:]):
        if a + a_size > b:
            raise OverlappingSegments(f'segment at 0x{a:08x} (+0x{a_size:x}) overlaps 0x{b:08x}')
    return segments


def load_elf(image: bytes, state: MachineState,
             stack_top: int = STACK_TOP, stack_size: int = STACK_SIZE) -> int:
    """Copy PT_LOAD segments into ``state`` and return the entry point.

    Bytes between file size and memory size are zero-filled. x2 is set to
    ``stack_top`` and the stack below it is mapped for strict mode.
    """
    elf = _open_elf(image)
    for vaddr, data, mem_size in load_segments(elf):
        state.mem.write_bytes(vaddr, data)
        if mem_size > len(data):
            state.mem.write_bytes(vaddr + len(data), bytes(mem_size - len(data)))
        state.mem.map_region(vaddr, max(mem_size, len(data)))
    state.mem.map_region(stack_top - stack_size, stack_size)
    state.write_register(2, ConcolicWord(stack_top & MASK32))
    entry = elf['e_entry']
    state.pc = entry
    logger.debug('loaded image: entry=0x{:08x}, {} mapped regions', entry, len(state.mem.regions))
    return entry


def validate_image(path: str) -> dict:
    """Summarise an image without loading it; never raises."""
    try:
        with open(path, 'rb') as f:
            image = f.read()
    except OSError as e:
        return {'ok': False, 'reason': str(e)}
    try:
        elf = _open_elf(image)
        segments = load_segments(elf)
    except BadImage as e:
        return {'ok': False, 'reason': str(e)}
    return {
        'ok': True,
        'reason': '',
        'entry': elf['e_entry'],
        'segments': [
            {'vaddr': vaddr, 'file_size': len(data), 'mem_size': mem_size}
            for vaddr, data, mem_size in segments
        ],
    }
