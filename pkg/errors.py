"""Exception hierarchy for the concolic engine.

Errors raised inside a single program run are turned into ``Fault`` statuses
by the engine; only exploration-level invariant violations and setup errors
(bad image, bad config) reach the caller.
"""


class EngineError(Exception):
    """Root of every error raised by this package."""


class MalformedExpression(EngineError):
    pass


class IllegalInstruction(EngineError):
    def __init__(self, word: int, reason: str = 'unrecognized encoding'):
        super().__init__(f'illegal instruction 0x{word & 0xFFFFFFFF:08x}: {reason}')
        self.word = word & 0xFFFFFFFF
        self.reason = reason


class BadImage(EngineError):
    pass


class OverlappingSegments(BadImage):
    pass


class MisalignedPC(EngineError):
    def __init__(self, pc: int):
        super().__init__(f'misaligned pc 0x{pc:08x}')
        self.pc = pc


class UnmappedAccess(EngineError):
    def __init__(self, addr: int):
        super().__init__(f'access to unmapped address 0x{addr:08x}')
        self.addr = addr


class SymbolicBudgetExceeded(EngineError):
    def __init__(self, addr: int, length: int, remaining: int):
        super().__init__(
            f'make_symbolic of {length} bytes at 0x{addr:08x} exceeds the remaining '
            f'budget of {remaining} bytes'
        )
        self.addr = addr
        self.length = length
        self.remaining = remaining


class DuplicateVariable(EngineError):
    def __init__(self, name: str):
        super().__init__(f'variable {name!r} already declared in this session')
        self.name = name


class UnknownHypercall(EngineError):
    def __init__(self, number: int):
        super().__init__(f'unknown hypercall a7={number}')
        self.number = number


class InconsistentTrace(EngineError):
    def __init__(self, position: int, expected_pc: int, actual_pc: int):
        super().__init__(
            f'trace diverges from tree at branch #{position}: '
            f'tree has pc 0x{expected_pc:08x}, trace has 0x{actual_pc:08x}'
        )
        self.position = position
        self.expected_pc = expected_pc
        self.actual_pc = actual_pc


class ReplayDivergence(EngineError):
    """A run driven by a solver model did not follow the targeted prefix."""

    def __init__(self, position: int, expected: bool, observed):
        super().__init__(
            f'replay diverged at branch #{position}: expected taken={expected}, '
            f'observed {observed}'
        )
        self.position = position
        self.expected = expected
        self.observed = observed


class ConfigError(EngineError):
    pass


class Breakpoint(EngineError):
    def __init__(self, pc: int):
        super().__init__(f'ebreak at 0x{pc:08x}')
        self.pc = pc
