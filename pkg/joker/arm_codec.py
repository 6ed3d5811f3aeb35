"""Decoder/encoder for the small ARM32 vocabulary found in vectors and vector_swi.

Only the ALways condition is recognised. Effective PC for pc-relative
operands is the fetch address plus 8.
"""

from dataclasses import dataclass

from .errors import EncodingError, NotPcRelativeError
from .mem_image import VirtAddr

COND_AL = 0xE
NOP_WORD = 0xE320F000
PC = 15
PIPELINE = 8
TABLE_REGISTER = 8  # r8 holds the syscall table base in vector_swi

_LDR_LITERAL_MASK, _LDR_LITERAL_BITS = 0x0F7F0000, 0x051F0000
_ADD_PC_MASK, _ADD_PC_BITS = 0x0FFF0000, 0x028F0000
_BRANCH_MASK, _BRANCH_BITS = 0x0F000000, 0x0A000000
_SVC_MASK, _SVC_BITS = 0x0F000000, 0x0F000000

_REG_NAMES = {13: "sp", 14: "lr", 15: "pc"}


@dataclass(frozen=True)
class LdrLiteral:
    rd: int
    add: bool
    imm12: int


@dataclass(frozen=True)
class AddPcImm:
    rd: int
    imm: int


@dataclass(frozen=True)
class Nop:
    pass


@dataclass(frozen=True)
class Branch:
    offset24: int


@dataclass(frozen=True)
class Svc:
    imm24: int


@dataclass(frozen=True)
class Unknown:
    pass


InstructionKind = LdrLiteral | AddPcImm | Nop | Branch | Svc | Unknown


@dataclass(frozen=True)
class Instruction:
    raw: int
    fetch_addr: VirtAddr
    kind: InstructionKind


def reg_name(index: int) -> str:
    return _REG_NAMES.get(index, f"r{index}")


def _ror32(value: int, amount: int) -> int:
    amount %= 32
    return ((value >> amount) | (value << (32 - amount))) & 0xFFFFFFFF


def _sign_extend24(value: int) -> int:
    return value - (1 << 24) if value & 0x800000 else value


def decode(word: int, fetch_addr: VirtAddr) -> Instruction:
    """Classify a 32-bit word; anything outside the vocabulary is Unknown."""
    word &= 0xFFFFFFFF
    kind: InstructionKind
    if word >> 28 != COND_AL:
        kind = Unknown()
    elif word == NOP_WORD:
        kind = Nop()
    elif word & _LDR_LITERAL_MASK == _LDR_LITERAL_BITS:
        kind = LdrLiteral(rd=(word >> 12) & 0xF, add=bool(word & (1 << 23)), imm12=word & 0xFFF)
    elif word & _ADD_PC_MASK == _ADD_PC_BITS:
        rotate = ((word >> 8) & 0xF) * 2
        kind = AddPcImm(rd=(word >> 12) & 0xF, imm=_ror32(word & 0xFF, rotate))
    elif word & _BRANCH_MASK == _BRANCH_BITS:
        kind = Branch(offset24=word & 0xFFFFFF)
    elif word & _SVC_MASK == _SVC_BITS:
        kind = Svc(imm24=word & 0xFFFFFF)
    else:
        kind = Unknown()
    return Instruction(raw=word, fetch_addr=fetch_addr, kind=kind)


def literal_target(i: Instruction) -> VirtAddr:
    """Address a pc-relative instruction reads from or branches to."""
    pc = i.fetch_addr + PIPELINE
    match i.kind:
        case LdrLiteral(add=add, imm12=imm12):
            target = pc + imm12 if add else pc - imm12
        case AddPcImm(imm=imm):
            target = pc + imm
        case Branch(offset24=offset24):
            target = pc + (_sign_extend24(offset24) << 2)
        case _:
            raise NotPcRelativeError(f"0x{i.raw:08x} has no pc-relative target")
    return target & 0xFFFFFFFF


def is_pc_relative(i: Instruction) -> bool:
    return isinstance(i.kind, (LdrLiteral, AddPcImm, Branch))


def is_pc_address_load(i: Instruction, rd: int) -> bool:
    """True for ``add rd, pc, #imm``, the form vector_swi uses to find its table."""
    return isinstance(i.kind, AddPcImm) and i.kind.rd == rd


def _check_register(rd: int) -> None:
    if not 0 <= rd <= 15:
        raise EncodingError(f"register index {rd} outside r0-r15")


def encode_ldr_pc_literal(rd: int, imm12: int, add: bool = True) -> int:
    """LDR rd, [pc, #+/-imm12] with the ALways condition."""
    _check_register(rd)
    if not 0 <= imm12 < 4096:
        raise EncodingError(f"literal offset {imm12} does not fit in 12 bits")
    return 0xE51F0000 | (int(add) << 23) | (rd << 12) | imm12


def encode_add_pc_imm(rd: int, imm: int) -> int:
    # rotation 0 only
    _check_register(rd)
    if not 0 <= imm <= 0xFF:
        raise EncodingError(f"immediate {imm} needs a rotation; only 8-bit values are encoded")
    return 0xE28F0000 | (rd << 12) | imm


def encode_branch(fetch_addr: VirtAddr, target: VirtAddr) -> int:
    delta = target - (fetch_addr + PIPELINE)
    if delta % 4 or not -(1 << 25) <= delta < (1 << 25):
        raise EncodingError(f"branch from 0x{fetch_addr:08x} to 0x{target:08x} out of range")
    return 0xEA000000 | ((delta >> 2) & 0xFFFFFF)


def encode_svc(imm24: int) -> int:
    if not 0 <= imm24 <= 0xFFFFFF:
        raise EncodingError(f"svc immediate 0x{imm24:x} does not fit in 24 bits")
    return 0xEF000000 | imm24


def disassemble_line(i: Instruction) -> str:
    match i.kind:
        case LdrLiteral(rd=rd, add=add, imm12=imm12):
            sign = "" if add else "-"
            return f"ldr {reg_name(rd)}, [pc, #{sign}{imm12}]"
        case AddPcImm(rd=rd, imm=imm):
            return f"add {reg_name(rd)}, pc, #{imm}"
        case Nop():
            return "nop"
        case Branch():
            return f"b 0x{literal_target(i):x}"
        case Svc(imm24=imm24):
            return f"svc 0x{imm24:x}"
        case _:
            return f".word 0x{i.raw:08x}"
