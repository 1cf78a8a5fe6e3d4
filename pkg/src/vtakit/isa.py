"""Bit-exact codec for 128-bit VTA instructions and 32-bit micro-ops.

Every instruction is one 128-bit little-endian word.  Bits are numbered from
the LSB; fields are packed LSB-first in the order they are declared below.

  [0:3)   opcode          LOAD=0 STORE=1 GEMM=2 FINISH=3 ALU=4
  [3:7)   dependency flags: pop_prev, pop_next, push_prev, push_next

LOAD/STORE   buffer_id:3 (UOP=0 WGT=1 INP=2 ACC=3 OUT=4)  sram_base:16
             dram_base:32  y_size:16  x_size:16  x_stride:16
             y_pad_top:4  y_pad_bottom:4  x_pad_left:4  x_pad_right:4
GEMM         reset:1  uop_begin:13  uop_end:14  lp_out:14  lp_in:14
             acc_factor_out:11  acc_factor_in:11  inp_factor_out:11
             inp_factor_in:11   wgt_factor_out:10  wgt_factor_in:10
ALU          reset:1  uop_begin:13  uop_end:14  lp_out:14  lp_in:14
             dst_factor_out:11  dst_factor_in:11  src_factor_out:11
             src_factor_in:11   alu_opcode:2 (MIN=0 MAX=1 ADD=2 SHR=3)
             use_imm:1  imm:16 (two's complement)
FINISH       no extra fields

A micro-op is one 32-bit little-endian word:

  acc_idx [0:11)   inp_idx [11:22)   wgt_idx [22:32)
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

from .errors import ToolchainError

INSTR_BYTES = 16
UOP_BYTES = 4


class EncodeError(ToolchainError):
    """A field value does not fit its declared bit width."""


class DecodeError(ToolchainError):
    """A byte stream is not a valid instruction or micro-op sequence."""


class Opcode(IntEnum):
    LOAD = 0
    STORE = 1
    GEMM = 2
    FINISH = 3
    ALU = 4


class BufferId(IntEnum):
    UOP = 0
    WGT = 1
    INP = 2
    ACC = 3
    OUT = 4


class AluOpcode(IntEnum):
    MIN = 0
    MAX = 1
    ADD = 2
    SHR = 3


@dataclass(frozen=True)
class DepFlags:
    pop_prev: int = 0
    pop_next: int = 0
    push_prev: int = 0
    push_next: int = 0

    def as_bits(self) -> int:
        return (self.pop_prev | self.pop_next << 1
                | self.push_prev << 2 | self.push_next << 3)

    @classmethod
    def from_bits(cls, bits: int) -> "DepFlags":
        return cls(bits & 1, bits >> 1 & 1, bits >> 2 & 1, bits >> 3 & 1)


NO_DEPS = DepFlags()


@dataclass(frozen=True)
class MemInstr:
    """LOAD or STORE of a 2D grid of structures between DRAM and SRAM."""

    opcode: Opcode
    buffer_id: BufferId
    sram_base: int = 0
    dram_base: int = 0
    y_size: int = 0
    x_size: int = 0
    x_stride: int = 0
    y_pad_top: int = 0
    y_pad_bottom: int = 0
    x_pad_left: int = 0
    x_pad_right: int = 0
    deps: DepFlags = NO_DEPS


@dataclass(frozen=True)
class GemmInstr:
    uop_begin: int
    uop_end: int
    lp_out: int
    lp_in: int
    acc_factor_out: int = 0
    acc_factor_in: int = 0
    inp_factor_out: int = 0
    inp_factor_in: int = 0
    wgt_factor_out: int = 0
    wgt_factor_in: int = 0
    reset: int = 0
    deps: DepFlags = NO_DEPS


@dataclass(frozen=True)
class AluInstr:
    alu_opcode: AluOpcode
    uop_begin: int
    uop_end: int
    lp_out: int
    lp_in: int
    dst_factor_out: int = 0
    dst_factor_in: int = 0
    src_factor_out: int = 0
    src_factor_in: int = 0
    use_imm: int = 0
    imm: int = 0
    reset: int = 0
    deps: DepFlags = NO_DEPS


@dataclass(frozen=True)
class FinishInstr:
    deps: DepFlags = NO_DEPS


Instruction = MemInstr | GemmInstr | AluInstr | FinishInstr

# (field, width, signed) in packing order after opcode and deps.
_MEM_FIELDS = (
    ("buffer_id", 3, False),
    ("sram_base", 16, False),
    ("dram_base", 32, False),
    ("y_size", 16, False),
    ("x_size", 16, False),
    ("x_stride", 16, False),
    ("y_pad_top", 4, False),
    ("y_pad_bottom", 4, False),
    ("x_pad_left", 4, False),
    ("x_pad_right", 4, False),
)

_GEMM_FIELDS = (
    ("reset", 1, False),
    ("uop_begin", 13, False),
    ("uop_end", 14, False),
    ("lp_out", 14, False),
    ("lp_in", 14, False),
    ("acc_factor_out", 11, False),
    ("acc_factor_in", 11, False),
    ("inp_factor_out", 11, False),
    ("inp_factor_in", 11, False),
    ("wgt_factor_out", 10, False),
    ("wgt_factor_in", 10, False),
)

_ALU_FIELDS = (
    ("reset", 1, False),
    ("uop_begin", 13, False),
    ("uop_end", 14, False),
    ("lp_out", 14, False),
    ("lp_in", 14, False),
    ("dst_factor_out", 11, False),
    ("dst_factor_in", 11, False),
    ("src_factor_out", 11, False),
    ("src_factor_in", 11, False),
    ("alu_opcode", 2, False),
    ("use_imm", 1, False),
    ("imm", 16, True),
)

_FIELDS_BY_OPCODE = {
    Opcode.LOAD: _MEM_FIELDS,
    Opcode.STORE: _MEM_FIELDS,
    Opcode.GEMM: _GEMM_FIELDS,
    Opcode.ALU: _ALU_FIELDS,
    Opcode.FINISH: (),
}


def _check_unsigned(name: str, value: int, width: int) -> int:
    if not isinstance(value, (int,)) or isinstance(value, bool):
        raise EncodeError(f"{name} must be an int, got {type(value).__name__}")
    if not 0 <= value < (1 << width):
        raise EncodeError(f"{name}={value} does not fit in {width} unsigned bits")
    return value


def _check_signed(name: str, value: int, width: int) -> int:
    lo, hi = -(1 << (width - 1)), (1 << (width - 1)) - 1
    if not isinstance(value, int) or isinstance(value, bool):
        raise EncodeError(f"{name} must be an int, got {type(value).__name__}")
    if not lo <= value <= hi:
        raise EncodeError(f"{name}={value} does not fit in {width} signed bits")
    return value & ((1 << width) - 1)


def _opcode_of(instr: Instruction) -> Opcode:
    if isinstance(instr, MemInstr):
        if instr.opcode not in (Opcode.LOAD, Opcode.STORE):
            raise EncodeError(f"MemInstr opcode must be LOAD or STORE, got {instr.opcode!r}")
        return Opcode(instr.opcode)
    if isinstance(instr, GemmInstr):
        return Opcode.GEMM
    if isinstance(instr, AluInstr):
        return Opcode.ALU
    if isinstance(instr, FinishInstr):
        return Opcode.FINISH
    raise EncodeError(f"not an instruction: {type(instr).__name__}")


def encode_instruction(instr: Instruction) -> bytes:
    """Pack one instruction into its 16-byte little-endian word."""
    opcode = _opcode_of(instr)
    word = int(opcode)
    for flag in ("pop_prev", "pop_next", "push_prev", "push_next"):
        _check_unsigned(f"deps.{flag}", getattr(instr.deps, flag), 1)
    word |= instr.deps.as_bits() << 3
    pos = 7
    for name, width, signed in _FIELDS_BY_OPCODE[opcode]:
        raw = getattr(instr, name)
        bits = _check_signed(name, raw, width) if signed else _check_unsigned(name, int(raw), width)
        word |= bits << pos
        pos += width
    assert pos <= 128
    return word.to_bytes(INSTR_BYTES, "little")


def decode_instruction(data: bytes) -> Instruction:
    """Unpack one 16-byte word.  Inverse of encode_instruction."""
    if len(data) != INSTR_BYTES:
        raise DecodeError(f"instruction word must be {INSTR_BYTES} bytes, got {len(data)}")
    word = int.from_bytes(data, "little")
    op_bits = word & 0b111
    try:
        opcode = Opcode(op_bits)
    except ValueError:
        raise DecodeError(f"unknown opcode {op_bits}") from None
    deps = DepFlags.from_bits(word >> 3 & 0b1111)
    values = {}
    pos = 7
    for name, width, signed in _FIELDS_BY_OPCODE[opcode]:
        raw = word >> pos & ((1 << width) - 1)
        if signed and raw >= 1 << (width - 1):
            raw -= 1 << width
        values[name] = raw
        pos += width
    if opcode in (Opcode.LOAD, Opcode.STORE):
        buf_bits = values.pop("buffer_id")
        try:
            buffer_id = BufferId(buf_bits)
        except ValueError:
            raise DecodeError(f"unknown buffer id {buf_bits}") from None
        return MemInstr(opcode=opcode, buffer_id=buffer_id, deps=deps, **values)
    if opcode is Opcode.GEMM:
        return GemmInstr(deps=deps, **values)
    if opcode is Opcode.ALU:
        values["alu_opcode"] = AluOpcode(values["alu_opcode"])
        return AluInstr(deps=deps, **values)
    return FinishInstr(deps=deps)


@dataclass(frozen=True)
class Uop:
    """Micro-op: per-iteration base indices into the ACC, INP and WGT buffers."""

    acc_idx: int = 0
    inp_idx: int = 0
    wgt_idx: int = 0


def encode_uop(uop: Uop) -> bytes:
    word = (_check_unsigned("acc_idx", uop.acc_idx, 11)
            | _check_unsigned("inp_idx", uop.inp_idx, 11) << 11
            | _check_unsigned("wgt_idx", uop.wgt_idx, 10) << 22)
    return word.to_bytes(UOP_BYTES, "little")


def decode_uop(data: bytes) -> Uop:
    if len(data) != UOP_BYTES:
        raise DecodeError(f"micro-op word must be {UOP_BYTES} bytes, got {len(data)}")
    word = int.from_bytes(data, "little")
    return Uop(word & 0x7FF, word >> 11 & 0x7FF, word >> 22 & 0x3FF)


def _deps_str(deps: DepFlags) -> str:
    return f"{deps.pop_prev}{deps.pop_next}{deps.push_prev}{deps.push_next}"


def format_instruction(instr: Instruction) -> str:
    """One-line human-readable rendering, stable for golden tests."""
    if isinstance(instr, MemInstr):
        name = "LOAD" if instr.opcode is Opcode.LOAD else "STORE"
        return (f"{name} buf={instr.buffer_id.name} sram={instr.sram_base}"
                f" dram={instr.dram_base} y={instr.y_size} x={instr.x_size}"
                f" stride={instr.x_stride}"
                f" pad=({instr.y_pad_top},{instr.y_pad_bottom},{instr.x_pad_left},{instr.x_pad_right})"
                f" deps={_deps_str(instr.deps)}")
    if isinstance(instr, GemmInstr):
        return (f"GEMM lp_out={instr.lp_out} lp_in={instr.lp_in}"
                f" uop=[{instr.uop_begin},{instr.uop_end}) reset={instr.reset}"
                f" acc=({instr.acc_factor_out},{instr.acc_factor_in})"
                f" inp=({instr.inp_factor_out},{instr.inp_factor_in})"
                f" wgt=({instr.wgt_factor_out},{instr.wgt_factor_in})"
                f" deps={_deps_str(instr.deps)}")
    if isinstance(instr, AluInstr):
        return (f"ALU op={instr.alu_opcode.name} lp_out={instr.lp_out} lp_in={instr.lp_in}"
                f" uop=[{instr.uop_begin},{instr.uop_end}) reset={instr.reset}"
                f" use_imm={instr.use_imm} imm={instr.imm}"
                f" dst=({instr.dst_factor_out},{instr.dst_factor_in})"
                f" src=({instr.src_factor_out},{instr.src_factor_in})"
                f" deps={_deps_str(instr.deps)}")
    return f"FINISH deps={_deps_str(instr.deps)}"


def decode_stream(data: bytes) -> list[Instruction]:
    """Decode a whole instruction stream, reporting the byte offset on failure."""
    if len(data) % INSTR_BYTES:
        raise DecodeError(
            f"instruction stream length {len(data)} is not a multiple of {INSTR_BYTES};"
            f" error at offset {len(data) - len(data) % INSTR_BYTES}")
    out = []
    for off in range(0, len(data), INSTR_BYTES):
        try:
            out.append(decode_instruction(data[off:off + INSTR_BYTES]))
        except DecodeError as exc:
            raise DecodeError(f"at byte offset {off}: {exc}") from None
    return out


def decode_uop_stream(data: bytes) -> list[Uop]:
    if len(data) % UOP_BYTES:
        raise DecodeError(
            f"micro-op stream length {len(data)} is not a multiple of {UOP_BYTES};"
            f" error at offset {len(data) - len(data) % UOP_BYTES}")
    return [decode_uop(data[off:off + UOP_BYTES]) for off in range(0, len(data), UOP_BYTES)]


def disassemble(instr_bytes: bytes, uop_bytes: bytes = b"") -> str:
    """Render an instruction stream (and optional micro-op stream) as text."""
    lines = []
    for i, instr in enumerate(decode_stream(instr_bytes)):
        lines.append(f"{i:04d}: {format_instruction(instr)}")
    uops = decode_uop_stream(uop_bytes)
    if uops:
        lines.append("")
        for i, u in enumerate(uops):
            lines.append(f"UOP[{i}]: acc={u.acc_idx} inp={u.inp_idx} wgt={u.wgt_idx}")
    return "\n".join(lines) + "\n"
