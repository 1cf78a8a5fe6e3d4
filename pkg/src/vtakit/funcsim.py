"""Strictly sequential functional simulator for VTA instruction streams.

Instructions are fetched from the INSTR region one 16-byte word at a time and
executed in order until FINISH.  Dependency flags are not used for scheduling;
they are checked as a token ledger (no queue may go negative, all queues must
end at zero) and violations are reported or, under strict mode, fatal.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import isa
from .config import VtaConfig, validate
from .dram import DramImage, Kind, Region, logical_to_phys, struct_bytes
from .errors import ToolchainError

log = logging.getLogger(__name__)

_MASK32 = (1 << 32) - 1


class SimulationError(ToolchainError):
    """The instruction stream did something the hardware could not."""


def _wrap32(v):
    v = np.asarray(v, dtype=np.int64) & _MASK32
    return np.where(v >= 1 << 31, v - (1 << 32), v)


@dataclass
class RunStats:
    gemm_loop_count: int = 0
    alu_loop_count: int = 0
    dram_bytes_loaded: int = 0
    dram_bytes_stored: int = 0
    instruction_count: int = 0
    # Same counters at the coarser lp_out*lp_in granularity, without the
    # micro-op multiplicity, reported alongside for comparison.
    gemm_inner_iterations: int = 0
    alu_inner_iterations: int = 0
    dep_violations: list[str] = field(default_factory=list)

    def add(self, other: "RunStats") -> None:
        self.gemm_loop_count += other.gemm_loop_count
        self.alu_loop_count += other.alu_loop_count
        self.dram_bytes_loaded += other.dram_bytes_loaded
        self.dram_bytes_stored += other.dram_bytes_stored
        self.instruction_count += other.instruction_count
        self.gemm_inner_iterations += other.gemm_inner_iterations
        self.alu_inner_iterations += other.alu_inner_iterations
        self.dep_violations.extend(other.dep_violations)

    def to_dict(self) -> dict:
        return {
            "gemm_loop_count": self.gemm_loop_count,
            "alu_loop_count": self.alu_loop_count,
            "dram_bytes_loaded": self.dram_bytes_loaded,
            "dram_bytes_stored": self.dram_bytes_stored,
            "instruction_count": self.instruction_count,
            "gemm_inner_iterations": self.gemm_inner_iterations,
            "alu_inner_iterations": self.alu_inner_iterations,
            "dep_violations": list(self.dep_violations),
        }


class SramState:
    """On-chip buffers.  INP/WGT/ACC are held widened to int64 so the GEMM
    inner product needs no per-iteration dtype conversion; every value stays
    inside its architectural domain (int8 or int32)."""

    def __init__(self, cfg: VtaConfig):
        bs = cfg.block_size
        self.inp = np.zeros((cfg.inp_buf_depth, bs), dtype=np.int64)
        self.wgt = np.zeros((cfg.wgt_buf_depth, bs, bs), dtype=np.int64)
        self.acc = np.zeros((cfg.acc_buf_depth, bs), dtype=np.int64)
        self.out = np.zeros((cfg.out_buf_depth, bs), dtype=np.int8)
        self.uop = np.zeros((cfg.uop_buf_depth, 3), dtype=np.int64)


def truncate_acc_to_out(sram: SramState, start: int = 0, count: int | None = None) -> None:
    """out[i] = low 8 bits of acc[i], two's complement, over [start, start+count)."""
    if count is None:
        count = min(len(sram.out), len(sram.acc)) - start
    if start < 0 or start + count > len(sram.out) or start + count > len(sram.acc):
        raise SimulationError(
            f"truncation range [{start}, {start + count}) outside OUT/ACC buffers")
    low = sram.acc[start:start + count] & 0xFF
    sram.out[start:start + count] = np.where(low >= 128, low - 256, low).astype(np.int8)


_BUFFER_KINDS = {
    isa.BufferId.UOP: Kind.UOP,
    isa.BufferId.WGT: Kind.WGT,
    isa.BufferId.INP: Kind.INP,
    isa.BufferId.ACC: Kind.ACC,
    isa.BufferId.OUT: Kind.OUT,
}

# Queues between neighbouring modules, keyed (producer, consumer).
_QUEUES = (("load", "compute"), ("compute", "load"),
           ("compute", "store"), ("store", "compute"))


def _module_of(instr) -> str:
    if isinstance(instr, isa.MemInstr):
        if instr.opcode is isa.Opcode.STORE:
            return "store"
        return "compute" if instr.buffer_id in (isa.BufferId.UOP, isa.BufferId.ACC) else "load"
    return "compute"


class _Ledger:
    def __init__(self, strict: bool):
        self.strict = strict
        self.tokens = {q: 0 for q in _QUEUES}
        self.violations: list[str] = []

    def _flag(self, message: str) -> None:
        self.violations.append(message)
        if self.strict:
            raise SimulationError(f"dependency ledger: {message}")
        log.warning("dependency ledger: %s", message)

    def step(self, index: int, instr) -> None:
        module = _module_of(instr)
        prev = {"compute": "load", "store": "compute"}.get(module)
        nxt = {"load": "compute", "compute": "store"}.get(module)
        d = instr.deps
        for flag, neighbour in (("pop_prev", prev), ("pop_next", nxt),
                                ("push_prev", prev), ("push_next", nxt)):
            if not getattr(d, flag):
                continue
            if neighbour is None:
                self._flag(f"instr {index}: {flag} has no neighbour for {module} module")
                continue
            # Pops consume tokens the neighbour produced for this module;
            # pushes produce tokens for the neighbour.
            if flag.startswith("pop"):
                queue = (neighbour, module)
            else:
                queue = (module, neighbour)
            if flag.startswith("pop"):
                if self.tokens[queue] == 0:
                    self._flag(f"instr {index}: pop from empty queue {queue[0]}->{queue[1]}")
                else:
                    self.tokens[queue] -= 1
            else:
                self.tokens[queue] += 1

    def finish(self) -> None:
        for queue, n in self.tokens.items():
            if n:
                self._flag(f"queue {queue[0]}->{queue[1]} ends with {n} token(s)")


class _Simulator:
    def __init__(self, img: DramImage, cfg: VtaConfig, strict_deps: bool):
        self.img = img
        self.cfg = cfg
        self.sram = SramState(cfg)
        self.stats = RunStats()
        self.ledger = _Ledger(strict_deps)

    # -- memory instructions ------------------------------------------------

    def _deposit(self, kind: Kind, base: int, count: int, raw: np.ndarray | None) -> None:
        """Write count structures at SRAM slots [base, base+count); raw None zeros them."""
        cfg = self.cfg
        bs = cfg.block_size
        if kind is Kind.UOP:
            dst, depth = self.sram.uop, cfg.uop_buf_depth
        elif kind is Kind.WGT:
            dst, depth = self.sram.wgt, cfg.wgt_buf_depth
        elif kind is Kind.INP:
            dst, depth = self.sram.inp, cfg.inp_buf_depth
        elif kind is Kind.ACC:
            dst, depth = self.sram.acc, cfg.acc_buf_depth
        else:
            raise SimulationError("LOAD cannot target the OUT buffer")
        if base < 0 or base + count > depth:
            raise SimulationError(
                f"{kind.value} load range [{base}, {base + count}) exceeds depth {depth}")
        if raw is None:
            dst[base:base + count] = 0
            return
        if kind is Kind.UOP:
            words = raw.view("<u4").astype(np.int64)
            dst[base:base + count, 0] = words & 0x7FF
            dst[base:base + count, 1] = words >> 11 & 0x7FF
            dst[base:base + count, 2] = words >> 22 & 0x3FF
        elif kind is Kind.WGT:
            dst[base:base + count] = raw.view(np.int8).reshape(count, bs, bs)
        elif kind is Kind.INP:
            dst[base:base + count] = raw.view(np.int8).reshape(count, bs)
        else:
            dst[base:base + count] = raw.view("<i4").reshape(count, bs)

    def exec_load(self, instr: isa.MemInstr) -> None:
        cfg = self.cfg
        kind = _BUFFER_KINDS[instr.buffer_id]
        if kind is Kind.OUT:
            raise SimulationError("LOAD cannot target the OUT buffer")
        size = struct_bytes(kind, cfg)
        row = instr.x_pad_left + instr.x_size + instr.x_pad_right
        base = instr.sram_base
        for _ in range(instr.y_pad_top):
            self._deposit(kind, base, row, None)
            base += row
        for y in range(instr.y_size):
            if instr.x_pad_left:
                self._deposit(kind, base, instr.x_pad_left, None)
            if instr.x_size:
                phy = logical_to_phys(instr.dram_base + y * instr.x_stride,
                                      self.img.offset, size, 1)
                raw = self.img.read_bytes(phy, instr.x_size * size)
                self._deposit(kind, base + instr.x_pad_left, instr.x_size, raw)
            if instr.x_pad_right:
                self._deposit(kind, base + instr.x_pad_left + instr.x_size,
                              instr.x_pad_right, None)
            base += row
        for _ in range(instr.y_pad_bottom):
            self._deposit(kind, base, row, None)
            base += row
        self.stats.dram_bytes_loaded += instr.y_size * instr.x_size * size

    def exec_store(self, instr: isa.MemInstr) -> None:
        cfg = self.cfg
        if instr.buffer_id is not isa.BufferId.OUT:
            raise SimulationError(
                f"STORE must target the OUT buffer, got {instr.buffer_id.name}")
        if instr.y_pad_top or instr.y_pad_bottom or instr.x_pad_left or instr.x_pad_right:
            raise SimulationError("STORE does not support padding")
        size = struct_bytes(Kind.OUT, cfg)
        for y in range(instr.y_size):
            base = instr.sram_base + y * instr.x_size
            if base < 0 or base + instr.x_size > cfg.out_buf_depth:
                raise SimulationError(
                    f"OUT store range [{base}, {base + instr.x_size}) exceeds"
                    f" depth {cfg.out_buf_depth}")
            truncate_acc_to_out(self.sram, base, instr.x_size)
            phy = logical_to_phys(instr.dram_base + y * instr.x_stride,
                                  self.img.offset, size, 1)
            self.img.write_bytes(phy, self.sram.out[base:base + instr.x_size]
                                 .astype("i1").reshape(-1).view(np.uint8))
        self.stats.dram_bytes_stored += instr.y_size * instr.x_size * size

    # -- compute instructions -----------------------------------------------

    def _uop_slice(self, instr) -> list:
        depth = self.cfg.uop_buf_depth
        if not 0 <= instr.uop_begin <= instr.uop_end <= depth:
            raise SimulationError(
                f"micro-op range [{instr.uop_begin}, {instr.uop_end}) exceeds depth {depth}")
        return self.sram.uop[instr.uop_begin:instr.uop_end].tolist()

    def exec_gemm(self, instr: isa.GemmInstr) -> None:
        uops = self._uop_slice(instr)
        acc, inp, wgt = self.sram.acc, self.sram.inp, self.sram.wgt
        acc_depth, inp_depth, wgt_depth = len(acc), len(inp), len(wgt)
        loops = 0
        for i_out in range(instr.lp_out):
            acc_o = i_out * instr.acc_factor_out
            inp_o = i_out * instr.inp_factor_out
            wgt_o = i_out * instr.wgt_factor_out
            for i_in in range(instr.lp_in):
                acc_b = acc_o + i_in * instr.acc_factor_in
                inp_b = inp_o + i_in * instr.inp_factor_in
                wgt_b = wgt_o + i_in * instr.wgt_factor_in
                for i_acc, i_inp, i_wgt in uops:
                    x = acc_b + i_acc
                    if x >= acc_depth:
                        raise SimulationError(
                            f"GEMM acc index {x} >= {acc_depth}"
                            f" at (i_out={i_out}, i_in={i_in})")
                    if instr.reset:
                        acc[x] = 0
                    else:
                        a = inp_b + i_inp
                        w = wgt_b + i_wgt
                        if a >= inp_depth:
                            raise SimulationError(
                                f"GEMM inp index {a} >= {inp_depth}"
                                f" at (i_out={i_out}, i_in={i_in})")
                        if w >= wgt_depth:
                            raise SimulationError(
                                f"GEMM wgt index {w} >= {wgt_depth}"
                                f" at (i_out={i_out}, i_in={i_in})")
                        # result[e] = sum_k A[k] * W[e, k] + X[e]
                        acc[x] = _wrap32(wgt[w] @ inp[a] + acc[x])
                    loops += 1
        self.stats.gemm_loop_count += loops
        self.stats.gemm_inner_iterations += instr.lp_out * instr.lp_in

    def exec_alu(self, instr: isa.AluInstr) -> None:
        uops = self._uop_slice(instr)
        acc = self.sram.acc
        depth = len(acc)
        op = instr.alu_opcode
        loops = 0
        for i_out in range(instr.lp_out):
            dst_o = i_out * instr.dst_factor_out
            src_o = i_out * instr.src_factor_out
            for i_in in range(instr.lp_in):
                dst_b = dst_o + i_in * instr.dst_factor_in
                src_b = src_o + i_in * instr.src_factor_in
                for u_acc, u_inp, _ in uops:
                    dst = dst_b + u_acc
                    if dst >= depth:
                        raise SimulationError(
                            f"ALU dst index {dst} >= {depth}"
                            f" at (i_out={i_out}, i_in={i_in})")
                    if instr.reset:
                        acc[dst] = 0
                        loops += 1
                        continue
                    if instr.use_imm:
                        operand = instr.imm
                    else:
                        src = src_b + u_inp
                        if src >= depth:
                            raise SimulationError(
                                f"ALU src index {src} >= {depth}"
                                f" at (i_out={i_out}, i_in={i_in})")
                        operand = acc[src]
                    if op is isa.AluOpcode.MIN:
                        acc[dst] = np.minimum(acc[dst], operand)
                    elif op is isa.AluOpcode.MAX:
                        acc[dst] = np.maximum(acc[dst], operand)
                    elif op is isa.AluOpcode.ADD:
                        acc[dst] = _wrap32(acc[dst] + operand)
                    else:  # SHR; negative amounts shift left, capped at 31
                        amount = np.clip(np.asarray(operand, dtype=np.int64), -31, 31)
                        right = acc[dst] >> np.maximum(amount, 0)
                        left = _wrap32(acc[dst] << np.maximum(-amount, 0))
                        acc[dst] = np.where(amount >= 0, right, left)
                    loops += 1
        self.stats.alu_loop_count += loops
        self.stats.alu_inner_iterations += instr.lp_out * instr.lp_in


def _find_instr_region(layout, instr) -> Region:
    if isinstance(instr, Region):
        return instr
    regions = [r for r in layout if r.kind is Kind.INSTR]
    if isinstance(instr, str):
        regions = [r for r in regions if r.name == instr]
    if not regions:
        raise SimulationError("no INSTR region to execute")
    if len(regions) > 1:
        names = ", ".join(r.name for r in regions)
        raise SimulationError(f"ambiguous INSTR region, pick one of: {names}")
    return regions[0]


def run(img: DramImage, layout, cfg: VtaConfig, *, instr=None,
        trace=None, strict_deps: bool = False) -> RunStats:
    """Execute one program out of the image; returns the run statistics.

    layout is the INSTR Region itself or an iterable of Regions; instr
    selects among the latter by Region or by name, defaulting to the unique
    INSTR region.  trace, if given, is a callable fed one formatted line per
    executed instruction.
    """
    validate(cfg)
    if isinstance(layout, Region):
        region = layout
    else:
        region = _find_instr_region(layout or img.regions, instr)
    sim = _Simulator(img, cfg, strict_deps)
    stream = img.read_bytes(region.phy_start, region.size_bytes).tobytes()
    n_words = region.size_bytes // isa.INSTR_BYTES
    finished = False
    for i in range(n_words):
        word = stream[i * isa.INSTR_BYTES:(i + 1) * isa.INSTR_BYTES]
        try:
            instr_obj = isa.decode_instruction(word)
        except isa.DecodeError as exc:
            raise SimulationError(f"at instruction {i}: {exc}") from None
        if trace is not None:
            trace(f"{i:04d}: {isa.format_instruction(instr_obj)}")
        sim.ledger.step(i, instr_obj)
        sim.stats.instruction_count += 1
        if isinstance(instr_obj, isa.FinishInstr):
            finished = True
            break
        if isinstance(instr_obj, isa.MemInstr):
            if instr_obj.opcode is isa.Opcode.LOAD:
                sim.exec_load(instr_obj)
            else:
                sim.exec_store(instr_obj)
        elif isinstance(instr_obj, isa.GemmInstr):
            sim.exec_gemm(instr_obj)
        else:
            sim.exec_alu(instr_obj)
    if not finished:
        raise SimulationError("instruction stream ended without FINISH")
    sim.ledger.finish()
    sim.stats.dep_violations = sim.ledger.violations
    return sim.stats
