"""Builds VTA instruction programs for block-matrix multiply jobs.

A program follows a fixed phase template: a reset pair (micro-op load plus a
reset GEMM sweep) first, then per tile the operand loads, the GEMM micro-ops
and instruction, the element-wise post-ops, and the store; a FINISH closes
the stream.  Tiles partition the output block grid into row bands and column
strips, and the reduction dimension into segments, so every sub-job fits the
on-chip buffers; reduction segments accumulate into the resident ACC range
of their tile.

Each tile shares one micro-op table across its reduction segments.  When the
reduction does not divide evenly the final short segment lands in SRAM with
a smaller row stride, so it gets a second table with the adjusted input
indices, loaded over the first one just before its GEMM.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import blocks, isa
from .config import VtaConfig, validate
from .dram import DramImage, Kind, Region, allocate, struct_bytes
from .errors import ToolchainError


class CapacityError(ToolchainError):
    """A job does not satisfy a buffer capacity precondition."""


class BuildError(ToolchainError):
    """A job is malformed or missing required resources."""


@dataclass
class AluOp:
    """One element-wise post-op; imm None selects vector-operand mode."""

    op: isa.AluOpcode
    imm: int | None = None

    def to_dict(self) -> dict:
        return {"op": self.op.name.lower(), "imm": self.imm}

    @classmethod
    def from_dict(cls, d: dict) -> "AluOp":
        try:
            op = isa.AluOpcode[str(d["op"]).upper()]
        except KeyError:
            raise BuildError(f"unknown alu op {d.get('op')!r}") from None
        imm = d.get("imm")
        return cls(op, None if imm is None else int(imm))


@dataclass
class MatMulJob:
    """One C = A x B (+ X) job over block matrices, plus post-ops."""

    a: blocks.BlockMatrix
    b: blocks.BlockMatrix
    x: blocks.BlockMatrix | None = None
    alu_ops: list[AluOp] = field(default_factory=list)
    uop_epsilon: int = 1
    layout: dict[str, Region] | None = None

    @property
    def alpha(self) -> int:
        return self.a.grid_rows

    @property
    def lam(self) -> int:
        return self.a.grid_cols

    @property
    def beta(self) -> int:
        return self.b.grid_cols


@dataclass
class Tile:
    row0: int      # first block row of the output tile
    rows: int
    col0: int      # first block column of the output tile
    cols: int
    segments: list[tuple[int, int]]  # (first reduction block, block count)


@dataclass
class Program:
    instructions: list
    uops: list[isa.Uop]
    layout: dict[str, Region]
    predicted_stats: dict

    def instr_bytes(self) -> bytes:
        return b"".join(isa.encode_instruction(i) for i in self.instructions)

    def uop_bytes(self) -> bytes:
        return b"".join(isa.encode_uop(u) for u in self.uops)


def make_job(a, b, x=None, alu_ops=(), cfg: VtaConfig | None = None) -> MatMulJob:
    """Block-decompose plain operand matrices into a job."""
    cfg = validate(cfg or VtaConfig())
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise BuildError(f"operand shapes {a.shape} x {b.shape} are not multiplicable")
    xb = None
    if x is not None:
        x = np.asarray(x)
        if x.shape != (a.shape[0], b.shape[1]):
            raise BuildError(
                f"addend shape {x.shape} does not match output {(a.shape[0], b.shape[1])}")
        xb = blocks.to_blocks(x, cfg.block_size, Kind.ACC)
    return MatMulJob(a=blocks.to_blocks(a, cfg.block_size, Kind.INP),
                     b=blocks.to_blocks(b, cfg.block_size, Kind.WGT),
                     x=xb, alu_ops=list(alu_ops))


def _capacities(cfg: VtaConfig) -> tuple[int, int, int]:
    cap_inp = cfg.inp_buf_depth // cfg.block_size
    cap_wgt = cfg.wgt_buf_depth
    cap_acc = min(cfg.acc_buf_depth, cfg.out_buf_depth) // cfg.block_size
    return cap_inp, cap_wgt, cap_acc


def plan_tiles(alpha: int, lam: int, beta: int, cfg: VtaConfig) -> list[Tile]:
    """Partition the output block grid (and the reduction) to fit on chip."""
    assert min(alpha, lam, beta) >= 1
    cap_inp, cap_wgt, cap_acc = _capacities(cfg)
    lam_t = min(lam, cap_inp, cap_wgt)
    beta_t = min(beta, cap_wgt // lam_t, cap_acc)
    alpha_t = min(alpha, cap_inp // lam_t, cap_acc // beta_t)
    segments = [(k, min(lam_t, lam - k)) for k in range(0, lam, lam_t)]
    tiles = []
    for i in range(0, alpha, alpha_t):
        for j in range(0, beta, beta_t):
            tiles.append(Tile(row0=i, rows=min(alpha_t, alpha - i),
                              col0=j, cols=min(beta_t, beta - j),
                              segments=list(segments)))
    return tiles


def gen_gemm(alpha: int, lam: int, beta: int, epsilon: int, cfg: VtaConfig,
             inp_stride_blocks: int | None = None) -> tuple[isa.GemmInstr, list[isa.Uop]]:
    """GEMM instruction plus micro-ops for a resident alpha x lam x beta job.

    SRAM layout assumption: operand blocks row-major from INP slot 0 with a
    row stride of ``inp_stride_blocks`` blocks (default lam), weight blocks
    row-major from WGT slot 0, output/addend blocks row-major from ACC slot 0.
    """
    bs = cfg.block_size
    stride = lam if inp_stride_blocks is None else inp_stride_blocks
    cap_inp, cap_wgt, cap_acc = _capacities(cfg)
    if alpha * stride > cap_inp:
        raise CapacityError(f"{alpha}x{stride} operand blocks exceed the INP budget of {cap_inp}")
    if lam * beta > cap_wgt:
        raise CapacityError(f"{lam}x{beta} weight blocks exceed the WGT budget of {cap_wgt}")
    if alpha * beta > cap_acc:
        raise CapacityError(f"{alpha}x{beta} output blocks exceed the ACC/OUT budget of {cap_acc}")
    if epsilon + alpha * beta > cfg.uop_buf_depth:
        raise CapacityError(f"{alpha * beta} micro-ops at {epsilon} exceed the"
                            f" UOP budget of {cfg.uop_buf_depth}")
    uops = [isa.Uop(acc_idx=(i * beta + j) * bs, inp_idx=i * stride * bs, wgt_idx=j)
            for i in range(alpha) for j in range(beta)]
    instr = isa.GemmInstr(
        uop_begin=epsilon, uop_end=epsilon + alpha * beta,
        lp_out=lam, lp_in=bs,
        acc_factor_out=0, acc_factor_in=1,
        inp_factor_out=bs, inp_factor_in=1,
        wgt_factor_out=beta, wgt_factor_in=0,
    )
    return instr, uops


def gen_alu(op: AluOp, vector_count: int, epsilon: int,
            cfg: VtaConfig) -> tuple[isa.AluInstr, list[isa.Uop]]:
    """In-place element-wise op over ACC vectors [0, vector_count)."""
    if vector_count > cfg.acc_buf_depth:
        raise CapacityError(f"{vector_count} vectors exceed the ACC depth {cfg.acc_buf_depth}")
    if epsilon + 1 > cfg.uop_buf_depth:
        raise CapacityError(f"micro-op slot {epsilon} exceeds the UOP budget")
    instr = isa.AluInstr(
        alu_opcode=op.op,
        uop_begin=epsilon, uop_end=epsilon + 1,
        lp_out=1, lp_in=vector_count,
        dst_factor_out=0, dst_factor_in=1,
        src_factor_out=0, src_factor_in=1,
        use_imm=0 if op.imm is None else 1,
        imm=0 if op.imm is None else op.imm,
    )
    return instr, [isa.Uop()]


def gen_reset(acc_vector_count: int, uop_dram_base: int,
              deps: isa.DepFlags = isa.NO_DEPS) -> tuple[isa.MemInstr, isa.GemmInstr, isa.Uop]:
    """Reset pair: load the all-zero micro-op to slot 0, zero-sweep ACC."""
    load = isa.MemInstr(opcode=isa.Opcode.LOAD, buffer_id=isa.BufferId.UOP,
                        sram_base=0, dram_base=uop_dram_base,
                        y_size=1, x_size=1, x_stride=1)
    sweep = isa.GemmInstr(uop_begin=0, uop_end=1, lp_out=1, lp_in=acc_vector_count,
                          acc_factor_in=1, reset=1, deps=deps)
    return load, sweep, isa.Uop()


def _mem(opcode, buffer_id, sram, dram, y, x, stride, deps=isa.NO_DEPS) -> isa.MemInstr:
    # Collapse contiguous 2D transfers into the canonical single-row form.
    if y > 1 and stride == x:
        y, x, stride = 1, y * x, y * x
    if y == 1:
        stride = x
    return isa.MemInstr(opcode=opcode, buffer_id=buffer_id, sram_base=sram,
                        dram_base=dram, y_size=y, x_size=x, x_stride=stride, deps=deps)


def gen_loads(job: MatMulJob, cfg: VtaConfig) -> list[isa.MemInstr]:
    """Whole-operand loads for a job that fits on chip in one tile."""
    layout = _require_layout(job, ("inp", "wgt") + (("acc",) if job.x is not None else ()))
    bs = cfg.block_size
    loads = [
        _mem(isa.Opcode.LOAD, isa.BufferId.INP, 0, layout["inp"].log_start,
             1, job.alpha * job.lam * bs, job.alpha * job.lam * bs),
        _mem(isa.Opcode.LOAD, isa.BufferId.WGT, 0, layout["wgt"].log_start,
             1, job.lam * job.beta, job.lam * job.beta),
    ]
    if job.x is not None:
        loads.append(_mem(isa.Opcode.LOAD, isa.BufferId.ACC, 0, layout["acc"].log_start,
                          1, job.alpha * job.beta * bs, job.alpha * job.beta * bs))
    return loads


def gen_store(job: MatMulJob, cfg: VtaConfig,
              deps: isa.DepFlags = isa.NO_DEPS) -> isa.MemInstr:
    layout = _require_layout(job, ("out",))
    count = job.alpha * job.beta * cfg.block_size
    return _mem(isa.Opcode.STORE, isa.BufferId.OUT, 0, layout["out"].log_start,
                1, count, count, deps)


def gen_finish(deps: isa.DepFlags = isa.NO_DEPS) -> isa.FinishInstr:
    return isa.FinishInstr(deps=deps)


def _require_layout(job: MatMulJob, keys) -> dict[str, Region]:
    if job.layout is None:
        raise BuildError("job has no DRAM layout; allocate regions first")
    missing = [k for k in keys if k not in job.layout]
    if missing:
        raise BuildError(f"job layout is missing region(s): {', '.join(missing)}")
    return job.layout


def uop_count(job: MatMulJob, cfg: VtaConfig) -> int:
    """Micro-ops the program will reference in DRAM, reset slot included."""
    tiles = plan_tiles(job.alpha, job.lam, job.beta, cfg)
    per_alu = 1 if job.alu_ops else 0
    total = 1
    for t in tiles:
        n = t.rows * t.cols
        ragged = t.segments[-1][1] != t.segments[0][1]
        total += n * (2 if ragged else 1) + per_alu
    return total


def allocate_job(img: DramImage, job: MatMulJob, cfg: VtaConfig, prefix: str = "") -> None:
    """Reserve the data and micro-op regions; INSTR is allocated after build."""
    bs = cfg.block_size
    layout = {}
    layout["inp"] = allocate(img, job.a.n_blocks * bs * bs * cfg.inp_width_bytes,
                             Kind.INP, cfg, prefix + "inp")
    layout["wgt"] = allocate(img, job.b.n_blocks * bs * bs * cfg.wgt_width_bytes,
                             Kind.WGT, cfg, prefix + "wgt")
    if job.x is not None:
        layout["acc"] = allocate(img, job.x.n_blocks * bs * bs * cfg.acc_width_bytes,
                                 Kind.ACC, cfg, prefix + "acc")
    layout["out"] = allocate(img, job.alpha * job.beta * bs * bs * cfg.out_width_bytes,
                             Kind.OUT, cfg, prefix + "out")
    layout["uop"] = allocate(img, uop_count(job, cfg) * isa.UOP_BYTES,
                             Kind.UOP, cfg, prefix + "uop")
    job.layout = layout


def build_program(job: MatMulJob, cfg: VtaConfig) -> Program:
    """Emit the full instruction stream and micro-op table for a job."""
    validate(cfg)
    bs = cfg.block_size
    layout = _require_layout(job, ("inp", "wgt", "out", "uop")
                             + (("acc",) if job.x is not None else ()))
    for op in job.alu_ops:
        if not isinstance(op, AluOp):
            raise BuildError(f"alu_ops entries must be AluOp, got {type(op).__name__}")
    tiles = plan_tiles(job.alpha, job.lam, job.beta, cfg)
    uop_log = layout["uop"].log_start
    lam_full, beta_full = job.lam, job.beta
    eps = job.uop_epsilon

    instrs: list = []
    uops: list[isa.Uop] = []
    flags = isa.DepFlags

    # Phase 1: reset pair covering the largest ACC range any tile touches.
    sweep_count = max(t.rows * t.cols for t in tiles) * bs
    load0, sweep, zero_uop = gen_reset(sweep_count, uop_log)
    instrs += [load0, sweep]
    uops.append(zero_uop)

    total_segments = sum(len(t.segments) for t in tiles)
    seg_index = 0
    for t_idx, tile in enumerate(tiles):
        seg_width = tile.segments[0][1]
        n_tile_uops = tile.rows * tile.cols
        acc_vectors = n_tile_uops * bs

        gemm_proto, table = gen_gemm(tile.rows, seg_width, tile.cols, eps, cfg)
        table_dram = uop_log + len(uops)
        uops.extend(table)
        ragged_dram = None
        last_width = tile.segments[-1][1]
        if last_width != seg_width:
            _, ragged_table = gen_gemm(tile.rows, last_width, tile.cols, eps, cfg)
            ragged_dram = uop_log + len(uops)
            uops.extend(ragged_table)

        # ACC initialisation: X overwrites, otherwise re-zero after tile 0
        # (tile 0 is covered by the program-level sweep).
        init_pop = flags(pop_next=1) if t_idx > 0 else isa.NO_DEPS
        acc_init = None
        if job.x is not None:
            acc_init = _mem(isa.Opcode.LOAD, isa.BufferId.ACC, 0,
                            layout["acc"].log_start + (tile.row0 * beta_full + tile.col0) * bs,
                            tile.rows, tile.cols * bs, beta_full * bs, init_pop)
        elif t_idx > 0:
            acc_init = isa.GemmInstr(uop_begin=0, uop_end=1, lp_out=1, lp_in=acc_vectors,
                                     acc_factor_in=1, reset=1, deps=init_pop)

        for s_idx, (k0, kn) in enumerate(tile.segments):
            last_seg = s_idx == len(tile.segments) - 1
            inp_pop = flags(pop_next=1) if seg_index > 0 else isa.NO_DEPS
            instrs.append(_mem(isa.Opcode.LOAD, isa.BufferId.INP, 0,
                               layout["inp"].log_start + (tile.row0 * lam_full + k0) * bs,
                               tile.rows, kn * bs, lam_full * bs, inp_pop))
            instrs.append(_mem(isa.Opcode.LOAD, isa.BufferId.WGT, 0,
                               layout["wgt"].log_start + k0 * beta_full + tile.col0,
                               kn, tile.cols, beta_full, flags(push_next=1)))
            if s_idx == 0:
                if acc_init is not None:
                    instrs.append(acc_init)
                instrs.append(_mem(isa.Opcode.LOAD, isa.BufferId.UOP, eps,
                                   table_dram, 1, n_tile_uops, n_tile_uops))
            if last_seg and ragged_dram is not None:
                instrs.append(_mem(isa.Opcode.LOAD, isa.BufferId.UOP, eps,
                                   ragged_dram, 1, n_tile_uops, n_tile_uops))
            gemm_deps = flags(
                pop_prev=1,
                push_prev=1 if seg_index < total_segments - 1 else 0,
                push_next=1 if (not job.alu_ops and last_seg) else 0,
            )
            instrs.append(replace(gemm_proto, lp_out=kn, deps=gemm_deps))
            seg_index += 1

        # Element-wise post-ops over the tile's resident ACC vectors.
        if job.alu_ops:
            alu_eps = eps + n_tile_uops
            instrs.append(_mem(isa.Opcode.LOAD, isa.BufferId.UOP, alu_eps,
                               uop_log + len(uops), 1, 1, 1))
            uops.append(isa.Uop())
            for o_idx, op in enumerate(job.alu_ops):
                alu_instr, _ = gen_alu(op, acc_vectors, alu_eps, cfg)
                if o_idx == len(job.alu_ops) - 1:
                    alu_instr = replace(alu_instr, deps=flags(push_next=1))
                instrs.append(alu_instr)

        instrs.append(_mem(isa.Opcode.STORE, isa.BufferId.OUT, 0,
                           layout["out"].log_start + (tile.row0 * beta_full + tile.col0) * bs,
                           tile.rows, tile.cols * bs, beta_full * bs,
                           flags(pop_prev=1, push_prev=1)))

    instrs.append(gen_finish(flags(pop_next=1)))
    predicted = predict_stats(instrs, cfg)
    return Program(instructions=instrs, uops=uops, layout=layout, predicted_stats=predicted)


def predict_stats(instructions, cfg: VtaConfig) -> dict:
    """Analytic loop and DRAM byte totals straight off the instruction list."""
    gemm_loops = 0
    alu_loops = 0
    loaded = 0
    stored = 0
    for instr in instructions:
        if isinstance(instr, isa.GemmInstr):
            gemm_loops += instr.lp_out * instr.lp_in * (instr.uop_end - instr.uop_begin)
        elif isinstance(instr, isa.AluInstr):
            alu_loops += instr.lp_out * instr.lp_in * (instr.uop_end - instr.uop_begin)
        elif isinstance(instr, isa.MemInstr):
            kind = {isa.BufferId.UOP: Kind.UOP, isa.BufferId.WGT: Kind.WGT,
                    isa.BufferId.INP: Kind.INP, isa.BufferId.ACC: Kind.ACC,
                    isa.BufferId.OUT: Kind.OUT}[instr.buffer_id]
            nbytes = instr.y_size * instr.x_size * struct_bytes(kind, cfg)
            if instr.opcode is isa.Opcode.LOAD:
                loaded += nbytes
            else:
                stored += nbytes
    return {"gemm_loop_count": gemm_loops, "alu_loop_count": alu_loops,
            "dram_bytes_loaded": loaded, "dram_bytes_stored": stored}


def compile_job(img: DramImage, job: MatMulJob, cfg: VtaConfig, prefix: str = "") -> Program:
    """Allocate regions, build the program, and place its instruction region."""
    validate(cfg)
    allocate_job(img, job, cfg, prefix)
    program = build_program(job, cfg)
    assert len(program.uops) == uop_count(job, cfg), \
        "emitted micro-ops disagree with the allocation-time count"
    job.layout["instr"] = allocate(img, len(program.instructions) * isa.INSTR_BYTES,
                                   Kind.INSTR, cfg, prefix + "instr")
    program.layout = job.layout
    return program


_LEDGER_QUEUES = (("load", "compute"), ("compute", "load"),
                  ("compute", "store"), ("store", "compute"))


def validate_program(program: Program, cfg: VtaConfig) -> list[str]:
    """Static well-formedness checks; returns a list of problems (empty = ok)."""
    problems = []
    instrs = program.instructions
    if len(instrs) < 3:
        problems.append("program too short for reset pair + FINISH")
        return problems
    head = instrs[0]
    if not (isinstance(head, isa.MemInstr) and head.opcode is isa.Opcode.LOAD
            and head.buffer_id is isa.BufferId.UOP and head.sram_base == 0):
        problems.append("program must begin with the reset micro-op load")
    if not (isinstance(instrs[1], isa.GemmInstr) and instrs[1].reset == 1):
        problems.append("second instruction must be the reset GEMM sweep")
    if not isinstance(instrs[-1], isa.FinishInstr):
        problems.append("program must end with FINISH")
    if sum(isinstance(i, isa.FinishInstr) for i in instrs) != 1:
        problems.append("program must contain exactly one FINISH")

    covered = np.zeros(cfg.uop_buf_depth, dtype=bool)
    queues = {q: 0 for q in _LEDGER_QUEUES}
    for idx, instr in enumerate(instrs):
        if isinstance(instr, isa.MemInstr):
            if instr.opcode is isa.Opcode.STORE and instr.buffer_id is not isa.BufferId.OUT:
                problems.append(f"instr {idx}: STORE targets {instr.buffer_id.name}")
            if instr.y_size < 1 or instr.x_size < 1:
                problems.append(f"instr {idx}: empty transfer")
            if instr.buffer_id is isa.BufferId.UOP and instr.opcode is isa.Opcode.LOAD:
                covered[instr.sram_base:instr.sram_base + instr.y_size * instr.x_size] = True
        if isinstance(instr, (isa.GemmInstr, isa.AluInstr)):
            if not covered[instr.uop_begin:instr.uop_end].all():
                problems.append(f"instr {idx}: micro-op range [{instr.uop_begin},"
                                f" {instr.uop_end}) not covered by a prior load")
        problems += _ledger_step(queues, idx, instr)
    problems += [f"queue {a}->{b} ends with {n} token(s)"
                 for (a, b), n in queues.items() if n]
    return problems


def _ledger_step(queues: dict, idx: int, instr) -> list[str]:
    problems = []
    if isinstance(instr, isa.MemInstr):
        if instr.opcode is isa.Opcode.STORE:
            module = "store"
        elif instr.buffer_id in (isa.BufferId.UOP, isa.BufferId.ACC):
            module = "compute"
        else:
            module = "load"
    else:
        module = "compute"
    prev = {"compute": "load", "store": "compute"}.get(module)
    nxt = {"load": "compute", "compute": "store"}.get(module)
    for flag, neighbour in (("pop_prev", prev), ("pop_next", nxt),
                            ("push_prev", prev), ("push_next", nxt)):
        if not getattr(instr.deps, flag):
            continue
        if neighbour is None:
            problems.append(f"instr {idx}: {flag} without a neighbour")
            continue
        queue = (neighbour, module) if flag.startswith("pop") else (module, neighbour)
        if flag.startswith("pop"):
            if queues[queue] == 0:
                problems.append(f"instr {idx}: pop from empty {queue[0]}->{queue[1]}")
            else:
                queues[queue] -= 1
        else:
            queues[queue] += 1
    return problems
