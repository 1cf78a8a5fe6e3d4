"""Top-level acceptance gate: eight numbered criteria, one pass/fail line each.

Each criterion prints "ACCEPTANCE <n> PASS/FAIL (<elapsed>)" and enforces its
pinned runtime budget.  Criteria execute in order; later ones reuse results
registered by earlier ones where that saves real time, but every criterion
can also run standalone.
"""

import functools
import json
import tempfile
import time
from pathlib import Path

import numpy as np

from conftest import compile_and_run, ops_pairs
from vtakit import oracle
from vtakit.blocks import binarise, debinarise, merge_unpad, to_blocks
from vtakit.cli import main as cli_main
from vtakit.config import VtaConfig
from vtakit.dram import DramImage, Kind, allocate, phys_to_logical, read_region, write_region
from vtakit.fixtures import build_gemm_relu, lenet5_input, lenet5_layer_specs
from vtakit.funcsim import RunStats, run
from vtakit.isa import (
    AluInstr,
    AluOpcode,
    BufferId,
    DepFlags,
    FinishInstr,
    GemmInstr,
    MemInstr,
    Opcode,
    Uop,
    decode_instruction,
    decode_uop,
    encode_instruction,
    encode_uop,
)
from vtakit.progbuild import AluOp, plan_tiles
from vtakit.tensorfront import (
    apply_transition,
    chain_layers,
    decode_out_matrix,
    host_pool,
    input_matrix_bytes,
    mat2tensor,
    tensor_to_matrix,
)

CFG = VtaConfig()

# Every simulated program lands here as (label, observed, analytic) so the
# statistics criterion can audit the whole suite's evidence at the end.
RUNS: list[tuple[str, int, int]] = []
_LENET: dict = {}


def criterion(number: int, limit_s: float):
    def deco(fn):
        @functools.wraps(fn)
        def wrapper():
            t0 = time.perf_counter()
            try:
                fn()
            except BaseException:
                print(f"ACCEPTANCE {number} FAIL ({time.perf_counter() - t0:.2f} s)")
                raise
            elapsed = time.perf_counter() - t0
            if elapsed >= limit_s:
                print(f"ACCEPTANCE {number} FAIL (runtime {elapsed:.2f} s"
                      f" over the {limit_s:.0f} s budget)")
                raise AssertionError(
                    f"criterion {number} took {elapsed:.2f} s, budget {limit_s} s")
            print(f"ACCEPTANCE {number} PASS ({elapsed:.2f} s)")
        return wrapper
    return deco


def analytic_gemm_loops(instructions) -> int:
    return sum(i.lp_out * i.lp_in * (i.uop_end - i.uop_begin)
               for i in instructions if isinstance(i, GemmInstr))


def checked_run(a, b, x=None, alu_ops=(), cfg=None, label=""):
    """Simulate one job; the loop-count identity and framing sizes are
    asserted on every program the suite executes."""
    cfg = cfg or CFG
    out, stats, program, img = compile_and_run(a, b, x, list(alu_ops), cfg)
    analytic = analytic_gemm_loops(program.instructions)
    assert stats.gemm_loop_count == analytic, label
    assert len(program.instr_bytes()) % 16 == 0
    assert len(program.uop_bytes()) % 4 == 0
    RUNS.append((label, stats.gemm_loop_count, analytic))
    return out, stats, program


@functools.lru_cache(maxsize=1)
def lenet_setup():
    """Compile the five-layer fixture network once and stage its payloads."""
    specs = lenet5_layer_specs()
    base_input = lenet5_input()
    img = DramImage(capacity=1 << 24, page_bytes=CFG.page_bytes)
    plan = chain_layers(specs, base_input, CFG, img)
    for job, prog in zip(plan.jobs, plan.programs):
        write_region(img, prog.layout["inp"], binarise(job.a))
        write_region(img, prog.layout["wgt"], binarise(job.b))
        if job.x is not None:
            write_region(img, prog.layout["acc"], binarise(job.x))
        write_region(img, prog.layout["uop"], prog.uop_bytes())
        write_region(img, prog.layout["instr"], prog.instr_bytes())
    return specs, base_input, img, plan


def execute_network(plan, img, cfg, input_tensor=None, label="net"):
    """Run all layers in order, applying host transitions between them."""
    if input_tensor is not None:
        write_region(img, plan.programs[0].layout["inp"],
                     input_matrix_bytes(plan.layers[0], input_tensor, cfg))
    total = RunStats()
    for i, prog in enumerate(plan.programs):
        stats = run(img, prog.layout["instr"], cfg, strict_deps=True)
        analytic = analytic_gemm_loops(prog.instructions)
        assert stats.gemm_loop_count == analytic
        RUNS.append((f"{label}/layer{i}", stats.gemm_loop_count, analytic))
        total.add(stats)
        if i + 1 < len(plan.programs):
            apply_transition(img, prog.layout["out"],
                             plan.programs[i + 1].layout["inp"],
                             plan.layers[i], plan.layers[i + 1],
                             plan.transitions[i], cfg)
    return total, read_region(img, plan.programs[-1].layout["out"])


@criterion(1, 1.0)
def test_criterion_1_worked_example():
    rng = np.random.default_rng(7)
    a = rng.integers(-128, 128, size=(16, 16))
    b = rng.integers(-128, 128, size=(16, 16))
    ops = [AluOp(AluOpcode.MAX, 0)]
    out, stats, program = checked_run(a, b, alu_ops=ops, label="worked-example")

    gemms = [i for i in program.instructions
             if isinstance(i, GemmInstr) and not i.reset]
    assert len(gemms) == 1
    g = gemms[0]
    assert (g.lp_out, g.lp_in) == (1, 16)
    assert (g.uop_begin, g.uop_end) == (1, 2)
    assert program.uops[1:2] == [Uop(0, 0, 0)]

    lay = program.layout
    assert lay["inp"].log_start == 0x100
    assert lay["wgt"].log_start == 0x20
    assert lay["out"].log_start == 0x300

    want = oracle.matmul_out_bytes(a, b, None, ops_pairs(ops), 16)
    assert out == want


@criterion(2, 1.0)
def test_criterion_2_allocator_trace():
    img = DramImage(capacity=1 << 20)
    first = allocate(img, 256, Kind.INP, CFG)
    assert first.phy_start == 0x1000
    assert first.phy_start + first.size_bytes - 1 == 0x10FF
    second = allocate(img, 4352, Kind.WGT, CFG)
    assert second.phy_start == 0x2000
    assert second.phy_start + second.size_bytes - 1 == 0x30FF
    assert phys_to_logical(0x2000, 0, 1, 256) == 0x20


@criterion(3, 60.0)
def test_criterion_3_random_job_oracle_equivalence():
    rng = np.random.default_rng(0xACCE)
    configs = {bs: VtaConfig(block_size=bs) for bs in (2, 4, 16)}
    op_names = [AluOpcode.MIN, AluOpcode.MAX, AluOpcode.ADD, AluOpcode.SHR]
    n_trials = 500
    for trial in range(n_trials):
        bs = int(rng.choice([2, 4, 16]))
        cfg = configs[bs]
        alpha, lam, beta = (int(v) for v in rng.integers(1, 7, size=3))
        rows = int(rng.integers((alpha - 1) * bs + 1, alpha * bs + 1))
        inner = int(rng.integers((lam - 1) * bs + 1, lam * bs + 1))
        cols = int(rng.integers((beta - 1) * bs + 1, beta * bs + 1))
        a = rng.integers(-128, 128, size=(rows, inner))
        b = rng.integers(-128, 128, size=(inner, cols))
        x = None
        if rng.random() < 0.5:
            x = rng.integers(-(1 << 31), 1 << 31, size=(rows, cols))
        ops = []
        for _ in range(int(rng.integers(0, 4))):
            op = op_names[int(rng.integers(0, 4))]
            if rng.random() < 0.2:
                imm = None
            elif op is AluOpcode.SHR:
                imm = int(rng.integers(-8, 9))
            else:
                imm = int(rng.integers(-30000, 30001))
            ops.append(AluOp(op, imm))
        out, _, _ = checked_run(a, b, x, ops, cfg, label=f"random-{trial}")
        want = oracle.matmul_out_bytes(a, b, x, ops_pairs(ops), bs)
        assert out == want, (f"trial {trial}: bs={bs} grid={alpha}x{lam}x{beta}"
                             f" shape={rows}x{inner}x{cols} ops={ops}")


@criterion(4, 30.0)
def test_criterion_4_capacity_bound_tiling():
    # One block past each on-chip bound: 128 input blocks, 1024 weight
    # blocks, 128 accumulator/output blocks.
    cases = [
        ("inp", 129, 1, 1, []),
        ("wgt", 1, 5, 205, []),
        ("acc", 13, 1, 10, [AluOp(AluOpcode.MAX, 0)]),
    ]
    rng = np.random.default_rng(0xB00)
    for name, alpha, lam, beta, ops in cases:
        assert len(plan_tiles(alpha, lam, beta, CFG)) > 1, name
        a = rng.integers(-128, 128, size=(alpha * 16, lam * 16))
        b = rng.integers(-128, 128, size=(lam * 16, beta * 16))
        out, _, program = checked_run(a, b, alu_ops=ops, label=f"capacity-{name}")
        stores = [i for i in program.instructions
                  if isinstance(i, MemInstr) and i.opcode is Opcode.STORE]
        assert len(stores) > 1, name
        want = oracle.matmul_out_bytes(a, b, None, ops_pairs(ops), 16)
        assert out == want, name


@criterion(5, 120.0)
def test_criterion_5_lenet5_end_to_end():
    specs, base_input, img, plan = lenet_setup()
    layer_dicts = [s.oracle_dict() for s in specs]

    assert plan.transitions == ["reshape", "reshape", "copy", "copy"]
    assert plan.transitions.count("reshape") == 2

    first = plan.layers[0]
    assert (first.a_rows, first.a_cols) == (784, 25)
    assert (first.alpha, first.lam) == (49, 2)
    assert plan.layers[-1].nf == 10

    # Run the fixture input once and check the layer-1 intermediate shapes
    # against the reference pipeline.
    total, out = execute_network(plan, img, CFG, label="lenet5")
    _LENET["gemm_total"] = total.gemm_loop_count
    raw = read_region(img, plan.programs[0].layout["out"])
    m = decode_out_matrix(raw, first, CFG)
    assert m.shape == (784, 6)
    pooled = host_pool(mat2tensor(m, first.conv_out_dims), first.pooling)
    assert pooled.shape == (1, 6, 14, 14)
    assert tensor_to_matrix(pooled).shape == (196, 6)
    ref_layers = oracle.network_forward(layer_dicts, base_input)
    assert (pooled == ref_layers[0]).all()
    assert out == oracle.network_out_bytes(layer_dicts, base_input, 16)

    for seed in range(100, 120):
        x = np.random.default_rng(seed).integers(-128, 128, size=(1, 1, 32, 32))
        _, got = execute_network(plan, img, CFG, input_tensor=x,
                                 label=f"lenet5-s{seed}")
        want = oracle.network_out_bytes(layer_dicts, x, 16)
        assert got == want, f"input seed {seed}"


@criterion(6, 60.0)
def test_criterion_6_statistics_consistency():
    if not RUNS:  # standalone invocation: generate a small evidence base
        rng = np.random.default_rng(6)
        for trial in range(5):
            a = rng.integers(-128, 128, size=(48, 32))
            b = rng.integers(-128, 128, size=(32, 48))
            checked_run(a, b, label=f"standalone-{trial}")
    assert all(observed == analytic for _, observed, analytic in RUNS)
    if "gemm_total" not in _LENET:
        specs, base_input, img, plan = lenet_setup()
        total, _ = execute_network(plan, img, CFG, label="lenet5")
        _LENET["gemm_total"] = total.gemm_loop_count
    print(f"ACCEPTANCE 6 info: loop-count identity held on {len(RUNS)} programs;"
          f" LeNet-5 gemm_loop_count={_LENET['gemm_total']}"
          f" (informational: the upstream VTA toolchain reported 2942 under"
          f" its own tiling; cycle counts are out of scope)")


def _random_instruction(rng) -> object:
    deps = DepFlags(*(int(b) for b in rng.integers(0, 2, size=4)))
    kind = int(rng.integers(0, 4))
    if kind == 0:
        return MemInstr(
            opcode=Opcode.LOAD if rng.random() < 0.5 else Opcode.STORE,
            buffer_id=BufferId(int(rng.integers(0, 5))),
            sram_base=int(rng.integers(0, 1 << 16)),
            dram_base=int(rng.integers(0, 1 << 32)),
            y_size=int(rng.integers(0, 1 << 16)),
            x_size=int(rng.integers(0, 1 << 16)),
            x_stride=int(rng.integers(0, 1 << 16)),
            y_pad_top=int(rng.integers(0, 16)),
            y_pad_bottom=int(rng.integers(0, 16)),
            x_pad_left=int(rng.integers(0, 16)),
            x_pad_right=int(rng.integers(0, 16)),
            deps=deps)
    if kind == 1:
        return GemmInstr(
            reset=int(rng.integers(0, 2)),
            uop_begin=int(rng.integers(0, 1 << 13)),
            uop_end=int(rng.integers(0, 1 << 14)),
            lp_out=int(rng.integers(0, 1 << 14)),
            lp_in=int(rng.integers(0, 1 << 14)),
            acc_factor_out=int(rng.integers(0, 1 << 11)),
            acc_factor_in=int(rng.integers(0, 1 << 11)),
            inp_factor_out=int(rng.integers(0, 1 << 11)),
            inp_factor_in=int(rng.integers(0, 1 << 11)),
            wgt_factor_out=int(rng.integers(0, 1 << 10)),
            wgt_factor_in=int(rng.integers(0, 1 << 10)),
            deps=deps)
    if kind == 2:
        return AluInstr(
            alu_opcode=AluOpcode(int(rng.integers(0, 4))),
            reset=int(rng.integers(0, 2)),
            uop_begin=int(rng.integers(0, 1 << 13)),
            uop_end=int(rng.integers(0, 1 << 14)),
            lp_out=int(rng.integers(0, 1 << 14)),
            lp_in=int(rng.integers(0, 1 << 14)),
            dst_factor_out=int(rng.integers(0, 1 << 11)),
            dst_factor_in=int(rng.integers(0, 1 << 11)),
            src_factor_out=int(rng.integers(0, 1 << 11)),
            src_factor_in=int(rng.integers(0, 1 << 11)),
            use_imm=int(rng.integers(0, 2)),
            imm=int(rng.integers(-(1 << 15), 1 << 15)),
            deps=deps)
    return FinishInstr(deps=deps)


@criterion(7, 5.0)
def test_criterion_7_codec_round_trip():
    rng = np.random.default_rng(0xC0DEC)
    for _ in range(10_000):
        instr = _random_instruction(rng)
        word = encode_instruction(instr)
        assert len(word) == 16
        assert decode_instruction(word) == instr
    for _ in range(10_000):
        uop = Uop(int(rng.integers(0, 1 << 11)), int(rng.integers(0, 1 << 11)),
                  int(rng.integers(0, 1 << 10)))
        assert decode_uop(encode_uop(uop)) == uop

    with tempfile.TemporaryDirectory() as tmp:
        job = Path(tmp) / "job"
        art = Path(tmp) / "art"
        build_gemm_relu(job)
        assert cli_main(["compile", "--manifest", str(job / "manifest.json"),
                         "--out", str(art)]) == 0
        layout = json.loads((art / "dram_layout.json").read_text())
        checked = 0
        for entry in layout["regions"]:
            if entry["kind"] not in ("INSTR", "UOP") or not entry.get("file"):
                continue
            blob = (art / entry["file"]).read_bytes()
            modulus = 16 if entry["kind"] == "INSTR" else 4
            assert len(blob) > 0 and len(blob) % modulus == 0, entry["name"]
            checked += 1
        assert checked == 2

    _, _, _, plan = lenet_setup()
    for prog in plan.programs:
        assert len(prog.instr_bytes()) % 16 == 0
        assert len(prog.uop_bytes()) % 4 == 0


@criterion(8, 10.0)
def test_criterion_8_data_pipeline_inverse():
    rng = np.random.default_rng(0xB10C)
    kinds = [Kind.INP, Kind.WGT, Kind.ACC, Kind.OUT]
    for trial in range(1000):
        rows = int(rng.integers(1, 65))
        cols = int(rng.integers(1, 65))
        bs = int(rng.choice([2, 4, 8, 16]))
        kind = kinds[int(rng.integers(0, 4))]
        if kind is Kind.ACC:
            m = rng.integers(-(1 << 31), 1 << 31, size=(rows, cols))
        else:
            m = rng.integers(-128, 128, size=(rows, cols))
        bm = to_blocks(m, bs, kind)
        back = debinarise(binarise(bm), kind, bm.grid_rows, bm.grid_cols, bs)
        assert (merge_unpad(back, rows, cols) == m).all(), \
            f"trial {trial}: {kind.value} {rows}x{cols} bs={bs}"
