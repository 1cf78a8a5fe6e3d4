"""Shared test helpers: compile a job into a fresh image and simulate it."""

from vtakit.blocks import binarise
from vtakit.config import VtaConfig
from vtakit.dram import DramImage, read_region, write_region
from vtakit.funcsim import run
from vtakit.progbuild import compile_job, make_job


def ops_pairs(alu_ops):
    """AluOp list -> (name, imm) pairs the oracle understands."""
    return [(op.op.name.lower(), op.imm) for op in alu_ops]


def compile_and_run(a, b, x=None, alu_ops=(), cfg=None, strict=True,
                    capacity=1 << 22):
    """Full pipeline for one job; returns (out_bytes, stats, program, img)."""
    cfg = cfg or VtaConfig()
    job = make_job(a, b, x, alu_ops, cfg)
    img = DramImage(capacity=capacity, page_bytes=cfg.page_bytes)
    program = compile_job(img, job, cfg)
    write_region(img, program.layout["inp"], binarise(job.a))
    write_region(img, program.layout["wgt"], binarise(job.b))
    if job.x is not None:
        write_region(img, program.layout["acc"], binarise(job.x))
    write_region(img, program.layout["uop"], program.uop_bytes())
    write_region(img, program.layout["instr"], program.instr_bytes())
    stats = run(img, program.layout["instr"], cfg, strict_deps=strict)
    return read_region(img, program.layout["out"]), stats, program, img
