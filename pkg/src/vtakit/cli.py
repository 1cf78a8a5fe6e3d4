"""Command line front end: compile, run, verify, disasm, inspect.

Exit codes: 0 success, 1 verification mismatch, 2 bad input (manifest,
arguments, malformed artifacts), 3 missing file, 4 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import blocks, oracle
from .config import VtaConfig, from_mapping
from .dram import (DEFAULT_CAPACITY, DramImage, Kind, Region, nb_elem,
                   phys_to_logical, precision, read_region, write_region)
from .errors import ToolchainError
from .funcsim import RunStats, run
from .isa import disassemble
from .progbuild import AluOp, compile_job, make_job, validate_program
from .tensorfront import (LayerSpec, NetworkPlan, PoolSpec, apply_transition,
                          chain_layers)


class CliError(ToolchainError):
    """Bad manifest or command input."""


def _need(mapping: dict, key: str, what: str):
    if key not in mapping:
        raise CliError(f"{what} is missing required key {key!r}")
    return mapping[key]


def _load_array(entry, base: Path, what: str) -> np.ndarray:
    if not isinstance(entry, dict):
        raise CliError(f"{what} must be an object with a 'file' or 'data' key")
    if "file" in entry:
        arr = np.load(base / entry["file"])
    elif "data" in entry:
        arr = np.asarray(entry["data"])
    else:
        raise CliError(f"{what} needs either a 'file' or a 'data' key")
    if not np.issubdtype(arr.dtype, np.integer):
        raise CliError(f"{what} must hold integers, got dtype {arr.dtype}")
    return arr.astype(np.int64)


def _write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _layer_spec(entry: dict, base: Path, index: int) -> LayerSpec:
    kind = str(_need(entry, "kind", f"layer {index}"))
    weight = _load_array(_need(entry, "weight", f"layer {index}"), base,
                         f"layer {index} weight")
    bias = None
    if entry.get("bias") is not None:
        bias = _load_array(entry["bias"], base, f"layer {index} bias")
    pooling = None
    if entry.get("pooling") is not None:
        pooling = PoolSpec.from_dict(entry["pooling"])
    return LayerSpec(kind=kind, weight=weight, bias=bias,
                     stride=int(entry.get("stride", 1)),
                     pad=int(entry.get("pad", 0)),
                     activation=entry.get("activation"),
                     pooling=pooling,
                     requant_shift=int(entry.get("requant_shift", 0)))


def _region_entries(img: DramImage, files: dict[str, str]) -> list[dict]:
    entries = []
    for region in img.regions:
        d = region.to_dict()
        d["file"] = files.get(region.name)
        entries.append(d)
    return entries


def cmd_compile(args) -> int:
    manifest_path = Path(args.manifest)
    base = manifest_path.parent
    manifest = json.loads(manifest_path.read_text())
    cfg = from_mapping(manifest.get("vta", {}))
    dram_sec = manifest.get("dram", {})
    capacity = int(dram_sec.get("capacity", DEFAULT_CAPACITY))
    offset = int(dram_sec.get("offset", 0))
    img = DramImage(capacity=capacity, offset=offset, page_bytes=cfg.page_bytes)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    job_kind = manifest.get("job")
    if job_kind == "matmul":
        layout = _compile_matmul(manifest, base, cfg, img, out_dir)
    elif job_kind == "network":
        layout = _compile_network(manifest, base, cfg, img, out_dir)
    else:
        raise CliError(f"manifest job must be 'matmul' or 'network', got {job_kind!r}")
    layout["config"] = dataclasses.asdict(cfg)
    layout["offset"] = offset
    layout["capacity"] = capacity
    layout["page_bytes"] = cfg.page_bytes
    _write(out_dir / "dram_layout.json", (json.dumps(layout, indent=2) + "\n").encode())
    n_regions = len(layout["regions"])
    print(f"compiled {job_kind} job: {n_regions} regions -> {out_dir}")
    return 0


def _check_program(program, cfg: VtaConfig, what: str) -> None:
    problems = validate_program(program, cfg)
    if problems:
        detail = "; ".join(problems[:5])
        raise RuntimeError(f"generated {what} failed static checks: {detail}")


def _compile_matmul(manifest, base: Path, cfg: VtaConfig,
                    img: DramImage, out_dir: Path) -> dict:
    a = _load_array(_need(manifest, "a", "matmul manifest"), base, "operand a")
    b = _load_array(_need(manifest, "b", "matmul manifest"), base, "operand b")
    x = None
    if manifest.get("x") is not None:
        x = _load_array(manifest["x"], base, "addend x")
    ops = [AluOp.from_dict(d) for d in manifest.get("alu_ops", [])]
    job = make_job(a, b, x, ops, cfg)
    program = compile_job(img, job, cfg)
    _check_program(program, cfg, "program")

    payloads = {"inp": blocks.binarise(job.a), "wgt": blocks.binarise(job.b),
                "uop": program.uop_bytes(), "instr": program.instr_bytes()}
    if job.x is not None:
        payloads["acc"] = blocks.binarise(job.x)
    files = {"inp": "input.bin", "wgt": "weight.bin", "acc": "accumulator.bin",
             "uop": "uop.bin", "instr": "instructions.bin"}
    files = {name: fname for name, fname in files.items() if name in payloads}
    for name, fname in files.items():
        _write(out_dir / fname, payloads[name])

    expected = oracle.matmul_out_bytes(
        a, b, x, [(op.op.name.lower(), op.imm) for op in ops], cfg.block_size)
    _write(out_dir / "expected_out.bin", expected)
    print(f"program: {len(program.instructions)} instructions,"
          f" {len(program.uops)} micro-ops")
    return {"job": "matmul",
            "alu_ops": [op.to_dict() for op in ops],
            "predicted_stats": program.predicted_stats,
            "regions": _region_entries(img, files)}


def _compile_network(manifest, base: Path, cfg: VtaConfig,
                     img: DramImage, out_dir: Path) -> dict:
    input_tensor = _load_array(_need(manifest, "input", "network manifest"),
                               base, "network input")
    layer_entries = _need(manifest, "layers", "network manifest")
    specs = [_layer_spec(e, base, i) for i, e in enumerate(layer_entries)]
    plan = chain_layers(specs, input_tensor, cfg, img)

    files: dict[str, str] = {}
    for i, (lplan, job, program) in enumerate(zip(plan.layers, plan.jobs,
                                                  plan.programs)):
        _check_program(program, cfg, f"layer {i} program")
        sub = f"layer{i:02d}"
        payloads = {"inp": blocks.binarise(job.a), "wgt": blocks.binarise(job.b),
                    "uop": program.uop_bytes(), "instr": program.instr_bytes()}
        if job.x is not None:
            payloads["acc"] = blocks.binarise(job.x)
        names = {"inp": "input.bin", "wgt": "weight.bin", "acc": "accumulator.bin",
                 "uop": "uop.bin", "instr": "instructions.bin"}
        for name, fname in names.items():
            if name not in payloads:
                continue
            rel = f"{sub}/{fname}"
            files[lplan.prefix + name] = rel
            _write(out_dir / rel, payloads[name])

    layer_dicts = [spec.oracle_dict() for spec in specs]
    expected = oracle.network_out_bytes(layer_dicts, input_tensor, cfg.block_size)
    _write(out_dir / "expected_out.bin", expected)
    total_instr = sum(len(p.instructions) for p in plan.programs)
    print(f"network: {len(plan.layers)} layers, {total_instr} instructions,"
          f" transitions {plan.transitions}")
    return {"job": "network", "chain": plan.to_dict(),
            "regions": _region_entries(img, files)}


def _load_artifacts(art: Path) -> tuple[dict, VtaConfig, DramImage, dict[str, Region]]:
    layout = json.loads((art / "dram_layout.json").read_text())
    cfg = from_mapping(layout["config"])
    img = DramImage(capacity=int(layout["capacity"]), offset=int(layout["offset"]),
                    page_bytes=int(layout["page_bytes"]))
    regions: dict[str, Region] = {}
    for entry in layout["regions"]:
        region = Region.from_dict(entry)
        img.regions.append(region)
        regions[region.name] = region
        fname = entry.get("file")
        if fname:
            data = (art / fname).read_bytes()
            if len(data) != region.size_bytes:
                raise CliError(f"{fname} holds {len(data)} bytes, region"
                               f" {region.name} expects {region.size_bytes}")
            write_region(img, region, data)
    return layout, cfg, img, regions


def _sum_stats(dicts) -> dict:
    total: dict = {}
    for d in dicts:
        for k, v in d.items():
            total[k] = total.get(k, 0) + v
    return total


def cmd_run(args) -> int:
    art = Path(args.artifacts)
    layout, cfg, img, regions = _load_artifacts(art)
    trace = print if args.trace else None
    per_layer = None
    if layout["job"] == "matmul":
        stats = run(img, regions["instr"], cfg, trace=trace,
                    strict_deps=args.strict_deps)
        predicted = layout.get("predicted_stats")
        out_bytes = read_region(img, regions["out"])
    else:
        plan = NetworkPlan.from_dict(layout["chain"])
        stats = RunStats()
        per_layer = []
        for i, lplan in enumerate(plan.layers):
            layer_stats = run(img, regions[lplan.prefix + "instr"], cfg,
                              trace=trace, strict_deps=args.strict_deps)
            per_layer.append(layer_stats.to_dict())
            stats.add(layer_stats)
            if i + 1 < len(plan.layers):
                nxt = plan.layers[i + 1]
                apply_transition(img, regions[lplan.prefix + "out"],
                                 regions[nxt.prefix + "inp"],
                                 lplan, nxt, plan.transitions[i], cfg)
        predicted = _sum_stats(ld.get("predicted_stats", {})
                               for ld in layout["chain"]["layers"])
        out_bytes = read_region(img, regions[plan.layers[-1].prefix + "out"])

    _write(art / "out.bin", out_bytes)
    report = {"observed": stats.to_dict(), "predicted": predicted}
    if per_layer is not None:
        report["layers"] = per_layer
    _write(art / "stats.json", (json.dumps(report, indent=2) + "\n").encode())
    print(f"ran {stats.instruction_count} instructions:"
          f" gemm_loop_count={stats.gemm_loop_count}"
          f" alu_loop_count={stats.alu_loop_count}"
          f" loaded={stats.dram_bytes_loaded}B stored={stats.dram_bytes_stored}B")
    if stats.dep_violations:
        print(f"WARNING: {len(stats.dep_violations)} dependency token violations")
    print(f"wrote {art / 'out.bin'} ({len(out_bytes)} bytes)")
    return 0


def cmd_verify(args) -> int:
    art = Path(args.artifacts)
    got = (art / "out.bin").read_bytes()
    want = (art / "expected_out.bin").read_bytes()
    if got == want:
        print(f"PASS: out.bin matches expected_out.bin ({len(got)} bytes)")
        return 0
    if len(got) != len(want):
        print(f"FAIL: out.bin is {len(got)} bytes, expected {len(want)}")
        return 1
    diff = np.flatnonzero(np.frombuffer(got, np.uint8) != np.frombuffer(want, np.uint8))
    off = int(diff[0])
    print(f"FAIL at byte offset {off}: out={got[off]:#04x}"
          f" expected={want[off]:#04x} ({diff.size} bytes differ)")
    return 1


def cmd_disasm(args) -> int:
    path = Path(args.path)
    if path.is_dir():
        instr = (path / "instructions.bin").read_bytes()
        uop_path = path / "uop.bin"
        uop = uop_path.read_bytes() if uop_path.exists() else b""
    else:
        instr = path.read_bytes()
        uop = Path(args.uop).read_bytes() if args.uop else b""
    print(disassemble(instr, uop))
    return 0


def cmd_inspect(args) -> int:
    art = Path(args.artifacts)
    layout = json.loads((art / "dram_layout.json").read_text())
    cfg = from_mapping(layout["config"])
    offset = int(layout["offset"])
    print(f"job: {layout['job']}  capacity: {layout['capacity']}"
          f"  offset: {offset}  page: {layout['page_bytes']}")
    print(f"config: block_size={cfg.block_size} inp={cfg.inp_buf_depth}"
          f" wgt={cfg.wgt_buf_depth} acc={cfg.acc_buf_depth}"
          f" out={cfg.out_buf_depth} uop={cfg.uop_buf_depth}")
    header = f"{'name':24} {'kind':6} {'phys':>10} {'logical':>10} {'bytes':>10}  file"
    print(header)
    print("-" * len(header))
    ok = True
    for entry in layout["regions"]:
        region = Region.from_dict(entry)
        kind = region.kind
        expect = phys_to_logical(region.phy_start, offset,
                                 precision(kind, cfg), nb_elem(kind, cfg))
        mark = ""
        if expect != region.log_start:
            mark = f"  MISMATCH (recomputed {expect:#x})"
            ok = False
        print(f"{region.name:24} {kind.value:6} {region.phy_start:#10x}"
              f" {region.log_start:#10x} {region.size_bytes:10d}"
              f"  {entry.get('file') or '-'}{mark}")
    if not ok:
        print("address table is inconsistent")
        return 2
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vtakit",
        description="Compile matmul and convnet jobs to VTA instruction"
                    " streams and execute them on the functional simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("compile", help="lower a job manifest to a DRAM image")
    p.add_argument("--manifest", required=True, help="path to manifest.json")
    p.add_argument("--out", required=True, help="artifact output directory")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("run", help="execute compiled artifacts on the simulator")
    p.add_argument("--artifacts", required=True)
    p.add_argument("--trace", action="store_true",
                   help="print each instruction as it executes")
    p.add_argument("--strict-deps", action="store_true",
                   help="treat dependency token violations as errors")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("verify", help="compare out.bin against expected_out.bin")
    p.add_argument("--artifacts", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("disasm", help="disassemble an instruction stream")
    p.add_argument("path", help="artifact directory or instructions.bin file")
    p.add_argument("--uop", help="micro-op file to list alongside", default=None)
    p.set_defaults(func=cmd_disasm)

    p = sub.add_parser("inspect", help="print and cross-check the DRAM layout")
    p.add_argument("--artifacts", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 3
    except (ToolchainError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 4


if __name__ == "__main__":
    raise SystemExit(main())
