"""Functional simulator semantics: loads, stores, GEMM, ALU, ledger, run loop."""

import numpy as np
import pytest

from vtakit.config import VtaConfig
from vtakit.dram import DramImage, Kind, allocate, read_region, write_region
from vtakit.funcsim import SimulationError, _Simulator, run, truncate_acc_to_out
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
    encode_instruction,
    encode_uop,
)

SMALL = VtaConfig(block_size=2, inp_buf_depth=8, wgt_buf_depth=8,
                  acc_buf_depth=8, out_buf_depth=8, uop_buf_depth=32)


def fresh_img(capacity=1 << 18):
    return DramImage(capacity=capacity, page_bytes=SMALL.page_bytes)


def put(img, name, kind, data):
    region = allocate(img, len(data), kind, SMALL, name)
    write_region(img, region, bytes(data))
    return region


def seal(img, instrs):
    stream = b"".join(encode_instruction(i) for i in instrs)
    region = allocate(img, len(stream), Kind.INSTR, SMALL, "instr")
    write_region(img, region, stream)
    return region


def load(buffer_id, sram, dram, y=1, x=1, stride=None, deps=DepFlags(), **pads):
    return MemInstr(opcode=Opcode.LOAD, buffer_id=buffer_id, sram_base=sram,
                    dram_base=dram, y_size=y, x_size=x,
                    x_stride=x if stride is None else stride, deps=deps, **pads)


class TestLoad:
    def test_input_vectors_land_in_order(self):
        img = fresh_img()
        region = put(img, "inp", Kind.INP, bytes([1, 2, 3, 4]))
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.exec_load(load(BufferId.INP, 0, region.log_start, x=2))
        assert sim.sram.inp[0].tolist() == [1, 2]
        assert sim.sram.inp[1].tolist() == [3, 4]
        assert sim.stats.dram_bytes_loaded == 4

    def test_strided_rows_skip_dram(self):
        img = fresh_img()
        region = put(img, "inp", Kind.INP, bytes([10, 11, 20, 21, 30, 31, 40, 41]))
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.exec_load(load(BufferId.INP, 0, region.log_start, y=2, x=1, stride=2))
        assert sim.sram.inp[0].tolist() == [10, 11]
        assert sim.sram.inp[1].tolist() == [30, 31]

    def test_pads_zero_the_borders(self):
        img = fresh_img()
        region = put(img, "inp", Kind.INP, bytes([9, 9, 9, 9]))
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.sram.inp[:] = 7
        sim.exec_load(load(BufferId.INP, 0, region.log_start, y=1, x=2,
                           stride=2, x_pad_left=1, x_pad_right=1))
        assert sim.sram.inp[0].tolist() == [0, 0]
        assert sim.sram.inp[1].tolist() == [9, 9]
        assert sim.sram.inp[2].tolist() == [9, 9]
        assert sim.sram.inp[3].tolist() == [0, 0]
        # Pad slots come from nowhere: only the real payload counts.
        assert sim.stats.dram_bytes_loaded == 4

    def test_row_pads_fill_whole_rows(self):
        img = fresh_img()
        region = put(img, "inp", Kind.INP, bytes([5, 6]))
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.sram.inp[:] = 7
        sim.exec_load(load(BufferId.INP, 0, region.log_start, y=1, x=1,
                           y_pad_top=1, y_pad_bottom=1))
        assert sim.sram.inp[0].tolist() == [0, 0]
        assert sim.sram.inp[1].tolist() == [5, 6]
        assert sim.sram.inp[2].tolist() == [0, 0]

    def test_negative_int8_payload(self):
        img = fresh_img()
        region = put(img, "inp", Kind.INP, b"\xff\x80")
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.exec_load(load(BufferId.INP, 0, region.log_start, x=1))
        assert sim.sram.inp[0].tolist() == [-1, -128]

    def test_weight_matrix_layout(self):
        img = fresh_img()
        region = put(img, "wgt", Kind.WGT, bytes([1, 2, 3, 4]))
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.exec_load(load(BufferId.WGT, 0, region.log_start, x=1))
        assert sim.sram.wgt[0].tolist() == [[1, 2], [3, 4]]

    def test_accumulator_int32_layout(self):
        img = fresh_img()
        payload = np.array([100000, -7], dtype="<i4").tobytes()
        region = put(img, "acc", Kind.ACC, payload)
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.exec_load(load(BufferId.ACC, 0, region.log_start, x=1))
        assert sim.sram.acc[0].tolist() == [100000, -7]

    def test_uop_fields_unpack(self):
        img = fresh_img()
        region = put(img, "uop", Kind.UOP, encode_uop(Uop(5, 3, 1)))
        sim = _Simulator(img, SMALL, strict_deps=True)
        sim.exec_load(load(BufferId.UOP, 4, region.log_start, x=1))
        assert sim.sram.uop[4].tolist() == [5, 3, 1]

    def test_out_buffer_rejected(self):
        sim = _Simulator(fresh_img(), SMALL, strict_deps=True)
        with pytest.raises(SimulationError, match="OUT"):
            sim.exec_load(load(BufferId.OUT, 0, 0, x=1))

    def test_depth_overflow(self):
        img = fresh_img()
        region = put(img, "inp", Kind.INP, bytes(32))
        sim = _Simulator(img, SMALL, strict_deps=True)
        with pytest.raises(SimulationError, match="exceeds depth"):
            sim.exec_load(load(BufferId.INP, 4, region.log_start, x=8))


class TestStore:
    def _store(self, acc_rows, y=1, x=None, stride=None):
        img = fresh_img()
        n = len(acc_rows)
        out = allocate(img, n * 2, Kind.OUT, SMALL, "out")
        sim = _Simulator(img, SMALL, strict_deps=True)
        for i, row in enumerate(acc_rows):
            sim.sram.acc[i] = row
        x = n if x is None else x
        sim.exec_store(MemInstr(opcode=Opcode.STORE, buffer_id=BufferId.OUT,
                                sram_base=0, dram_base=out.log_start,
                                y_size=y, x_size=x,
                                x_stride=x if stride is None else stride))
        return sim, read_region(img, out)

    def test_truncates_low_byte_twos_complement(self):
        _, raw = self._store([[300, -1], [128, -129]])
        # 300 -> 44, -1 -> 0xFF, 128 -> 0x80, -129 -> 0x7F
        assert raw == b"\x2c\xff\x80\x7f"

    def test_int8_identity_region(self):
        _, raw = self._store([[-128, 127]])
        assert np.frombuffer(raw, dtype=np.int8).tolist() == [-128, 127]

    def test_padding_rejected(self):
        sim = _Simulator(fresh_img(), SMALL, strict_deps=True)
        with pytest.raises(SimulationError, match="padding"):
            sim.exec_store(MemInstr(opcode=Opcode.STORE, buffer_id=BufferId.OUT,
                                    y_size=1, x_size=1, x_stride=1, y_pad_top=1))

    def test_non_out_buffer_rejected(self):
        sim = _Simulator(fresh_img(), SMALL, strict_deps=True)
        with pytest.raises(SimulationError, match="OUT"):
            sim.exec_store(MemInstr(opcode=Opcode.STORE, buffer_id=BufferId.ACC,
                                    y_size=1, x_size=1, x_stride=1))

    def test_depth_overflow(self):
        img = fresh_img()
        out = allocate(img, 64, Kind.OUT, SMALL, "out")
        sim = _Simulator(img, SMALL, strict_deps=True)
        with pytest.raises(SimulationError, match="exceeds"):
            sim.exec_store(MemInstr(opcode=Opcode.STORE, buffer_id=BufferId.OUT,
                                    sram_base=4, dram_base=out.log_start,
                                    y_size=1, x_size=8, x_stride=8))

    def test_truncate_helper_range_check(self):
        sim = _Simulator(fresh_img(), SMALL, strict_deps=True)
        with pytest.raises(SimulationError):
            truncate_acc_to_out(sim.sram, 6, 4)


class TestGemm:
    def _sim(self):
        return _Simulator(fresh_img(), SMALL, strict_deps=True)

    def test_row_times_matrix(self):
        sim = self._sim()
        sim.sram.inp[0] = [1, 2]
        sim.sram.wgt[0] = [[1, 2], [3, 4]]
        sim.sram.uop[0] = [0, 0, 0]
        sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=1, lp_out=1, lp_in=1))
        # result[e] = sum_k inp[k] * wgt[e, k]
        assert sim.sram.acc[0].tolist() == [5, 11]

    def test_accumulates_onto_existing(self):
        sim = self._sim()
        sim.sram.inp[0] = [1, 1]
        sim.sram.wgt[0] = [[1, 0], [0, 1]]
        sim.sram.acc[0] = [100, 200]
        sim.sram.uop[0] = [0, 0, 0]
        sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=1, lp_out=1, lp_in=1))
        assert sim.sram.acc[0].tolist() == [101, 201]

    def test_wraps_at_int32(self):
        sim = self._sim()
        sim.sram.inp[0] = [1, 0]
        sim.sram.wgt[0] = [[1, 0], [0, 0]]
        sim.sram.acc[0] = [(1 << 31) - 1, 0]
        sim.sram.uop[0] = [0, 0, 0]
        sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=1, lp_out=1, lp_in=1))
        assert sim.sram.acc[0, 0] == -(1 << 31)

    def test_factor_indexing(self):
        # Two inner iterations advance acc and inp by their in-factors.
        sim = self._sim()
        sim.sram.inp[0] = [1, 0]
        sim.sram.inp[1] = [0, 2]
        sim.sram.wgt[0] = [[1, 1], [1, 1]]
        sim.sram.uop[0] = [0, 0, 0]
        sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=1, lp_out=1, lp_in=2,
                                acc_factor_in=1, inp_factor_in=1))
        assert sim.sram.acc[0].tolist() == [1, 1]
        assert sim.sram.acc[1].tolist() == [2, 2]

    def test_reset_zeroes_and_counts(self):
        sim = self._sim()
        sim.sram.acc[:] = 9
        sim.sram.uop[0] = [0, 0, 0]
        sim.sram.uop[1] = [1, 0, 0]
        sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=2, lp_out=1, lp_in=3,
                                acc_factor_in=2, reset=1))
        assert (sim.sram.acc[:6] == 0).all()
        assert sim.stats.gemm_loop_count == 6
        assert sim.stats.gemm_inner_iterations == 3

    def test_loop_counts_include_every_iteration(self):
        sim = self._sim()
        sim.sram.uop[0] = [0, 0, 0]
        sim.sram.uop[1] = [0, 0, 0]
        sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=2, lp_out=2, lp_in=3))
        assert sim.stats.gemm_loop_count == 12
        assert sim.stats.gemm_inner_iterations == 6

    def test_acc_bound_error_names_coordinates(self):
        sim = self._sim()
        sim.sram.uop[0] = [7, 0, 0]
        with pytest.raises(SimulationError, match=r"i_out=0, i_in=1"):
            sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=1, lp_out=1, lp_in=2,
                                    acc_factor_in=4))

    def test_uop_range_error(self):
        sim = self._sim()
        with pytest.raises(SimulationError, match="micro-op range"):
            sim.exec_gemm(GemmInstr(uop_begin=5, uop_end=2, lp_out=1, lp_in=1))
        with pytest.raises(SimulationError, match="micro-op range"):
            sim.exec_gemm(GemmInstr(uop_begin=0, uop_end=33, lp_out=1, lp_in=1))


class TestAlu:
    def _sim(self, acc0):
        sim = _Simulator(fresh_img(), SMALL, strict_deps=True)
        sim.sram.acc[0] = acc0
        sim.sram.uop[0] = [0, 0, 0]
        return sim

    def _imm(self, op, imm, acc0):
        sim = self._sim(acc0)
        sim.exec_alu(AluInstr(alu_opcode=op, uop_begin=0, uop_end=1,
                              lp_out=1, lp_in=1, use_imm=1, imm=imm))
        return sim.sram.acc[0].tolist()

    def test_min_imm(self):
        assert self._imm(AluOpcode.MIN, 5, [3, 9]) == [3, 5]

    def test_max_imm(self):
        assert self._imm(AluOpcode.MAX, 0, [-4, 4]) == [0, 4]

    def test_add_imm_wraps(self):
        assert self._imm(AluOpcode.ADD, 1, [(1 << 31) - 1, 0]) == [-(1 << 31), 1]

    def test_shr_imm(self):
        assert self._imm(AluOpcode.SHR, 2, [20, -20]) == [5, -5]

    def test_shr_negative_shifts_left(self):
        assert self._imm(AluOpcode.SHR, -3, [1, -1]) == [8, -8]

    def test_shr_left_wraps(self):
        assert self._imm(AluOpcode.SHR, -31, [1, 0]) == [-(1 << 31), 0]

    def test_vector_mode_reads_source_slot(self):
        sim = _Simulator(fresh_img(), SMALL, strict_deps=True)
        sim.sram.acc[0] = [1, 2]
        sim.sram.acc[3] = [10, 20]
        sim.sram.uop[0] = [0, 3, 0]  # dst slot 0, src slot 3
        sim.exec_alu(AluInstr(alu_opcode=AluOpcode.ADD, uop_begin=0, uop_end=1,
                              lp_out=1, lp_in=1))
        assert sim.sram.acc[0].tolist() == [11, 22]
        assert sim.sram.acc[3].tolist() == [10, 20]

    def test_reset_mode(self):
        sim = self._sim([5, 5])
        sim.exec_alu(AluInstr(alu_opcode=AluOpcode.ADD, uop_begin=0, uop_end=1,
                              lp_out=1, lp_in=2, dst_factor_in=1, reset=1))
        assert (sim.sram.acc[:2] == 0).all()
        assert sim.stats.alu_loop_count == 2

    def test_dst_bound_error(self):
        sim = self._sim([0, 0])
        with pytest.raises(SimulationError, match="dst index"):
            sim.exec_alu(AluInstr(alu_opcode=AluOpcode.MIN, uop_begin=0, uop_end=1,
                                  lp_out=1, lp_in=9, dst_factor_in=1, use_imm=1))

    def test_src_bound_error(self):
        sim = _Simulator(fresh_img(), SMALL, strict_deps=True)
        sim.sram.uop[0] = [0, 30, 0]
        with pytest.raises(SimulationError, match="src index"):
            sim.exec_alu(AluInstr(alu_opcode=AluOpcode.MIN, uop_begin=0, uop_end=1,
                                  lp_out=1, lp_in=1))


class TestRunLoop:
    def test_single_finish(self):
        img = fresh_img()
        region = seal(img, [FinishInstr()])
        stats = run(img, region, SMALL, strict_deps=True)
        assert stats.instruction_count == 1
        assert stats.dep_violations == []

    def test_stops_at_finish(self):
        img = fresh_img()
        # The word after FINISH is garbage that would fail to execute.
        region = seal(img, [FinishInstr()])
        tail = allocate(img, 16, Kind.INSTR, SMALL, "tail")
        write_region(img, tail, b"\x07" + b"\x00" * 15)
        merged = allocate(img, 0x20, Kind.INSTR, SMALL, "merged")
        write_region(img, merged, read_region(img, region) + read_region(img, tail))
        stats = run(img, merged, SMALL, strict_deps=True)
        assert stats.instruction_count == 1

    def test_missing_finish(self):
        img = fresh_img()
        inp = put(img, "inp", Kind.INP, bytes(4))
        region = seal(img, [load(BufferId.INP, 0, inp.log_start, x=2)])
        with pytest.raises(SimulationError, match="without FINISH"):
            run(img, region, SMALL)

    def test_undecodable_word_is_located(self):
        img = fresh_img()
        region = allocate(img, 16, Kind.INSTR, SMALL, "instr")
        write_region(img, region, b"\x07" + b"\x00" * 15)
        with pytest.raises(SimulationError, match="at instruction 0"):
            run(img, region, SMALL)

    def test_strict_deps_raise(self):
        img = fresh_img()
        region = seal(img, [
            GemmInstr(uop_begin=0, uop_end=0, lp_out=1, lp_in=1,
                      deps=DepFlags(pop_prev=1)),
            FinishInstr(),
        ])
        with pytest.raises(SimulationError, match="dependency ledger"):
            run(img, region, SMALL, strict_deps=True)

    def test_lenient_deps_record_violations(self):
        img = fresh_img()
        wgt = put(img, "wgt", Kind.WGT, bytes(4))
        region = seal(img, [
            # Unmatched push leaves a token in load->compute at the end.
            load(BufferId.WGT, 0, wgt.log_start, x=1, deps=DepFlags(push_next=1)),
            FinishInstr(),
        ])
        stats = run(img, region, SMALL, strict_deps=False)
        assert any("token" in v for v in stats.dep_violations)

    def test_flag_without_neighbour(self):
        img = fresh_img()
        inp = put(img, "inp", Kind.INP, bytes(4))
        region = seal(img, [
            load(BufferId.INP, 0, inp.log_start, x=1, deps=DepFlags(pop_prev=1)),
            FinishInstr(),
        ])
        stats = run(img, region, SMALL, strict_deps=False)
        assert any("no neighbour" in v for v in stats.dep_violations)

    def test_trace_lines(self):
        img = fresh_img()
        region = seal(img, [FinishInstr(deps=DepFlags())])
        lines = []
        run(img, region, SMALL, trace=lines.append)
        assert lines == ["0000: FINISH deps=0000"]

    def test_region_lookup_by_name(self):
        img = fresh_img()
        a = seal(img, [FinishInstr()])
        b = allocate(img, 16, Kind.INSTR, SMALL, "other")
        write_region(img, b, encode_instruction(FinishInstr()))
        with pytest.raises(SimulationError, match="ambiguous"):
            run(img, img.regions, SMALL)
        stats = run(img, img.regions, SMALL, instr="other")
        assert stats.instruction_count == 1

    def test_no_instr_region(self):
        img = fresh_img()
        with pytest.raises(SimulationError, match="no INSTR region"):
            run(img, img.regions, SMALL)
