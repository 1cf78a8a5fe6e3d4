"""Compiler toolchain and functional simulator for a VTA-style accelerator.

The pipeline: tensor workloads lower to block matrix multiplies
(tensorfront), jobs become instruction streams over a laid-out DRAM image
(progbuild, dram), and the simulator executes those streams buffer-accurately
(funcsim).  An independent reference model (oracle) predicts the exact output
bytes for verification.
"""

from .config import ConfigError, VtaConfig, default_config
from .dram import DramImage, Kind, Region, allocate
from .errors import ToolchainError
from .funcsim import RunStats, SimulationError, run
from .isa import (AluInstr, AluOpcode, BufferId, DepFlags, FinishInstr,
                  GemmInstr, MemInstr, Opcode, Uop, decode_instruction,
                  disassemble, encode_instruction)
from .progbuild import AluOp, MatMulJob, Program, compile_job, make_job
from .tensorfront import LayerSpec, NetworkPlan, PoolSpec, chain_layers

__version__ = "0.1.0"

__all__ = [
    "AluInstr", "AluOp", "AluOpcode", "BufferId", "ConfigError", "DepFlags",
    "DramImage", "FinishInstr", "GemmInstr", "Kind", "LayerSpec", "MatMulJob",
    "MemInstr", "NetworkPlan", "Opcode", "PoolSpec", "Program", "Region",
    "RunStats", "SimulationError", "ToolchainError", "Uop", "VtaConfig",
    "allocate", "chain_layers", "compile_job", "decode_instruction",
    "default_config", "disassemble", "encode_instruction", "make_job", "run",
]
