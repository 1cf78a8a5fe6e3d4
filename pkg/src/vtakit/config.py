"""Hardware profile of one VTA instance, shared by every stage of the toolchain."""

from __future__ import annotations

from dataclasses import dataclass, fields

from .errors import ToolchainError


class ConfigError(ToolchainError):
    """A VtaConfig violates a hardware invariant."""


@dataclass(frozen=True)
class VtaConfig:
    """Parameters of the target accelerator.

    Buffer depths count structures, not bytes: INP/ACC/OUT depths are in
    block_size vectors, wgt_buf_depth is in block_size x block_size matrices,
    uop_buf_depth is in 32-bit micro-ops.  The element widths are fixed by the
    hardware datapath (int8 operands, int32 accumulators).
    """

    block_size: int = 16
    inp_buf_depth: int = 2048
    wgt_buf_depth: int = 1024
    acc_buf_depth: int = 2048
    out_buf_depth: int = 2048
    uop_buf_depth: int = 8192
    page_bytes: int = 4096
    inp_width_bytes: int = 1
    wgt_width_bytes: int = 1
    out_width_bytes: int = 1
    acc_width_bytes: int = 4


def default_config() -> VtaConfig:
    return VtaConfig()


def _is_pow2(n: int) -> bool:
    return isinstance(n, int) and n >= 2 and (n & (n - 1)) == 0


_POW2_FIELDS = (
    "block_size",
    "inp_buf_depth",
    "wgt_buf_depth",
    "acc_buf_depth",
    "out_buf_depth",
    "uop_buf_depth",
    "page_bytes",
)

_FIXED_WIDTHS = {
    "inp_width_bytes": 1,
    "wgt_width_bytes": 1,
    "out_width_bytes": 1,
    "acc_width_bytes": 4,
}


def validate(cfg: VtaConfig) -> VtaConfig:
    """Check every invariant, raising ConfigError naming the first violation."""
    for name in _POW2_FIELDS:
        value = getattr(cfg, name)
        if not _is_pow2(value):
            raise ConfigError(f"{name} must be a power of two >= 2, got {value!r}")
    for name, expected in _FIXED_WIDTHS.items():
        value = getattr(cfg, name)
        if value != expected:
            raise ConfigError(f"{name} is fixed by the datapath to {expected}, got {value!r}")
    # One block must fit each data buffer, otherwise no job can be scheduled.
    for name in ("inp_buf_depth", "acc_buf_depth", "out_buf_depth"):
        if getattr(cfg, name) < cfg.block_size:
            raise ConfigError(f"{name}={getattr(cfg, name)} holds less than one block of {cfg.block_size} vectors")
    return cfg


def from_mapping(overrides: dict) -> VtaConfig:
    """Build a config from manifest overrides on top of the defaults."""
    known = {f.name for f in fields(VtaConfig)}
    bad = sorted(set(overrides) - known)
    if bad:
        raise ConfigError(f"unknown config field(s): {', '.join(bad)}")
    return validate(VtaConfig(**overrides))
