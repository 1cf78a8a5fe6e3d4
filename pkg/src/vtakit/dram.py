"""Byte-addressable DRAM image: page-granular allocator and address mapping.

Physical addresses are raw byte offsets.  A logical address counts whole
structures of one kind from the start of the accelerator's DRAM window:

    logical = (physical - offset) // (precision * nb_elem)

where precision is the element width in bytes and nb_elem the number of
elements per structure.  Instruction dram_base fields are logical addresses.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .config import VtaConfig
from .errors import ToolchainError

DEFAULT_CAPACITY = 64 * 1024 * 1024


class AllocationError(ToolchainError):
    """The allocator cannot satisfy a request."""


class AddressError(ToolchainError):
    """A physical or logical address is outside the admissible range."""


class RegionError(ToolchainError):
    """A region access does not fit the image or the region."""


class Kind(Enum):
    INP = "INP"
    WGT = "WGT"
    ACC = "ACC"
    OUT = "OUT"
    UOP = "UOP"
    INSTR = "INSTR"


def precision(kind: Kind, cfg: VtaConfig) -> int:
    """Element width in bytes for one structure of this kind."""
    return {
        Kind.INP: cfg.inp_width_bytes,
        Kind.WGT: cfg.wgt_width_bytes,
        Kind.ACC: cfg.acc_width_bytes,
        Kind.OUT: cfg.out_width_bytes,
        Kind.UOP: 4,
        Kind.INSTR: 16,
    }[kind]


def nb_elem(kind: Kind, cfg: VtaConfig) -> int:
    """Elements per structure: vectors hold block_size, matrices block_size^2."""
    if kind in (Kind.INP, Kind.ACC, Kind.OUT):
        return cfg.block_size
    if kind is Kind.WGT:
        return cfg.block_size * cfg.block_size
    return 1


def struct_bytes(kind: Kind, cfg: VtaConfig) -> int:
    return precision(kind, cfg) * nb_elem(kind, cfg)


def phys_to_logical(phy: int, offset: int, precision: int, nb_elem: int) -> int:
    if precision <= 0 or nb_elem <= 0:
        raise AddressError(f"structure geometry must be positive, got {precision}x{nb_elem}")
    if phy < offset:
        raise AddressError(f"physical address {phy:#x} precedes window offset {offset:#x}")
    return (phy - offset) // (precision * nb_elem)


def logical_to_phys(log: int, offset: int, precision: int, nb_elem: int) -> int:
    if precision <= 0 or nb_elem <= 0:
        raise AddressError(f"structure geometry must be positive, got {precision}x{nb_elem}")
    if log < 0:
        raise AddressError(f"logical address must be non-negative, got {log}")
    return offset + log * precision * nb_elem


@dataclass
class Region:
    kind: Kind
    phy_start: int
    size_bytes: int
    log_start: int
    name: str = ""

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "phy_start": self.phy_start,
            "size_bytes": self.size_bytes,
            "log_start": self.log_start,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Region":
        return cls(kind=Kind(d["kind"]), phy_start=int(d["phy_start"]),
                   size_bytes=int(d["size_bytes"]), log_start=int(d["log_start"]),
                   name=d.get("name", ""))


@dataclass
class DramImage:
    """Flat byte store plus a bump allocator over whole pages.

    The first page of the window is never handed out, so no allocation maps
    to logical address 0 of its kind; the first region always starts at
    offset + page_bytes.
    """

    capacity: int = DEFAULT_CAPACITY
    offset: int = 0
    page_bytes: int = 4096
    data: np.ndarray = field(init=False, repr=False)
    alloc_cursor: int = field(init=False)
    regions: list[Region] = field(init=False, default_factory=list)

    def __post_init__(self):
        if self.offset < 0 or self.offset % self.page_bytes:
            raise AddressError(f"offset {self.offset:#x} must be page-aligned and non-negative")
        if self.capacity < self.page_bytes:
            raise AllocationError(f"capacity {self.capacity} smaller than one page")
        self.data = np.zeros(self.capacity, dtype=np.uint8)
        self.alloc_cursor = self.offset + self.page_bytes

    def _bounds(self, phy: int, size: int, what: str) -> int:
        if phy < self.offset or phy + size > self.offset + self.capacity:
            raise AddressError(
                f"{what} [{phy:#x}, {phy + size:#x}) outside window"
                f" [{self.offset:#x}, {self.offset + self.capacity:#x})")
        return phy - self.offset

    def read_bytes(self, phy: int, size: int) -> np.ndarray:
        rel = self._bounds(phy, size, "read")
        return self.data[rel:rel + size]

    def write_bytes(self, phy: int, payload) -> None:
        payload = np.frombuffer(payload, dtype=np.uint8) if isinstance(payload, (bytes, bytearray)) else payload
        rel = self._bounds(phy, len(payload), "write")
        self.data[rel:rel + len(payload)] = payload


def allocate(img: DramImage, size_bytes: int, kind: Kind, cfg: VtaConfig, name: str = "") -> Region:
    """Reserve size_bytes starting on a fresh page and return the region."""
    if size_bytes <= 0:
        raise AllocationError(f"allocation size must be positive, got {size_bytes}")
    start = img.alloc_cursor
    if start % img.page_bytes:
        start += img.page_bytes - start % img.page_bytes
    if start + size_bytes > img.offset + img.capacity:
        raise AllocationError(
            f"cannot allocate {size_bytes} bytes of {kind.value}:"
            f" {img.offset + img.capacity - start} bytes left")
    region = Region(
        kind=kind,
        phy_start=start,
        size_bytes=size_bytes,
        log_start=phys_to_logical(start, img.offset, precision(kind, cfg), nb_elem(kind, cfg)),
        name=name or kind.value.lower(),
    )
    img.alloc_cursor = start + size_bytes
    img.regions.append(region)
    return region


def _check_region(img: DramImage, region: Region) -> None:
    if (region.phy_start < img.offset
            or region.phy_start + region.size_bytes > img.offset + img.capacity):
        raise RegionError(
            f"region {region.name or region.kind.value} [{region.phy_start:#x},"
            f" {region.phy_start + region.size_bytes:#x}) not inside this image")


def write_region(img: DramImage, region: Region, payload: bytes) -> None:
    _check_region(img, region)
    if len(payload) > region.size_bytes:
        raise RegionError(
            f"payload of {len(payload)} bytes overflows {region.size_bytes}-byte"
            f" region {region.name or region.kind.value}")
    img.write_bytes(region.phy_start, payload)


def read_region(img: DramImage, region: Region) -> bytes:
    _check_region(img, region)
    return img.read_bytes(region.phy_start, region.size_bytes).tobytes()
