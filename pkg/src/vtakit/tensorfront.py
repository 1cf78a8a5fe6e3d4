"""Lowers convolution and dense layers onto block-matrix multiply jobs.

Convolutions become matrix products through patch extraction: each output
pixel contributes one row holding the receptive field unrolled channel-major
(channel, then kernel row, then kernel column), and the kernel tensor is
unrolled the same way into one column per filter.  Dense layers are treated
as 1x1 convolutions over a flattened input.  Pooling and the data movement
between chained layers run on the host.

Between two chained layers the stored output matrix either already is the
next layer's operand matrix byte for byte (no pooling, next kernel 1x1,
stride 1, no padding, matching dims: a raw copy) or must be decoded back to
a tensor, pooled, and re-extracted (a reshape transition).
"""

from __future__ import annotations

from dataclasses import dataclass
from math import prod

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import blocks, isa
from .config import VtaConfig
from .dram import DramImage, Kind, Region, read_region, write_region
from .errors import ToolchainError
from .progbuild import AluOp, MatMulJob, Program, compile_job, make_job


class GeometryError(ToolchainError):
    """Tensor dimensions do not fit the requested operation."""


def _check_tensor(x, who: str) -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[0] != 1:
        raise GeometryError(f"{who} must have shape (1, c, h, w), got {x.shape}")
    return x


def conv_out_hw(h: int, w: int, kernel: tuple[int, int],
                stride: int, pad: int) -> tuple[int, int]:
    fh, fw = kernel
    oh = (h + 2 * pad - fh) // stride + 1
    ow = (w + 2 * pad - fw) // stride + 1
    if oh < 1 or ow < 1:
        raise GeometryError(f"kernel {kernel} at stride {stride}, pad {pad}"
                            f" does not fit a {h}x{w} input")
    return oh, ow


def im2row(x, kernel: tuple[int, int], stride: int = 1, pad: int = 0) -> np.ndarray:
    """Unroll conv receptive fields into matrix rows.

    Row oy*ow + ox holds the patch for output pixel (oy, ox); column
    c*fh*fw + dy*fw + dx holds input element (c, dy, dx) of the patch.
    """
    x = _check_tensor(x, "im2row input")
    fh, fw = kernel
    if stride < 1 or pad < 0 or fh < 1 or fw < 1:
        raise GeometryError(f"bad patch geometry kernel={kernel}"
                            f" stride={stride} pad={pad}")
    _, c, h, w = x.shape
    oh, ow = conv_out_hw(h, w, kernel, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    windows = sliding_window_view(x[0], (fh, fw), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :oh, :ow]
    return np.ascontiguousarray(
        windows.transpose(1, 2, 0, 3, 4).reshape(oh * ow, c * fh * fw))


def ker2col(w) -> np.ndarray:
    """Unroll a (nf, c, fh, fw) kernel tensor into one column per filter."""
    w = np.asarray(w)
    if w.ndim != 4:
        raise GeometryError(f"kernel tensor must be 4D, got shape {w.shape}")
    nf = w.shape[0]
    return np.ascontiguousarray(w.reshape(nf, -1).T)


def mat2tensor(m, dims: tuple[int, int, int, int]) -> np.ndarray:
    """Fold an (oh*ow, nf) output matrix back into a (1, nf, oh, ow) tensor."""
    m = np.asarray(m)
    if len(dims) != 4 or dims[0] != 1:
        raise GeometryError(f"target dims must be (1, nf, oh, ow), got {dims}")
    _, nf, oh, ow = dims
    if m.shape != (oh * ow, nf):
        raise GeometryError(f"matrix {m.shape} does not fold into dims {dims}")
    return np.ascontiguousarray(m.T.reshape(1, nf, oh, ow))


def tensor_to_matrix(t) -> np.ndarray:
    """Inverse of mat2tensor: (1, c, h, w) -> (h*w, c)."""
    t = _check_tensor(t, "tensor_to_matrix input")
    _, c, h, w = t.shape
    return np.ascontiguousarray(t.reshape(c, h * w).T)


@dataclass(frozen=True)
class PoolSpec:
    mode: str         # "max" or "avg"
    window: int
    stride: int

    def to_dict(self) -> dict:
        return {"mode": self.mode, "window": self.window, "stride": self.stride}

    @classmethod
    def from_dict(cls, d: dict) -> "PoolSpec":
        return cls(str(d["mode"]), int(d["window"]), int(d["stride"]))


def host_pool(t, spec: PoolSpec) -> np.ndarray:
    """Window pooling on the host; avg divides by shifting, so the window
    area must be a power of two and windows must tile the input exactly."""
    t = _check_tensor(t, "pooling input")
    k, s = spec.window, spec.stride
    _, c, h, w = t.shape
    if k < 1 or s < 1 or k > h or k > w:
        raise GeometryError(f"pool window {k} stride {s} does not fit {h}x{w}")
    if (h - k) % s or (w - k) % s:
        raise GeometryError(f"pool window {k} stride {s} does not tile {h}x{w}")
    windows = sliding_window_view(t, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    if spec.mode == "max":
        return np.ascontiguousarray(windows.max(axis=(4, 5)))
    if spec.mode == "avg":
        area = k * k
        if area & (area - 1):
            raise GeometryError(f"avg pool window area {area} is not a power of two")
        sums = windows.sum(axis=(4, 5), dtype=np.int64)
        return np.ascontiguousarray(sums >> (area.bit_length() - 1)).astype(np.int64)
    raise GeometryError(f"unknown pooling mode {spec.mode!r}")


@dataclass
class LayerSpec:
    """One network layer as the user declares it."""

    kind: str                     # "conv" or "fc"
    weight: np.ndarray            # conv: (nf, c, fh, fw); fc: (nf, features)
    bias: np.ndarray | None = None
    stride: int = 1
    pad: int = 0
    activation: str | None = None  # None or "relu"
    pooling: PoolSpec | None = None
    requant_shift: int = 0

    def oracle_dict(self) -> dict:
        """Plain-dict form consumed by the reference network evaluator."""
        return {"kind": self.kind, "weight": self.weight, "bias": self.bias,
                "stride": self.stride, "pad": self.pad,
                "activation": self.activation,
                "pooling": self.pooling.to_dict() if self.pooling else None,
                "requant_shift": self.requant_shift}


@dataclass
class LayerPlan:
    """Geometry of one lowered layer; everything a runner needs to move data."""

    index: int
    kind: str
    prefix: str
    in_dims: tuple                # as consumed by patch extraction (fc: flattened)
    kernel: tuple
    stride: int
    pad: int
    nf: int
    a_rows: int
    a_cols: int
    conv_out_dims: tuple
    out_dims: tuple
    activation: str | None
    requant_shift: int
    pooling: PoolSpec | None
    alpha: int
    lam: int
    beta: int
    has_bias: bool

    def to_dict(self) -> dict:
        return {
            "index": self.index, "kind": self.kind, "prefix": self.prefix,
            "in_dims": list(self.in_dims), "kernel": list(self.kernel),
            "stride": self.stride, "pad": self.pad, "nf": self.nf,
            "a_rows": self.a_rows, "a_cols": self.a_cols,
            "conv_out_dims": list(self.conv_out_dims),
            "out_dims": list(self.out_dims),
            "activation": self.activation, "requant_shift": self.requant_shift,
            "pooling": self.pooling.to_dict() if self.pooling else None,
            "alpha": self.alpha, "lam": self.lam, "beta": self.beta,
            "has_bias": self.has_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LayerPlan":
        pool = d.get("pooling")
        return cls(
            index=int(d["index"]), kind=str(d["kind"]), prefix=str(d["prefix"]),
            in_dims=tuple(d["in_dims"]), kernel=tuple(d["kernel"]),
            stride=int(d["stride"]), pad=int(d["pad"]), nf=int(d["nf"]),
            a_rows=int(d["a_rows"]), a_cols=int(d["a_cols"]),
            conv_out_dims=tuple(d["conv_out_dims"]), out_dims=tuple(d["out_dims"]),
            activation=d.get("activation"),
            requant_shift=int(d.get("requant_shift", 0)),
            pooling=PoolSpec.from_dict(pool) if pool else None,
            alpha=int(d["alpha"]), lam=int(d["lam"]), beta=int(d["beta"]),
            has_bias=bool(d["has_bias"]),
        )


def post_ops(activation: str | None, requant_shift: int) -> list[AluOp]:
    """Element-wise op sequence a layer runs on its accumulators.

    The final clamp to the 8-bit range always runs, so the stored bytes equal
    the accumulator values and truncation on store loses nothing.
    """
    ops = []
    if activation == "relu":
        ops.append(AluOp(isa.AluOpcode.MAX, 0))
    elif activation is not None:
        raise GeometryError(f"unknown activation {activation!r}")
    if requant_shift < 0:
        raise GeometryError(f"negative requantisation shift {requant_shift}")
    if requant_shift:
        ops.append(AluOp(isa.AluOpcode.SHR, requant_shift))
    ops.append(AluOp(isa.AluOpcode.MIN, 127))
    ops.append(AluOp(isa.AluOpcode.MAX, -128))
    return ops


def compile_layer(spec: LayerSpec, in_dims, cfg: VtaConfig, index: int = 0,
                  prefix: str = "", input_tensor=None) -> tuple[LayerPlan, MatMulJob]:
    """Lower one layer at the given input dims to a matmul job.

    The operand matrix is real data when input_tensor is given (the first
    layer of a chain) and zeros otherwise, since deeper layers receive their
    operands at run time.
    """
    in_dims = tuple(int(d) for d in in_dims)
    if len(in_dims) != 4 or in_dims[0] != 1:
        raise GeometryError(f"layer input dims must be (1, c, h, w), got {in_dims}")
    weight = np.asarray(spec.weight)
    if spec.kind == "fc":
        if weight.ndim != 2:
            raise GeometryError(f"dense weight must be 2D, got shape {weight.shape}")
        features = prod(in_dims[1:])
        if weight.shape[1] != features:
            raise GeometryError(f"dense weight expects {weight.shape[1]} features,"
                                f" input provides {features}")
        weight = weight.reshape(weight.shape[0], features, 1, 1)
        in_dims = (1, features, 1, 1)
        stride, pad = 1, 0
    elif spec.kind == "conv":
        if weight.ndim != 4:
            raise GeometryError(f"conv weight must be 4D, got shape {weight.shape}")
        if weight.shape[1] != in_dims[1]:
            raise GeometryError(f"conv weight expects {weight.shape[1]} channels,"
                                f" input provides {in_dims[1]}")
        stride, pad = spec.stride, spec.pad
    else:
        raise GeometryError(f"unknown layer kind {spec.kind!r}")

    nf, c, fh, fw = weight.shape
    oh, ow = conv_out_hw(in_dims[2], in_dims[3], (fh, fw), stride, pad)
    conv_out_dims = (1, nf, oh, ow)
    out_dims = conv_out_dims
    if spec.pooling is not None:
        pooled = host_pool(np.zeros(conv_out_dims, dtype=np.int64), spec.pooling)
        out_dims = pooled.shape

    a_rows, a_cols = oh * ow, c * fh * fw
    if input_tensor is not None:
        tensor = _check_tensor(input_tensor, f"layer {index} input").reshape(in_dims)
        a = im2row(tensor, (fh, fw), stride, pad)
    else:
        a = np.zeros((a_rows, a_cols), dtype=np.int64)
    b = ker2col(weight)
    x = None
    if spec.bias is not None:
        bias = np.asarray(spec.bias).reshape(-1)
        if bias.shape != (nf,):
            raise GeometryError(f"bias must have one entry per filter ({nf}),"
                                f" got shape {np.asarray(spec.bias).shape}")
        x = np.tile(bias, (a_rows, 1))
    job = make_job(a, b, x, post_ops(spec.activation, spec.requant_shift), cfg)
    plan = LayerPlan(
        index=index, kind=spec.kind, prefix=prefix, in_dims=in_dims,
        kernel=(fh, fw), stride=stride, pad=pad, nf=nf,
        a_rows=a_rows, a_cols=a_cols,
        conv_out_dims=conv_out_dims, out_dims=tuple(out_dims),
        activation=spec.activation, requant_shift=spec.requant_shift,
        pooling=spec.pooling, alpha=job.alpha, lam=job.lam, beta=job.beta,
        has_bias=x is not None,
    )
    return plan, job


def transition_mode(prev: LayerPlan, nxt: LayerPlan) -> str:
    """A stored output feeds the next layer either byte for byte or via a
    host-side decode, pool, and re-extraction."""
    if (prev.pooling is None and tuple(nxt.kernel) == (1, 1)
            and nxt.stride == 1 and nxt.pad == 0
            and tuple(nxt.in_dims) == tuple(prev.conv_out_dims)):
        return "copy"
    return "reshape"


@dataclass
class NetworkPlan:
    input_dims: tuple
    layers: list[LayerPlan]
    transitions: list[str]
    jobs: list[MatMulJob] | None = None
    programs: list[Program] | None = None

    def to_dict(self) -> dict:
        layer_dicts = []
        for i, plan in enumerate(self.layers):
            d = plan.to_dict()
            if self.programs is not None:
                d["n_instructions"] = len(self.programs[i].instructions)
                d["n_uops"] = len(self.programs[i].uops)
                d["predicted_stats"] = dict(self.programs[i].predicted_stats)
            layer_dicts.append(d)
        return {"input_dims": list(self.input_dims), "layers": layer_dicts,
                "transitions": list(self.transitions)}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkPlan":
        return cls(input_dims=tuple(d["input_dims"]),
                   layers=[LayerPlan.from_dict(ld) for ld in d["layers"]],
                   transitions=list(d["transitions"]))


def chain_layers(specs: list[LayerSpec], input_tensor, cfg: VtaConfig,
                 img: DramImage) -> NetworkPlan:
    """Lower a whole layer stack, allocating and compiling one job per layer."""
    if not specs:
        raise GeometryError("a network needs at least one layer")
    tensor = _check_tensor(input_tensor, "network input")
    dims = tensor.shape
    plans, jobs, programs = [], [], []
    for idx, spec in enumerate(specs):
        prefix = f"layer{idx:02d}."
        plan, job = compile_layer(spec, dims, cfg, index=idx, prefix=prefix,
                                  input_tensor=tensor if idx == 0 else None)
        programs.append(compile_job(img, job, cfg, prefix))
        plans.append(plan)
        jobs.append(job)
        dims = plan.out_dims
    transitions = []
    for prev, nxt in zip(plans, plans[1:]):
        mode = transition_mode(prev, nxt)
        if prod(prev.out_dims) != prod(nxt.in_dims):
            raise GeometryError(
                f"layer {prev.index} produces {prod(prev.out_dims)} values,"
                f" layer {nxt.index} consumes {prod(nxt.in_dims)}")
        if mode == "copy":
            assert (nxt.alpha, nxt.lam) == (prev.alpha, prev.beta), \
                "copy transition requires matching block grids"
        transitions.append(mode)
    return NetworkPlan(input_dims=tuple(tensor.shape), layers=plans,
                       transitions=transitions, jobs=jobs, programs=programs)


def input_matrix_bytes(plan: LayerPlan, input_tensor, cfg: VtaConfig) -> bytes:
    """Binarised operand blocks for a layer fed directly with a host tensor."""
    tensor = _check_tensor(input_tensor, "layer input")
    if prod(tensor.shape) != prod(plan.in_dims):
        raise GeometryError(f"input of {prod(tensor.shape)} values does not"
                            f" fill layer dims {plan.in_dims}")
    a = im2row(tensor.reshape(plan.in_dims), plan.kernel, plan.stride, plan.pad)
    return blocks.binarise(blocks.to_blocks(a, cfg.block_size, Kind.INP))


def decode_out_matrix(raw: bytes, plan: LayerPlan, cfg: VtaConfig) -> np.ndarray:
    """Stored output bytes back to the (a_rows, nf) result matrix."""
    bm = blocks.debinarise(bytes(raw), Kind.OUT, plan.alpha, plan.beta,
                           cfg.block_size, plan.a_rows, plan.nf)
    return blocks.merge_unpad(bm)


def apply_transition(img: DramImage, out_region: Region, inp_region: Region,
                     prev: LayerPlan, nxt: LayerPlan, mode: str,
                     cfg: VtaConfig) -> None:
    """Move one layer's stored output into the next layer's operand region."""
    raw = read_region(img, out_region)
    if mode == "copy":
        if len(raw) != inp_region.size_bytes:
            raise GeometryError(f"copy transition size mismatch: {len(raw)} output"
                                f" bytes vs {inp_region.size_bytes} operand bytes")
        write_region(img, inp_region, raw)
        return
    if mode != "reshape":
        raise GeometryError(f"unknown transition mode {mode!r}")
    m = decode_out_matrix(raw, prev, cfg)
    t = mat2tensor(m, prev.conv_out_dims)
    if prev.pooling is not None:
        t = host_pool(t, prev.pooling)
    write_region(img, inp_region, input_matrix_bytes(nxt, t, cfg))
