"""Integer golden model used to check the compiler and simulator.

Everything here is written directly from the textbook definitions (plain
matrix product, sliding-window convolution) and keeps its own padding and
serialization arithmetic, so it shares no lowering code with the rest of
the package.
"""

from __future__ import annotations

import numpy as np

_MASK32 = (1 << 32) - 1


def _wrap32(v) -> np.ndarray:
    """Two's-complement wrap of arbitrary integers into int32 range."""
    v = np.asarray(v, dtype=np.int64) & _MASK32
    return np.where(v >= 1 << 31, v - (1 << 32), v).astype(np.int64)


def ref_matmul(a, b, x=None) -> np.ndarray:
    """C = A @ B (+ X), evaluated exactly and wrapped to int32."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"incompatible matmul shapes {a.shape} x {b.shape}")
    c = a @ b
    if x is not None:
        x = np.asarray(x, dtype=np.int64)
        if x.shape != c.shape:
            raise ValueError(f"addend shape {x.shape} does not match product {c.shape}")
        c = c + x
    return _wrap32(c)


def ref_conv(x, w, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Direct NCHW convolution, int32-exact, no im2row anywhere."""
    x = np.asarray(x, dtype=np.int64)
    w = np.asarray(w, dtype=np.int64)
    n, c, h, wd = x.shape
    nf, fc, fh, fw = w.shape
    if n != 1:
        raise ValueError("only single-image batches are supported")
    if fc != c:
        raise ValueError(f"filter channels {fc} do not match input channels {c}")
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    mh = (h + 2 * pad - fh) // stride + 1
    mw = (wd + 2 * pad - fw) // stride + 1
    if mh <= 0 or mw <= 0:
        raise ValueError(f"kernel {fh}x{fw} does not fit input {h}x{wd} with pad {pad}")
    out = np.zeros((1, nf, mh, mw), dtype=np.int64)
    for dy in range(fh):
        for dx in range(fw):
            window = xp[0, :, dy:dy + mh * stride:stride, dx:dx + mw * stride:stride]
            out[0] += np.einsum("fc,cij->fij", w[:, :, dy, dx], window)
    return _wrap32(out)


def ref_fc(x, w) -> np.ndarray:
    """y = W @ x for a flat input vector and a (features_out, features_in) weight."""
    x = np.asarray(x, dtype=np.int64).reshape(-1)
    w = np.asarray(w, dtype=np.int64)
    if w.shape[1] != x.shape[0]:
        raise ValueError(f"weight {w.shape} does not match input of {x.shape[0]}")
    return _wrap32(w @ x)


def ref_relu(v) -> np.ndarray:
    return np.maximum(np.asarray(v, dtype=np.int64), 0)


def ref_pool(t, mode: str, window: int, stride: int) -> np.ndarray:
    """Window pooling on an NCHW tensor; avg is sum followed by a right shift."""
    t = np.asarray(t, dtype=np.int64)
    n, c, h, w = t.shape
    if (h - window) % stride or (w - window) % stride:
        raise ValueError(f"window {window}/stride {stride} does not tile {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=np.int64)
    for oy in range(oh):
        for ox in range(ow):
            patch = t[:, :, oy * stride:oy * stride + window, ox * stride:ox * stride + window]
            if mode == "max":
                out[:, :, oy, ox] = patch.max(axis=(2, 3))
            elif mode == "avg":
                area = window * window
                if area & (area - 1):
                    raise ValueError(f"avg pooling needs a power-of-two window area, got {area}")
                out[:, :, oy, ox] = patch.sum(axis=(2, 3)) >> area.bit_length() - 1
            else:
                raise ValueError(f"unknown pooling mode {mode!r}")
    return out


def ref_requant(v, shift: int) -> np.ndarray:
    """Arithmetic right shift then clip to int8 range."""
    v = np.asarray(v, dtype=np.int64) >> shift
    return np.clip(v, -128, 127)


def ref_truncate8(v) -> np.ndarray:
    """Keep the low 8 bits of each element, reinterpreted as two's complement."""
    v = np.asarray(v, dtype=np.int64) & 0xFF
    return np.where(v >= 128, v - 256, v).astype(np.int64)


def _shift_elementwise(vals, amounts) -> np.ndarray:
    # Negative shift amounts shift left; magnitudes are capped at 31.
    vals = np.asarray(vals, dtype=np.int64)
    amounts = np.clip(np.asarray(amounts, dtype=np.int64), -31, 31)
    right = vals >> np.maximum(amounts, 0)
    left = _wrap32(vals << np.maximum(-amounts, 0))
    return np.where(amounts >= 0, right, left)


def apply_alu_ops(c, ops) -> np.ndarray:
    """Mirror the device's element-wise post-ops on a full int32 matrix.

    ops is a sequence of (name, imm) pairs with name in {min,max,add,shr}.
    imm None means vector-operand mode, which with the all-zero micro-op the
    program generator emits makes source and destination coincide.
    """
    c = _wrap32(np.asarray(c, dtype=np.int64))
    for name, imm in ops:
        operand = c if imm is None else np.int64(imm)
        if name == "min":
            c = np.minimum(c, operand)
        elif name == "max":
            c = np.maximum(c, operand)
        elif name == "add":
            c = _wrap32(c + operand)
        elif name == "shr":
            c = _shift_elementwise(c, operand)
        else:
            raise ValueError(f"unknown alu op {name!r}")
    return c


def _pad_to(m, rows: int, cols: int) -> np.ndarray:
    out = np.zeros((rows, cols), dtype=np.int64)
    out[:m.shape[0], :m.shape[1]] = m
    return out


def out_layout_bytes(c8, block_size: int) -> bytes:
    """Serialize an int8-domain padded matrix the way the device stores OUT."""
    rows, cols = c8.shape
    assert rows % block_size == 0 and cols % block_size == 0
    chunks = bytearray()
    for bi in range(rows // block_size):
        for bj in range(cols // block_size):
            for r in range(block_size):
                row = c8[bi * block_size + r, bj * block_size:(bj + 1) * block_size]
                chunks += row.astype("i1").tobytes()
    return bytes(chunks)


def matmul_out_bytes(a, b, x, ops, block_size: int) -> bytes:
    """Expected OUT bytes for a whole matrix job, padding included."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    rows = -(-a.shape[0] // block_size) * block_size
    inner = -(-a.shape[1] // block_size) * block_size
    cols = -(-b.shape[1] // block_size) * block_size
    ap = _pad_to(a, rows, inner)
    bp = _pad_to(b, inner, cols)
    xp = _pad_to(np.asarray(x, dtype=np.int64), rows, cols) if x is not None else None
    c = ref_matmul(ap, bp, xp)
    c = apply_alu_ops(c, ops)
    return out_layout_bytes(ref_truncate8(c), block_size)


def network_forward(layers, input_tensor) -> list[np.ndarray]:
    """Run the int8 network end to end on the host; returns every layer output.

    Each entry of layers is a mapping with keys kind, weight, bias, stride,
    pad, activation, pooling (mode, window, stride) and requant_shift,
    mirroring the device pipeline: conv + bias, relu, shift, clip, pool.
    """
    t = np.asarray(input_tensor, dtype=np.int64)
    outs = []
    for layer in layers:
        w = np.asarray(layer["weight"], dtype=np.int64)
        if layer["kind"] == "fc":
            t = t.reshape(1, -1, 1, 1)
            w = w.reshape(w.shape[0], -1, 1, 1)
        y = ref_conv(t, w, stride=layer.get("stride", 1), pad=layer.get("pad", 0))
        bias = layer.get("bias")
        if bias is not None:
            y = _wrap32(y + np.asarray(bias, dtype=np.int64)[None, :, None, None])
        if layer.get("activation") == "relu":
            y = ref_relu(y)
        shift = layer.get("requant_shift", 0)
        if shift:
            y = y >> shift
        y = np.clip(y, -128, 127)
        pool = layer.get("pooling")
        if pool is not None:
            y = ref_pool(y, pool["mode"], pool["window"], pool["stride"])
        outs.append(y)
        t = y
    return outs


def network_out_bytes(layers, input_tensor, block_size: int) -> bytes:
    """Expected OUT bytes of the final layer, before any pooling of it."""
    t = np.asarray(input_tensor, dtype=np.int64)
    for layer in layers[:-1]:
        t = network_forward([layer], t)[0]
    last = dict(layers[-1])
    last.pop("pooling", None)
    y = network_forward([last], t)[0]  # (1, nf, mh, mw) already int8-domain
    nf = y.shape[1]
    mat = y.reshape(1, nf, -1)[0].T  # rows scan (h, w), one column per channel
    rows = -(-mat.shape[0] // block_size) * block_size
    cols = -(-mat.shape[1] // block_size) * block_size
    return out_layout_bytes(_pad_to(mat, rows, cols), block_size)
