"""Seeded demo inputs: a one-block matmul job and a small 5-layer convnet.

Run as a module to materialise a job directory the command line tool can
compile, execute, and verify:

    python -m vtakit.fixtures gemm_relu /tmp/demo
    python -m vtakit.fixtures lenet5 /tmp/net
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

import numpy as np

from .tensorfront import LayerSpec, PoolSpec


def _rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def _i8(rng, *shape) -> np.ndarray:
    return rng.integers(-128, 128, size=shape, dtype=np.int64)


def build_gemm_relu(out_dir, seed: int = 7) -> Path:
    """One 16x16x16 block matmul with a relu post-op."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rng = _rng(seed)
    np.save(out / "a.npy", _i8(rng, 16, 16))
    np.save(out / "b.npy", _i8(rng, 16, 16))
    manifest = {
        "job": "matmul",
        "a": {"file": "a.npy"},
        "b": {"file": "b.npy"},
        "alu_ops": [{"op": "max", "imm": 0}],
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def lenet5_input(seed: int = 11) -> np.ndarray:
    return _i8(_rng(seed ^ 0x5EED), 1, 1, 32, 32)


def lenet5_layer_specs(seed: int = 11) -> list[LayerSpec]:
    """The classic 32x32 five-layer convnet with seeded synthetic weights."""
    rng = _rng(seed)
    avg22 = PoolSpec("avg", 2, 2)

    def conv(nf, c, k, pooling):
        return LayerSpec(kind="conv", weight=_i8(rng, nf, c, k, k),
                         bias=rng.integers(-2000, 2000, size=nf, dtype=np.int64),
                         activation="relu", pooling=pooling, requant_shift=10)

    def fc(nf, features, activation):
        return LayerSpec(kind="fc", weight=_i8(rng, nf, features),
                         bias=rng.integers(-2000, 2000, size=nf, dtype=np.int64),
                         activation=activation, requant_shift=10)

    return [
        conv(6, 1, 5, avg22),      # 32x32 -> 28x28 -> 14x14
        conv(16, 6, 5, avg22),     # 14x14 -> 10x10 -> 5x5
        conv(120, 16, 5, None),    # 5x5 -> 1x1
        fc(84, 120, "relu"),
        fc(10, 84, None),
    ]


def build_lenet5(out_dir, seed: int = 11) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.save(out / "input.npy", lenet5_input(seed))
    layer_entries = []
    for i, spec in enumerate(lenet5_layer_specs(seed)):
        wfile, bfile = f"w{i}.npy", f"b{i}.npy"
        np.save(out / wfile, spec.weight)
        np.save(out / bfile, spec.bias)
        entry = {
            "kind": spec.kind,
            "weight": {"file": wfile},
            "bias": {"file": bfile},
            "activation": spec.activation,
            "requant_shift": spec.requant_shift,
        }
        if spec.kind == "conv":
            entry["stride"] = spec.stride
            entry["pad"] = spec.pad
        if spec.pooling is not None:
            entry["pooling"] = spec.pooling.to_dict()
        layer_entries.append(entry)
    manifest = {
        "job": "network",
        "input": {"file": "input.npy"},
        "layers": layer_entries,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2) + "\n")
    return path


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("fixture", choices=("gemm_relu", "lenet5"))
    parser.add_argument("out_dir")
    parser.add_argument("--seed", type=int, default=None)
    args = parser.parse_args(argv)
    builders = {"gemm_relu": (build_gemm_relu, 7), "lenet5": (build_lenet5, 11)}
    build, default_seed = builders[args.fixture]
    seed = default_seed if args.seed is None else args.seed
    path = build(args.out_dir, seed)
    print(f"wrote {path}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
