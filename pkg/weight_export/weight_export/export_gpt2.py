"""One-file converter: published GPT-2 small checkpoint -> weight container.

Reads a HuggingFace-layout GPT-2 archive (config.json plus
model.safetensors or pytorch_model.bin), takes the first N transformer
blocks (default 6) plus the token and positional embedding tables, and
writes them to the little-endian "CALF" container format:

    magic "CALF" | u32 version=1 | u32 tensor_count
    per tensor: u32 name_len | name | u8 dtype (0=f32) | u8 rank
                | rank x u64 dims | raw row-major data

All values are written as float32 regardless of source precision. The
fused attention projection (c_attn) is split into separate q/k/v
tensors; everything else is a straight rename. Checkpoint tensors are
stored in the x @ W orientation GPT-2 already uses, so no transposes
are needed.

Usage:
    weight-export export --src /path/to/gpt2 --out backbone.calf
    weight-export verify --file backbone.calf
    weight-export make-fixture --out-dir /tmp/fake_gpt2   (scaled stand-in)
"""
from __future__ import annotations

import argparse
import json
import struct
import sys
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"CALF"
VERSION = 1
DEFAULT_LAYERS = 6


class ExportError(Exception):
    """Anything that prevents a faithful conversion."""


class ContainerError(ExportError):
    """Corrupt container encountered while verifying."""


# ---------------------------------------------------------------------------
# source archive
# ---------------------------------------------------------------------------

def _load_config(src_dir: Path) -> dict:
    path = src_dir / "config.json"
    if not path.exists():
        raise ExportError(f"missing {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _load_state(src_dir: Path) -> dict:
    """name -> float32 ndarray from safetensors or a torch pickle."""
    st = src_dir / "model.safetensors"
    if st.exists():
        from safetensors.numpy import load_file
        raw = load_file(str(st))
        return {k: np.asarray(v) for k, v in raw.items()}
    bin_path = src_dir / "pytorch_model.bin"
    if bin_path.exists():
        import torch
        raw = torch.load(str(bin_path), map_location="cpu", weights_only=True)
        return {k: v.detach().to(torch.float32).numpy() for k, v in raw.items()}
    raise ExportError(f"no model.safetensors or pytorch_model.bin under {src_dir}")


def _strip_prefix(state: dict) -> dict:
    """LM-head archives prefix everything with 'transformer.'."""
    if any(k.startswith("transformer.") for k in state):
        state = {k[len("transformer."):]: v for k, v in state.items()
                 if k.startswith("transformer.")}
    return state


# ---------------------------------------------------------------------------
# manifest: source tensor -> container tensor(s)
# ---------------------------------------------------------------------------

def build_manifest(config: dict, layers: int) -> list:
    """(source name, expected shape, [(container name, slicer)]) entries.

    A slicer of None copies the tensor whole; (lo, hi) slices the last
    axis, which is how the fused c_attn splits into q/k/v.
    """
    n = int(config["n_embd"])
    vocab = int(config["vocab_size"])
    positions = int(config.get("n_positions", config.get("n_ctx", 1024)))
    n_layer = int(config["n_layer"])
    if layers > n_layer:
        raise ExportError(f"requested {layers} layers but the source has {n_layer}")
    entries = [
        ("wte.weight", (vocab, n), [("token_embedding", None)]),
        ("wpe.weight", (positions, n), [("pos_embedding", None)]),
    ]
    for i in range(layers):
        b = f"block.{i}"
        entries += [
            (f"h.{i}.ln_1.weight", (n,), [(f"{b}.ln1.gain", None)]),
            (f"h.{i}.ln_1.bias", (n,), [(f"{b}.ln1.bias", None)]),
            (f"h.{i}.attn.c_attn.weight", (n, 3 * n),
             [(f"{b}.attn.q_weight", (0, n)),
              (f"{b}.attn.k_weight", (n, 2 * n)),
              (f"{b}.attn.v_weight", (2 * n, 3 * n))]),
            (f"h.{i}.attn.c_attn.bias", (3 * n,),
             [(f"{b}.attn.q_bias", (0, n)),
              (f"{b}.attn.k_bias", (n, 2 * n)),
              (f"{b}.attn.v_bias", (2 * n, 3 * n))]),
            (f"h.{i}.attn.c_proj.weight", (n, n), [(f"{b}.attn.out_weight", None)]),
            (f"h.{i}.attn.c_proj.bias", (n,), [(f"{b}.attn.out_bias", None)]),
            (f"h.{i}.ln_2.weight", (n,), [(f"{b}.ln2.gain", None)]),
            (f"h.{i}.ln_2.bias", (n,), [(f"{b}.ln2.bias", None)]),
            (f"h.{i}.mlp.c_fc.weight", (n, 4 * n), [(f"{b}.mlp.fc_weight", None)]),
            (f"h.{i}.mlp.c_fc.bias", (4 * n,), [(f"{b}.mlp.fc_bias", None)]),
            (f"h.{i}.mlp.c_proj.weight", (4 * n, n), [(f"{b}.mlp.proj_weight", None)]),
            (f"h.{i}.mlp.c_proj.bias", (n,), [(f"{b}.mlp.proj_bias", None)]),
        ]
    return entries


def convert(state: dict, manifest: list) -> dict:
    out: dict = {}
    for source, shape, targets in manifest:
        if source not in state:
            raise ExportError(f"source checkpoint is missing tensor {source!r}")
        arr = np.asarray(state[source], dtype=np.float32)
        if arr.shape != shape:
            raise ExportError(
                f"{source}: expected shape {shape}, found {tuple(arr.shape)}")
        for name, slicer in targets:
            out[name] = arr if slicer is None else arr[..., slicer[0]:slicer[1]]
    return out


# ---------------------------------------------------------------------------
# container writing / verification
# ---------------------------------------------------------------------------

def _write_container(path: Path, tensors: dict) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", 0, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    path.write_bytes(b"".join(chunks))


def _checksum(arr: np.ndarray) -> str:
    return f"{zlib.crc32(np.ascontiguousarray(arr, dtype='<f4').tobytes()):08x}"


def export_checkpoint(src_dir, out_file, layers: int = DEFAULT_LAYERS) -> dict:
    """Convert and write; returns {container name: (shape, crc32)}."""
    src_dir = Path(src_dir)
    config = _load_config(src_dir)
    state = _strip_prefix(_load_state(src_dir))
    tensors = convert(state, build_manifest(config, layers))
    _write_container(Path(out_file), tensors)
    table = {name: (tuple(arr.shape), _checksum(arr)) for name, arr in tensors.items()}
    for name, (shape, crc) in table.items():
        print(f"{crc}  {name}  {shape}")
    print(f"wrote {len(table)} tensors to {out_file}")
    return table


def verify(out_file) -> dict:
    """Checksum/shape table of an existing container, with positioned errors."""
    path = Path(out_file)
    blob = path.read_bytes()
    if not blob:
        raise ContainerError(f"{path}: empty file")
    pos = 0

    def need(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise ContainerError(f"{path}: truncated at byte {pos} reading {what}")
        piece = blob[pos:pos + n]
        pos += n
        return piece

    if need(4, "magic") != MAGIC:
        raise ContainerError(f"{path}: bad magic at byte 0")
    version, count = struct.unpack("<II", need(8, "header"))
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported version {version} at byte 4")
    dtype_sizes = {0: 4, 1: 8}
    table: dict = {}
    for i in range(count):
        (name_len,) = struct.unpack("<I", need(4, f"tensor {i} name length"))
        name = need(name_len, f"tensor {i} name").decode("utf-8")
        code, rank = struct.unpack("<BB", need(2, f"{name} dtype/rank"))
        if code not in dtype_sizes:
            raise ContainerError(f"{path}: {name}: unknown dtype {code} at byte {pos - 2}")
        dims = struct.unpack(f"<{rank}Q", need(8 * rank, f"{name} dims"))
        n_bytes = dtype_sizes[code]
        for d in dims:
            n_bytes *= d
        data = need(n_bytes, f"{name} data")
        table[name] = (dims, f"{zlib.crc32(data):08x}")
    if pos != len(blob):
        raise ContainerError(f"{path}: {len(blob) - pos} trailing bytes")
    return table


# ---------------------------------------------------------------------------
# scaled stand-in archive (for environments without the published weights)
# ---------------------------------------------------------------------------

def make_synthetic_checkpoint(out_dir, n_layer: int = 8, n_embd: int = 32,
                              vocab: int = 100, n_positions: int = 64,
                              seed: int = 0, file_format: str = "safetensors") -> Path:
    """Write a GPT-2-shaped archive with random weights at reduced size."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    config = {"n_layer": n_layer, "n_embd": n_embd, "vocab_size": vocab,
              "n_positions": n_positions, "n_head": 4, "model_type": "gpt2"}
    (out_dir / "config.json").write_text(json.dumps(config), encoding="utf-8")
    state = {
        "wte.weight": rng.standard_normal((vocab, n_embd)) * 0.02,
        "wpe.weight": rng.standard_normal((n_positions, n_embd)) * 0.01,
        "ln_f.weight": np.ones(n_embd),
        "ln_f.bias": np.zeros(n_embd),
    }
    for i in range(n_layer):
        state.update({
            f"h.{i}.ln_1.weight": np.ones(n_embd),
            f"h.{i}.ln_1.bias": np.zeros(n_embd),
            f"h.{i}.attn.c_attn.weight": rng.standard_normal((n_embd, 3 * n_embd)) * 0.02,
            f"h.{i}.attn.c_attn.bias": np.zeros(3 * n_embd),
            f"h.{i}.attn.c_proj.weight": rng.standard_normal((n_embd, n_embd)) * 0.02,
            f"h.{i}.attn.c_proj.bias": np.zeros(n_embd),
            f"h.{i}.ln_2.weight": np.ones(n_embd),
            f"h.{i}.ln_2.bias": np.zeros(n_embd),
            f"h.{i}.mlp.c_fc.weight": rng.standard_normal((n_embd, 4 * n_embd)) * 0.02,
            f"h.{i}.mlp.c_fc.bias": np.zeros(4 * n_embd),
            f"h.{i}.mlp.c_proj.weight": rng.standard_normal((4 * n_embd, n_embd)) * 0.02,
            f"h.{i}.mlp.c_proj.bias": np.zeros(n_embd),
        })
    state = {k: np.asarray(v, dtype=np.float32) for k, v in state.items()}
    if file_format == "safetensors":
        from safetensors.numpy import save_file
        save_file(state, str(out_dir / "model.safetensors"))
    elif file_format == "bin":
        import torch
        torch.save({k: torch.from_numpy(v) for k, v in state.items()},
                   str(out_dir / "pytorch_model.bin"))
    else:
        raise ExportError(f"unknown fixture format {file_format!r}")
    return out_dir


# ---------------------------------------------------------------------------
# CLI
# ---------------------------------------------------------------------------

def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="weight-export", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("export", help="convert a GPT-2 archive")
    p.add_argument("--src", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--layers", type=int, default=DEFAULT_LAYERS)
    p = sub.add_parser("verify", help="checksum an existing container")
    p.add_argument("--file", required=True)
    p = sub.add_parser("make-fixture", help="write a scaled random archive")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-layer", type=int, default=8)
    p.add_argument("--n-embd", type=int, default=32)
    p.add_argument("--vocab", type=int, default=100)
    p.add_argument("--n-positions", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", default="safetensors", choices=("safetensors", "bin"))
    args = parser.parse_args(argv)
    try:
        if args.command == "export":
            export_checkpoint(args.src, args.out, layers=args.layers)
        elif args.command == "verify":
            for name, (shape, crc) in verify(args.file).items():
                print(f"{crc}  {name}  {tuple(shape)}")
        else:
            path = make_synthetic_checkpoint(args.out_dir, args.n_layer, args.n_embd,
                                             args.vocab, args.n_positions, args.seed,
                                             args.format)
            print(f"wrote fixture archive to {path}")
        return 0
    except ExportError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
