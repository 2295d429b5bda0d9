"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"TRMP1"
    u32 text length, UTF-8 architecture text (config-file syntax)
    u32 tensor count
    per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims..., f32 payload
    u32 CRC32 of every preceding byte

Model checkpoints store each parameter under its pytree path (``g/3/w``)
plus three latent probes ``probe/z`` and their images ``probe/x``; loading
rebuilds the model from the text and checks the probes bit-exactly.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import jax
import jax.numpy as jnp
import numpy as np

from trumpet.substrate import rng_key

__all__ = [
    "MAGIC",
    "CheckpointError",
    "write_container",
    "read_container",
    "encode_container",
    "decode_container",
    "save_model",
    "load_model",
    "param_names",
]

MAGIC = b"TRMP1"
N_PROBES = 3
_PROBE_STREAM = 4242


class CheckpointError(ValueError):
    """Corrupt, truncated or inconsistent checkpoint."""


def encode_container(text: str, tensors) -> bytes:
    out = bytearray(MAGIC)
    raw = text.encode("utf-8")
    out += struct.pack("<I", len(raw)) + raw
    tensors = list(tensors)
    out += struct.pack("<I", len(tensors))
    for name, arr in tensors:
        arr = np.asarray(arr)
        if arr.dtype != np.float32:
            if not np.all(np.asarray(arr, np.float32) == arr):
                raise ValueError(f"tensor {name!r} is not exactly representable in float32")
        arr = np.asarray(arr, dtype="<f4").copy(order="C")  # ascontiguousarray would promote 0-d
        key = name.encode("utf-8")
        if len(key) > 0xFFFF or arr.ndim > 0xFF:
            raise ValueError(f"tensor {name!r}: name or rank too large")
        out += struct.pack("<H", len(key)) + key
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    return bytes(out)


def decode_container(blob: bytes) -> tuple[str, dict[str, np.ndarray]]:
    if len(blob) < len(MAGIC) + 12:
        raise CheckpointError("file too short to be a checkpoint")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"bad magic {blob[:len(MAGIC)]!r}, expected {MAGIC!r}")
    (stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    actual = zlib.crc32(blob[:-4])
    if stored != actual:
        raise CheckpointError(f"CRC mismatch: stored {stored:08x}, computed {actual:08x}")
    body = memoryview(blob)[:-4]
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(body):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, body, pos)
        pos += size
        return vals

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(body):
            raise CheckpointError("truncated checkpoint")
        chunk = bytes(body[pos:pos + n])
        pos += n
        return chunk

    (n_text,) = take("<I")
    try:
        text = take_bytes(n_text).decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError("architecture text is not UTF-8") from None
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (n_name,) = take("<H")
        name = take_bytes(n_name).decode("utf-8", errors="replace")
        (rank,) = take("<B")
        dims = take(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take_bytes(4 * n), "<f4").reshape(dims).astype(np.float32)
        if name in tensors:
            raise CheckpointError(f"duplicate tensor {name!r}")
        tensors[name] = data
    if pos != len(body):
        raise CheckpointError(f"{len(body) - pos} trailing bytes before CRC")
    return text, tensors


def write_container(path, text: str, tensors) -> None:
    Path(path).write_bytes(encode_container(text, tensors))


def read_container(path) -> tuple[str, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read {path}: {exc.strerror}") from None
    return decode_container(blob)


def _key_name(entry) -> str:
    for attr in ("name", "key", "idx"):
        if hasattr(entry, attr):
            return str(getattr(entry, attr))
    return str(entry)


def param_names(model) -> list[str]:
    """Slash-joined pytree paths of every parameter, in flattening order."""
    flat, _ = jax.tree_util.tree_flatten_with_path(model)
    return ["/".join(_key_name(e) for e in path) for path, _ in flat]


def _probes(model, seed: int):
    z = jax.random.normal(rng_key(seed, _PROBE_STREAM), (N_PROBES, model.latent_dim), jnp.float32)
    from trumpet.model import generate

    return np.asarray(z), np.asarray(generate(model, z))


def save_model(path, model, seed: int = 0, extra_text: str = "") -> None:
    """Write ``model`` (float32) with its architecture and generation probes."""
    from trumpet.config import spec_to_text

    leaves = jax.tree_util.tree_leaves(model)
    if any(np.asarray(a).dtype != np.float32 for a in leaves):
        raise ValueError("checkpoints hold float32 models only")
    z, x = _probes(model, seed)
    names = param_names(model)
    tensors = list(zip(names, (np.asarray(a) for a in leaves)))
    tensors += [("probe/z", z), ("probe/x", x)]
    write_container(path, spec_to_text(model.spec) + extra_text, tensors)


def load_model(path, verify: bool = True):
    """Rebuild a model from a checkpoint.

    Raises:
        CheckpointError: bad magic/CRC, missing or misshapen tensors, or
            probes that no longer reproduce bit-exactly.
    """
    from trumpet.config import ConfigError, parse_sections, spec_from_section
    from trumpet.model import build, generate

    text, tensors = read_container(path)
    try:
        sections = parse_sections(text)
        spec = spec_from_section(sections.get("model", {}))
    except ConfigError as exc:
        raise CheckpointError(f"bad architecture text: {exc}") from None
    template = build(spec, rng_key(0))
    names = param_names(template)
    leaves, treedef = jax.tree_util.tree_flatten(template)
    new = []
    for name, ref in zip(names, leaves):
        if name not in tensors:
            raise CheckpointError(f"missing tensor {name!r}")
        arr = tensors[name]
        if arr.shape != ref.shape:
            raise CheckpointError(f"tensor {name!r} has shape {arr.shape}, expected {ref.shape}")
        new.append(jnp.asarray(arr))
    model = jax.tree_util.tree_unflatten(treedef, new)
    if verify:
        if "probe/z" not in tensors or "probe/x" not in tensors:
            raise CheckpointError("checkpoint carries no generation probes")
        x = np.asarray(generate(model, tensors["probe/z"]))
        if not np.array_equal(x, tensors["probe/x"]):
            raise CheckpointError("stored probes do not reproduce bit-exactly")
    return model
