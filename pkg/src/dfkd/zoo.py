"""Model construction and the binary weight file format.

Two fixed architectures over 1x32x32 inputs: the full-width net (conv 6/16,
dense 120/84) and its half-width counterpart (conv 3/8, dense 60/42), both
ending in a C-way linear head. Weight files are self-describing and carry a
trailing FNV-1a checksum; loading verifies magic, version, checksum, and that
tensor shapes agree with the declared architecture before any model is built.
"""

from __future__ import annotations

import struct

import numpy as np

from .binio import ByteReader
from .layers import Conv2d, Dense, Flatten, MaxPool2x2, ReLU, Tanh
from .manifest import Fnv64
from .network import Network, NonFiniteError

MAGIC = b"DFKDWGT\0"
VERSION = 1
INPUT_SHAPE = (1, 32, 32)

# arch -> (conv1, conv2, fc1, fc2) widths
ARCH_WIDTHS = {
    "lenet5": (6, 16, 120, 84),
    "lenet5-half": (3, 8, 60, 42),
}


class WeightFormatError(ValueError):
    """File is not a readable weight file."""


class WeightVersionError(WeightFormatError):
    """Weight file declares a version this code does not read."""


class WeightChecksumError(WeightFormatError):
    """Trailing checksum does not match; truncated or corrupted file."""


def build(arch: str, num_classes: int = 10, seed: int | None = 0,
          activation: str = "tanh") -> Network:
    """Construct one of the fixed architectures with fresh or deferred weights."""
    base, _, act_tag = arch.partition("+")
    if act_tag:
        activation = act_tag
    if base not in ARCH_WIDTHS:
        raise ValueError(f"unknown architecture {arch!r}, have {sorted(ARCH_WIDTHS)}")
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    if activation == "tanh":
        act = Tanh
    elif activation == "relu":
        act = ReLU
    else:
        raise ValueError(f"activation must be 'tanh' or 'relu', got {activation!r}")
    c1, c2, f1, f2 = ARCH_WIDTHS[base]
    layers = [
        Conv2d(1, c1, 5, name="conv1"), act("act1"), MaxPool2x2("pool1"),
        Conv2d(c1, c2, 5, name="conv2"), act("act2"), MaxPool2x2("pool2"),
        Flatten("flatten"),
        Dense(c2 * 5 * 5, f1, name="fc1"), act("act3"),
        Dense(f1, f2, name="fc2"), act("act4"),
        Dense(f2, num_classes, name="fc3"),
    ]
    arch_name = base if activation == "tanh" else f"{base}+{activation}"
    return Network(layers, INPUT_SHAPE, arch=arch_name, seed=seed)


def save(model: Network, path) -> None:
    """Write all parameter tensors with names, shapes, and a trailing checksum."""
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    arch = model.arch.encode()
    chunks.append(struct.pack("<I", len(arch)))
    chunks.append(arch)
    tensors = [(name, p) for name, p, _ in model.parameters()]
    chunks.append(struct.pack("<I", len(tensors)))
    for name, p in tensors:
        if not np.isfinite(p).all():
            raise NonFiniteError(f"refusing to save non-finite parameter {name}")
        nb = name.encode()
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", p.ndim))
        chunks.append(struct.pack(f"<{p.ndim}Q", *p.shape))
        chunks.append(np.ascontiguousarray(p, dtype="<f8").tobytes())
    body = b"".join(chunks)
    checksum = Fnv64().update(body).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", checksum))


def load(path) -> Network:
    """Read a weight file back into a freshly built model.

    Validation order: magic, version, checksum, then structure. A model is
    returned only after every tensor landed in a parameter slot of the
    matching shape; any failure raises before a partial model can escape.
    """
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 or data[:len(MAGIC)] != MAGIC:
        raise WeightFormatError("not a weight file (bad magic)")
    version = struct.unpack_from("<I", data, len(MAGIC))[0]
    if version != VERSION:
        raise WeightVersionError(f"weight file version {version}, this code reads {VERSION}")
    if len(data) < len(MAGIC) + 4 + 8:
        raise WeightChecksumError("weight file too short to carry a checksum")
    stored = struct.unpack("<Q", data[-8:])[0]
    actual = Fnv64().update(data[:-8]).digest()
    if stored != actual:
        raise WeightChecksumError(
            f"checksum mismatch: stored {stored:016x}, computed {actual:016x} "
            "(file truncated or corrupted)")
    cur = ByteReader(data[:-8], WeightFormatError)
    cur.take(len(MAGIC) + 4)
    arch = cur.str32()
    n_tensors = cur.u32()
    state: dict[str, np.ndarray] = {}
    for _ in range(n_tensors):
        name = cur.str32()
        rank = cur.u32()
        if rank > 8:
            raise WeightFormatError(f"tensor {name}: implausible rank {rank}")
        shape = cur.u64s(rank)
        if name in state:
            raise WeightFormatError(f"duplicate tensor name {name}")
        state[name] = cur.f64_array(shape)
    if not cur.done():
        raise WeightFormatError("trailing bytes after the declared tensors")
    if "fc3.w" not in state or state["fc3.w"].ndim != 2:
        raise WeightFormatError("weight file does not contain a recognizable output head")
    num_classes = int(state["fc3.w"].shape[1])
    model = build(arch, num_classes=num_classes, seed=None)
    try:
        model.load_state(state)
    except ValueError as exc:
        raise WeightFormatError(f"tensors do not fit architecture {arch!r}: {exc}") from exc
    return model
