"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"LWTF"  u32 version
    u32 meta_len, meta_len bytes of UTF-8 JSON
    u32 n_entries, then per entry:
        u16 name_len, name, u8 ndim, ndim x u32 dims, 4-byte dtype tag, raw payload
    u8 has_quant [, u32 quant_len, quant_len bytes of UTF-8 JSON]
    u32 block_size, u32 n_blocks, n_blocks x u32 CRC32 of each block of everything above
    u32 CRC32 of the block table (block_size, n_blocks and the CRCs)
    u32 CRC32 of everything above

The per-block CRCs only serve diagnostics: they locate the damaged region
when the trailing CRC fails.
"""

from __future__ import annotations

import json
import struct
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LWTF"
VERSION = 1
BLOCK = 1024
DTYPES = {b"f32\0": "<f4", b"f64\0": "<f8", b"i8\0\0": "i1", b"i32\0": "<i4", b"i64\0": "<i8"}
TAGS = {np.dtype(v): k for k, v in DTYPES.items()}


class CheckpointError(ValueError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    meta: dict
    state: "OrderedDict[str, np.ndarray]"
    quant: dict | None = None
    extra: dict = field(default_factory=dict)


def _entry(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    tag = TAGS.get(arr.dtype.newbyteorder("=") if arr.dtype.byteorder == ">" else arr.dtype)
    if tag is None:
        raise CheckpointError(f"unsupported dtype {arr.dtype} for {name}")
    data = np.ascontiguousarray(arr, dtype=DTYPES[tag]).tobytes()
    nb = name.encode()
    return (struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
            + struct.pack(f"<{arr.ndim}I", *arr.shape) + tag + data)


def encode(ckpt: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    meta = json.dumps(ckpt.meta, sort_keys=True).encode()
    parts += [struct.pack("<I", len(meta)), meta, struct.pack("<I", len(ckpt.state))]
    parts += [_entry(k, v) for k, v in ckpt.state.items()]
    if ckpt.quant is None:
        parts.append(b"\0")
    else:
        q = json.dumps(ckpt.quant, sort_keys=True).encode()
        parts += [b"\1", struct.pack("<I", len(q)), q]
    body = b"".join(parts)
    crcs = [zlib.crc32(body[i : i + BLOCK]) for i in range(0, len(body), BLOCK)]
    table = struct.pack("<II", BLOCK, len(crcs)) + struct.pack(f"<{len(crcs)}I", *crcs)
    body += table + struct.pack("<I", zlib.crc32(table))
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: bytes, end: int):
        self.buf, self.pos, self.end = buf, 0, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise CheckpointError(f"truncated checkpoint: need {n} bytes at offset {self.pos}, {self.end - self.pos} left")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _find_crc_table(buf: bytes) -> tuple[int, int, tuple]:
    """Locate and verify the block CRC table from the end of the file, without parsing the body."""
    end = len(buf) - 8  # table CRC, then the trailer
    for n in range(0, end // 4):
        at = end - 8 - 4 * n
        if at < 0:
            break
        block, count = struct.unpack("<II", buf[at : at + 8])
        if count == n and block > 0 and -(-at // block) == n:
            if zlib.crc32(buf[at:end]) != struct.unpack("<I", buf[end : end + 4])[0]:
                raise CheckpointError("block CRC table damaged")
            return at, block, struct.unpack(f"<{n}I", buf[at + 8 : end])
    raise CheckpointError("block CRC table not found")


def _locate_damage(buf: bytes) -> str:
    """Best-effort: find the first block whose CRC disagrees with the stored table."""
    try:
        table_at, block, crcs = _find_crc_table(buf)
    except CheckpointError as e:
        return f"{e} (the damage lies at the end of the file, after the weights)"
    for i, want in enumerate(crcs):
        lo = i * block
        if zlib.crc32(buf[lo : min(lo + block, table_at)]) != want:
            return f"first damaged byte lies in offset range [{lo}, {min(lo + block, table_at)})"
    return f"damage at or after offset {table_at} (CRC table or trailer)"


def _walk(r: _Reader):
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = r.unpack("<I")
    (mlen,) = r.unpack("<I")
    meta = json.loads(r.take(mlen).decode())
    (n,) = r.unpack("<I")
    state = OrderedDict()
    for _ in range(n):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        (nd,) = r.unpack("<B")
        dims = r.unpack(f"<{nd}I") if nd else ()
        tag = r.take(4)
        if tag not in DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag!r} for entry {name}")
        dt = np.dtype(DTYPES[tag])
        count = int(np.prod(dims)) if dims else 1
        arr = np.frombuffer(r.take(count * dt.itemsize), dtype=dt).reshape(dims)
        state[name] = arr.astype(dt.newbyteorder("="))
    quant = None
    if r.take(1) == b"\1":
        (ql,) = r.unpack("<I")
        quant = json.loads(r.take(ql).decode())
    return version, meta, state, quant


def decode(buf: bytes) -> Checkpoint:
    if len(buf) < 16 or buf[:4] != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic or too short)")
    (version,) = struct.unpack("<I", buf[4:8])
    if version != VERSION:
        raise VersionError(f"checkpoint format version {version} is not supported by this reader (expects {VERSION}); "
                           "re-export it with a matching release or migrate it explicitly")
    (stored,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != stored:
        raise ChecksumError(f"CRC32 mismatch: {_locate_damage(buf)}")
    r = _Reader(buf, len(buf) - 4)
    _, meta, state, quant = _walk(r)
    return Checkpoint(meta, state, quant)


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode(ckpt))
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    return decode(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# model <-> checkpoint
# ---------------------------------------------------------------------------

def model_checkpoint(model, seed: int | None = None, config_digest: str = "", quant: dict | None = None,
                     **extra_meta) -> Checkpoint:
    from ..graph.build import GeneratorModel

    meta = {"kind": model.kind, "seed": seed, "config_digest": config_digest}
    if isinstance(model, GeneratorModel):
        meta.update(spec=model.spec.to_dict(), spec_hash=model.spec.digest(),
                    multiplier=model.spec.channel_multiplier, residuals=model.spec.residuals_enabled)
    elif getattr(model, "builder", None) is not None:
        meta["builder"] = model.builder
    meta.update(extra_meta)
    return Checkpoint(meta, OrderedDict(model.state_dict()), quant)


def save_model(model, path, **kw) -> None:
    save_checkpoint(model_checkpoint(model, **kw), path)


def load_model(path: str | Path, spec=None):
    """Rebuild the network stored at ``path``; ``spec`` overrides the stored generator table."""
    from ..graph.build import build_model, build_sync_expert
    from ..graph.spec import spec_from_dict

    ck = load_checkpoint(path)
    kind = ck.meta.get("kind")
    if kind == "generator":
        spec = spec or spec_from_dict(ck.meta["spec"])
        model = build_model(spec, 0)
    elif kind == "sync_expert":
        model = build_sync_expert(0, **{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in ck.meta.get("builder", {}).items()})
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")
    model.load_state_dict(ck.state)
    model.eval()
    if kind == "sync_expert":
        model.freeze()
    return model, ck
