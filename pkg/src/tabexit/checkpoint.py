"""Binary checkpoint holding a backbone and its decoder bank.

Layout (all integers unsigned 64-bit little-endian)::

    magic      8 bytes  b"ICXEXIT1"
    version    u64
    n_header   u64, then n_header config integers:
               d_model, n_layers, n_heads, d_ff, max_features, max_classes,
               seed, d_hidden, n_decoders
    n_records  u64, then per record:
               name_len, name (utf-8), rank, dims[rank], float64 data (row-major)

Backbone parameters keep their in-memory names (``feat.w``,
``layer3.attn.wq`` ...). Decoder ``i`` is stored as ``dec{i}.hidden.w``,
``dec{i}.hidden.b``, ``dec{i}.out.w``, ``dec{i}.out.b``; ``dec{N}`` is the
final decoder. ``n_decoders`` is N when a full bank is stored, 1 when only
the final decoder is present and 0 for a bare backbone.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneWeights, ModelConfig
from .decoders import DECODER_PARAMS, DecoderBank, DecoderWeights
from .errors import CheckpointError, ContractError
from .tensor import Tensor

MAGIC = b"ICXEXIT1"
VERSION = 1
HEADER_FIELDS = ("d_model", "n_layers", "n_heads", "d_ff", "max_features", "max_classes",
                 "seed", "d_hidden")

_U64 = struct.Struct("<Q")


def _records(backbone: BackboneWeights, bank: DecoderBank | None):
    yield from backbone.params.items()
    decoders = list(bank.decoders) if bank is not None else (
        [backbone.final_decoder] if backbone.final_decoder is not None else [])
    for dec in decoders:
        for name in DECODER_PARAMS:
            yield f"dec{dec.layer_index}.{name}", dec.params[name]


def to_bytes(backbone: BackboneWeights, bank: DecoderBank | None = None) -> bytes:
    cfg = backbone.config
    if bank is not None:
        final = bank[cfg.n_layers]
        if backbone.final_decoder is not None and any(
                not np.array_equal(final.params[k].data, backbone.final_decoder.params[k].data)
                for k in DECODER_PARAMS):
            raise ContractError("bank's last decoder differs from the backbone's final decoder")
        n_dec = len(bank)
    else:
        n_dec = 1 if backbone.final_decoder is not None else 0
    header = [getattr(cfg, f) for f in HEADER_FIELDS] + [n_dec]
    recs = list(_records(backbone, bank))

    out = bytearray(MAGIC)
    out += _U64.pack(VERSION)
    out += _U64.pack(len(header))
    for v in header:
        out += _U64.pack(v)
    out += _U64.pack(len(recs))
    for name, t in recs:
        raw = name.encode("utf-8")
        out += _U64.pack(len(raw)) + raw
        out += _U64.pack(t.data.ndim)
        for dim in t.data.shape:
            out += _U64.pack(dim)
        out += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    return bytes(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def from_bytes(buf: bytes) -> tuple[BackboneWeights, DecoderBank | None]:
    r = _Reader(buf)
    if r.take(8) != MAGIC:
        raise CheckpointError("not a checkpoint: bad magic")
    version = r.u64()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    n_header = r.u64()
    if n_header != len(HEADER_FIELDS) + 1:
        raise CheckpointError(f"header has {n_header} fields, expected {len(HEADER_FIELDS) + 1}")
    values = [r.u64() for _ in range(n_header)]
    cfg = ModelConfig(**dict(zip(HEADER_FIELDS, values)))
    n_dec = values[-1]
    if n_dec not in (0, 1, cfg.n_layers):
        raise CheckpointError(f"invalid decoder count {n_dec} for {cfg.n_layers} layers")

    params: dict[str, Tensor] = {}
    for _ in range(r.u64()):
        name_len = r.u64()
        if name_len > 4096:
            raise CheckpointError("corrupt record name length")
        try:
            name = r.take(name_len).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError("corrupt record name") from exc
        rank = r.u64()
        if rank > 8:
            raise CheckpointError(f"corrupt rank {rank} for {name}")
        shape = tuple(r.u64() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(r.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(data)
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after last record")

    dec_params = {k: v for k, v in params.items() if k.startswith("dec")}
    backbone = BackboneWeights(cfg, {k: v for k, v in params.items() if not k.startswith("dec")})

    def decoder(i: int) -> DecoderWeights:
        try:
            return DecoderWeights(i, {n: dec_params[f"dec{i}.{n}"] for n in DECODER_PARAMS})
        except KeyError as exc:
            raise CheckpointError(f"missing decoder record {exc}") from exc

    bank = None
    if n_dec:
        backbone.final_decoder = decoder(cfg.n_layers)
    if n_dec == cfg.n_layers:
        bank = DecoderBank([decoder(i) for i in range(1, cfg.n_layers)] + [backbone.final_decoder])
    return backbone, bank


def save_checkpoint(path, backbone: BackboneWeights, bank: DecoderBank | None = None) -> Path:
    path = Path(path)
    path.write_bytes(to_bytes(backbone, bank))
    return path


def load_checkpoint(path) -> tuple[BackboneWeights, DecoderBank | None]:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return from_bytes(buf)
