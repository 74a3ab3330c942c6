"""Codecs for the per-sample gradient matrix sent from feature party to clean room."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from cleanroom.model import PerSampleGrads

CODEC_NONE = 0
CODEC_QSGD = 1
CODEC_BF16 = 2
CODEC_RAW64 = 3  # float64 debug wire, not for production use

_KIND_IDS = {"none": CODEC_NONE, "qsgd": CODEC_QSGD, "bf16": CODEC_BF16, "raw64": CODEC_RAW64}
_ID_KINDS = {v: k for k, v in _KIND_IDS.items()}


class CodecError(ValueError):
    pass


@dataclass(frozen=True)
class Codec:
    kind: str = "none"
    bits: int = 8

    def __post_init__(self):
        if self.kind not in _KIND_IDS:
            raise CodecError(f"unknown codec {self.kind!r}")
        if self.kind == "qsgd" and not 2 <= self.bits <= 8:
            raise CodecError(f"qsgd bits must be in [2, 8], got {self.bits}")

    @property
    def codec_id(self) -> int:
        return _KIND_IDS[self.kind]

    @property
    def levels(self) -> int:
        """Number of positive quantisation levels ``s``."""
        return 2 ** (self.bits - 1) - 1

    @classmethod
    def parse(cls, text: str) -> "Codec":
        """``none``, ``bf16``, ``raw64``, ``qsgd`` or ``qsgd<bits>`` (e.g. ``qsgd8``)."""
        text = text.strip().lower()
        if text.startswith("qsgd"):
            return cls("qsgd", int(text[4:] or 8))
        return cls(text)

    @classmethod
    def from_id(cls, codec_id: int, bits: int = 8) -> "Codec":
        if codec_id not in _ID_KINDS:
            raise CodecError(f"unknown codec id {codec_id}")
        return cls(_ID_KINDS[codec_id], bits if codec_id == CODEC_QSGD else 8)

    def __str__(self):
        return f"qsgd{self.bits}" if self.kind == "qsgd" else self.kind


@dataclass(frozen=True)
class CompressedGrads:
    codec_id: int
    bits: int
    batch_size: int
    param_count: int
    payload: bytes

    @property
    def codec(self) -> Codec:
        return Codec.from_id(self.codec_id, self.bits)

    def norms(self) -> np.ndarray:
        if self.codec_id != CODEC_QSGD:
            raise CodecError("only qsgd payloads carry norms")
        return np.frombuffer(self.payload[: 4 * self.batch_size], dtype="<f4")


def wire_bytes(batch_size: int, param_count: int, codec: Codec) -> int:
    """Exact payload size for ``codec``, excluding message framing."""
    n = batch_size * param_count
    if codec.kind == "none":
        return 4 * n
    if codec.kind == "bf16":
        return 2 * n
    if codec.kind == "raw64":
        return 8 * n
    return 4 * batch_size + (n * codec.bits + 7) // 8


def encode(G: PerSampleGrads | np.ndarray, codec: Codec, rng: np.random.Generator | None = None) -> CompressedGrads:
    M = G.G if isinstance(G, PerSampleGrads) else np.asarray(G, dtype=np.float64)
    if M.ndim != 2:
        raise CodecError("gradient matrix must be 2-D")
    if not np.all(np.isfinite(M)):
        raise CodecError("non-finite gradient entries")
    b, f = M.shape
    if codec.kind == "none":
        payload = M.astype("<f4").tobytes()
    elif codec.kind == "raw64":
        payload = M.astype("<f8").tobytes()
    elif codec.kind == "bf16":
        payload = bf16_bits(M.astype(np.float32)).astype("<u2").tobytes()
    else:
        if rng is None:
            raise CodecError("qsgd needs a random generator for stochastic rounding")
        norms, signs, levels = qsgd_quantize(M, codec.levels, rng)
        payload = norms.astype("<f4").tobytes() + _pack(signs, levels, codec.bits)
    return CompressedGrads(codec.codec_id, codec.bits, b, f, payload)


def decode(c: CompressedGrads, expect: Codec | None = None) -> PerSampleGrads:
    if expect is not None and (expect.codec_id != c.codec_id or (c.codec_id == CODEC_QSGD and expect.bits != c.bits)):
        raise CodecError(f"codec mismatch: payload is {c.codec}, expected {expect}")
    codec = c.codec
    b, f = c.batch_size, c.param_count
    if len(c.payload) != wire_bytes(b, f, codec):
        raise CodecError(f"payload length {len(c.payload)} does not match {codec} for {b}x{f}")
    if codec.kind == "none":
        M = np.frombuffer(c.payload, dtype="<f4").astype(np.float64)
    elif codec.kind == "raw64":
        M = np.frombuffer(c.payload, dtype="<f8").astype(np.float64)
    elif codec.kind == "bf16":
        bits = np.frombuffer(c.payload, dtype="<u2").astype(np.uint32) << 16
        M = bits.view(np.float32).astype(np.float64)
    else:
        norms = np.frombuffer(c.payload[: 4 * b], dtype="<f4").astype(np.float64)
        signs, levels = _unpack(c.payload[4 * b:], b * f, codec.bits)
        s = codec.levels
        M = (np.where(signs, -1.0, 1.0) * levels).reshape(b, f) * (norms[:, None] / s)
        return PerSampleGrads(M)
    return PerSampleGrads(M.reshape(b, f))


def qsgd_quantize(M: np.ndarray, s: int, rng: np.random.Generator):
    """Row-wise stochastic quantisation to ``s`` levels.

    Returns float32 row norms, sign bits and integer levels in ``[0, s]``.
    The float32 norm is used both for quantising and decoding so the
    estimate stays unbiased after the norm is rounded for the wire.
    """
    norms = np.linalg.norm(M, axis=1).astype(np.float32)
    n64 = norms.astype(np.float64)
    safe = np.where(n64 > 0, n64, 1.0)
    u = np.abs(M) * (s / safe[:, None])
    lo = np.floor(u)
    levels = lo + (rng.random(M.shape) < (u - lo))
    levels = np.minimum(levels, s).astype(np.uint8)
    levels[n64 == 0] = 0
    signs = (M < 0) & (levels > 0)
    return norms, signs.astype(np.uint8), levels


def _pack(signs: np.ndarray, levels: np.ndarray, bits: int) -> bytes:
    codes = (signs.ravel().astype(np.uint16) << (bits - 1)) | levels.ravel()
    if bits == 8:
        return codes.astype(np.uint8).tobytes()
    # little-endian bit stream: code i occupies bits [i*bits, (i+1)*bits)
    bitmat = ((codes[:, None] >> np.arange(bits)) & 1).astype(np.uint8)
    return np.packbits(bitmat.ravel(), bitorder="little").tobytes()


def _unpack(data: bytes, n: int, bits: int):
    if bits == 8:
        codes = np.frombuffer(data, dtype=np.uint8).astype(np.uint16)
    else:
        stream = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")[: n * bits]
        codes = (stream.reshape(n, bits).astype(np.uint16) << np.arange(bits, dtype=np.uint16)).sum(axis=1)
    signs = (codes >> (bits - 1)) & 1
    levels = codes & ((1 << (bits - 1)) - 1)
    return signs.astype(bool), levels.astype(np.float64)


def bf16_bits(x: np.ndarray) -> np.ndarray:
    """Top 16 bits of each float32 after round-to-nearest-even."""
    u = np.ascontiguousarray(x, dtype=np.float32).view(np.uint32).astype(np.uint64)
    rounded = (u + 0x7FFF + ((u >> 16) & 1)) >> 16
    return rounded.astype(np.uint16)


def bf16_round(x: np.ndarray) -> np.ndarray:
    return (bf16_bits(x).astype(np.uint32) << 16).view(np.float32)
