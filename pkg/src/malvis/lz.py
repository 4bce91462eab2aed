"""Byte-oriented LZ compressor behind the packer emulation.

Greedy single-slot hash matcher producing a token stream of literals and
(offset, length) back-references, eight tokens per control byte.  The goal
is not a competitive codec: it only has to shred byte textures the way a
generic executable packer does, refuse to shrink high-entropy input, and
invert exactly.

Stream layout: repeating groups of [flag byte][8 tokens].  Flag bit i
(LSB first) set means token i is a match: offset u16 LE (1..65535 back),
length u16 LE (MIN_MATCH..65535).  Clear means one literal byte.  The
uncompressed length is carried out of band by the caller.
"""

from __future__ import annotations

import struct

from .errors import CorruptStream

MIN_MATCH = 5
MAX_MATCH = 0xFFFF
MAX_OFFSET = 0xFFFF
_HASH_BITS = 16

_WHITEN_SEED = 0x4D565850  # fixed keystream; packed bodies look high-entropy


def whiten(data: bytes) -> bytes:
    """XOR with a fixed pseudorandom keystream (self-inverse).  Packed
    stubs apply this so compressed bodies lose residual byte texture the
    way real packer output does."""
    import numpy as np

    if not data:
        return data
    key = np.random.default_rng(_WHITEN_SEED).integers(0, 256, size=len(data),
                                                       dtype=np.uint8)
    arr = np.frombuffer(data, dtype=np.uint8) ^ key
    return arr.tobytes()


def _hash4(data: bytes, i: int) -> int:
    v = data[i] | (data[i + 1] << 8) | (data[i + 2] << 16) | (data[i + 3] << 24)
    return ((v * 2654435761) >> (32 - _HASH_BITS)) & ((1 << _HASH_BITS) - 1)


def compress(data: bytes) -> bytes:
    """Compress ``data``; output may be larger than the input for
    incompressible bytes (the packer treats that as not applicable)."""
    n = len(data)
    out = bytearray()
    group = bytearray()
    flags = 0
    ntok = 0

    def flush():
        nonlocal flags, ntok
        out.append(flags)
        out.extend(group)
        group.clear()
        flags = 0
        ntok = 0

    table = [-1] * (1 << _HASH_BITS)
    pos = 0
    while pos < n:
        match_len = 0
        match_off = 0
        if pos + 4 <= n:
            h = _hash4(data, pos)
            cand = table[h]
            table[h] = pos
            if cand >= 0 and pos - cand <= MAX_OFFSET and data[cand:cand + 4] == data[pos:pos + 4]:
                limit = min(MAX_MATCH, n - pos)
                length = 4
                while length < limit and data[cand + length] == data[pos + length]:
                    length += 1
                if length >= MIN_MATCH:
                    match_len = length
                    match_off = pos - cand
        if match_len:
            flags |= 1 << ntok
            group += struct.pack("<HH", match_off, match_len)
            pos += match_len
        else:
            group.append(data[pos])
            pos += 1
        ntok += 1
        if ntok == 8:
            flush()
    if ntok:
        flush()
    return bytes(out)


def decompress(blob: bytes, out_len: int) -> bytes:
    """Invert :func:`compress`; ``out_len`` is the original byte count."""
    out = bytearray()
    i = 0
    n = len(blob)
    try:
        while len(out) < out_len:
            if i >= n:
                raise CorruptStream("compressed stream truncated")
            flags = blob[i]
            i += 1
            for bit in range(8):
                if len(out) >= out_len:
                    break
                if flags & (1 << bit):
                    off, length = struct.unpack_from("<HH", blob, i)
                    i += 4
                    if off == 0 or off > len(out) or length < MIN_MATCH:
                        raise CorruptStream("bad back-reference")
                    start = len(out) - off
                    if off >= length:
                        out += out[start:start + length]
                    else:
                        chunk = bytes(out[start:])
                        while len(chunk) < length:
                            chunk = chunk + chunk
                        out += chunk[:length]
                else:
                    out.append(blob[i])
                    i += 1
    except (struct.error, IndexError) as exc:
        raise CorruptStream("compressed stream truncated") from exc
    if len(out) != out_len:
        raise CorruptStream("decoded length mismatch")
    return bytes(out)
