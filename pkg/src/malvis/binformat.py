"""Minimal PE-like binary container: parse/serialize, raw-file ingestion,
synthetic family corpora, and JSON-lines corpus manifests.

Container layout (all integers little-endian)::

    magic (4)  "MVX1" plain / "MVXP" behind a packed stub
    section_count u16
    flags u16            bit0 packed stub present, bit1 has code section
    section table        per section: kind u8 + length u32
    section bytes        in table order
    overlay              everything to EOF

Files that do not start with a known magic are ingested losslessly as a
single data section with an empty overlay.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import BadParent, DuplicateId, InvalidSpec, MissingFile, TruncatedInput
from .seeding import rng_for

MAGIC = b"MVX1"
PACKED_MAGIC = b"MVXP"
HEADER_FIXED = 8
TABLE_ENTRY = 5

FLAG_PACKED_STUB = 1 << 0
FLAG_HAS_CODE = 1 << 1

KIND_CODE = 0
KIND_DATA = 1
KIND_RESOURCE = 2
SECTION_KINDS = (KIND_CODE, KIND_DATA, KIND_RESOURCE)

ORIGIN_BASE = "base"
ORIGIN_PACKED = "packed"
ORIGIN_MORPHED = "morphed"
ORIGINS = (ORIGIN_BASE, ORIGIN_PACKED, ORIGIN_MORPHED)

# Byte pairs the synthetic code alphabet treats as interchangeable
# opcodes.  The corpus generator sprinkles the left-hand sides into code
# sections; the morphing engine swaps in either direction.
CODE_SWAP_PAIRS = (
    (b"\x31\xc0", b"\x29\xc0"),
    (b"\x85\xd2", b"\x09\xd2"),
    (b"\x90\x90", b"\x87\xc9"),
    (b"\x8b\xc1", b"\x89\xc8"),
)


@dataclass
class Section:
    kind: int
    data: bytes

    def __post_init__(self):
        if self.kind not in SECTION_KINDS:
            raise ValueError(f"unknown section kind {self.kind}")


@dataclass
class Header:
    magic: bytes = MAGIC
    section_count: int = 0
    flags: int = 0
    declared_sizes: list[int] = field(default_factory=list)

    @property
    def packed_stub_present(self) -> bool:
        return bool(self.flags & FLAG_PACKED_STUB)

    @property
    def has_code_section(self) -> bool:
        return bool(self.flags & FLAG_HAS_CODE)


@dataclass
class Binary:
    """A parsed executable-like container plus corpus metadata."""

    id: str
    family: str
    header: Header
    sections: list[Section]
    overlay: bytes = b""
    year: int | None = None
    origin: str = ORIGIN_BASE
    parent_id: str | None = None

    def total_size(self) -> int:
        table = TABLE_ENTRY * len(self.sections)
        return HEADER_FIXED + table + sum(len(s.data) for s in self.sections) + len(self.overlay)

    def code_sections(self) -> list[Section]:
        return [s for s in self.sections if s.kind == KIND_CODE]


def make_binary(id: str, family: str, sections: list[Section], overlay: bytes = b"",
                magic: bytes = MAGIC, packed_stub: bool = False, year: int | None = None,
                origin: str = ORIGIN_BASE, parent_id: str | None = None) -> Binary:
    """Build a Binary with a header consistent with its sections."""
    if origin not in ORIGINS:
        raise ValueError(f"unknown origin {origin!r}")
    if origin != ORIGIN_BASE and parent_id is None:
        raise ValueError(f"{id}: a {origin} sample needs a parent_id")
    flags = 0
    if packed_stub:
        flags |= FLAG_PACKED_STUB
    if any(s.kind == KIND_CODE for s in sections):
        flags |= FLAG_HAS_CODE
    header = Header(magic=magic, section_count=len(sections), flags=flags,
                    declared_sizes=[len(s.data) for s in sections])
    return Binary(id=id, family=family, header=header, sections=sections, overlay=overlay,
                  year=year, origin=origin, parent_id=parent_id)


def serialize(b: Binary) -> bytes:
    """Deterministic byte layout; the exact inverse of :func:`parse`."""
    out = bytearray()
    out += b.header.magic
    out += len(b.sections).to_bytes(2, "little")
    out += (b.header.flags & 0xFFFF).to_bytes(2, "little")
    for s in b.sections:
        out.append(s.kind)
        out += len(s.data).to_bytes(4, "little")
    for s in b.sections:
        out += s.data
    out += b.overlay
    return bytes(out)


def _wrap_raw(raw: bytes, id: str, family: str) -> Binary:
    return make_binary(id=id, family=family, sections=[Section(KIND_DATA, raw)])


def parse(raw: bytes, id: str = "unnamed", family: str = "unknown") -> Binary:
    """Parse container bytes; anything without a known magic is wrapped
    losslessly as a single data section (empty overlay)."""
    if raw[:4] not in (MAGIC, PACKED_MAGIC):
        return _wrap_raw(raw, id, family)
    if len(raw) < HEADER_FIXED:
        raise TruncatedInput(f"{id}: header needs {HEADER_FIXED} bytes, got {len(raw)}")
    count = int.from_bytes(raw[4:6], "little")
    flags = int.from_bytes(raw[6:8], "little")
    table_end = HEADER_FIXED + TABLE_ENTRY * count
    if len(raw) < table_end:
        raise TruncatedInput(f"{id}: section table overruns input")
    kinds: list[int] = []
    sizes: list[int] = []
    for i in range(count):
        off = HEADER_FIXED + TABLE_ENTRY * i
        kind = raw[off]
        if kind not in SECTION_KINDS:
            return _wrap_raw(raw, id, family)
        kinds.append(kind)
        sizes.append(int.from_bytes(raw[off + 1:off + 5], "little"))
    if table_end + sum(sizes) > len(raw):
        raise TruncatedInput(f"{id}: declared sizes exceed available bytes")
    sections = []
    pos = table_end
    for kind, size in zip(kinds, sizes):
        sections.append(Section(kind, raw[pos:pos + size]))
        pos += size
    header = Header(magic=raw[:4], section_count=count, flags=flags, declared_sizes=sizes)
    return Binary(id=id, family=family, header=header, sections=sections, overlay=raw[pos:])


# ---------------------------------------------------------------------------
# synthetic corpus generation


@dataclass(frozen=True)
class TextureSpec:
    """Byte texture: a repeating tile shifted per stripe, with a fraction
    of bytes replaced by uniform noise (1.0 means pure noise)."""

    tile: bytes
    stripe_levels: tuple[int, ...] = (0,)
    stripe_bytes: int = 1024
    noise_fraction: float = 0.03

    def fill(self, length: int, rng: np.random.Generator) -> bytearray:
        if length <= 0:
            return bytearray()
        if self.noise_fraction >= 1.0:
            return bytearray(rng.integers(0, 256, size=length, dtype=np.uint8).tobytes())
        tile = np.frombuffer(self.tile, dtype=np.uint8)
        reps = math.ceil(length / len(tile))
        body = np.tile(tile, reps)[:length].astype(np.int64)
        n_stripes = math.ceil(length / self.stripe_bytes)
        for i in range(n_stripes):
            lvl = self.stripe_levels[i % len(self.stripe_levels)]
            body[i * self.stripe_bytes:(i + 1) * self.stripe_bytes] += lvl
        body &= 0xFF
        arr = body.astype(np.uint8)
        k = int(length * self.noise_fraction)
        if k:
            idx = rng.choice(length, size=k, replace=False)
            arr[idx] = rng.integers(0, 256, size=k, dtype=np.uint8)
        return bytearray(arr.tobytes())


@dataclass(frozen=True)
class FamilySpec:
    """Recipe for one synthetic family.

    ``motif_band`` bounds the file offset of the planted motif; negative
    offsets anchor to end of file.  ``packable=False`` ships every sample
    already behind the packed stub (it cannot be packed again).  The
    overlay splits into a lead part and an optional trailing band with its
    own texture (the part a packer preserves at the very end of the file).
    """

    name: str
    size_min: int
    size_max: int
    motif: bytes
    motif_band: tuple[int, int]
    texture: TextureSpec
    overlay_texture: TextureSpec | None = None
    overlay_tail_texture: TextureSpec | None = None
    overlay_tail_fraction: float = 0.5
    packable: bool = True
    has_code: bool = True
    overlay_min: int = 0
    overlay_max: int = 0
    prologue_level: int | None = None
    prologue_len: int = 0
    code_patterns: tuple[bytes, ...] = ()
    year_range: tuple[int, int] = (2015, 2022)

    def build_overlay(self, length: int, rng: np.random.Generator) -> bytes:
        lead_tex = self.overlay_texture or TextureSpec(tile=b"\x00", noise_fraction=1.0)
        if self.overlay_tail_texture is None or length < 8:
            return bytes(lead_tex.fill(length, rng))
        tail_len = int(length * self.overlay_tail_fraction)
        lead = lead_tex.fill(length - tail_len, rng)
        tail = self.overlay_tail_texture.fill(tail_len, rng)
        return bytes(lead + tail)


def _sprinkle_patterns(buf: bytearray, patterns: tuple[bytes, ...],
                       rng: np.random.Generator, mean_gap: int = 128) -> None:
    if not patterns or not buf:
        return
    pos = int(rng.integers(0, mean_gap))
    while pos + max(len(p) for p in patterns) < len(buf):
        pat = patterns[int(rng.integers(0, len(patterns)))]
        buf[pos:pos + len(pat)] = pat
        pos += len(pat) + int(rng.integers(mean_gap // 2, mean_gap * 3 // 2))


def _plant_motif(regions: list[tuple[int, bytearray]], total: int, spec: FamilySpec,
                 rng: np.random.Generator) -> None:
    """Overwrite the motif at a seeded offset inside the band, entirely
    within one writable payload region."""
    lo, hi = spec.motif_band
    lo = lo + total if lo < 0 else lo
    hi = hi + total if hi < 0 else hi
    m = len(spec.motif)
    # pick a region that can host the motif, then a uniform offset inside it
    spans = []
    for start, buf in regions:
        a = max(lo, start)
        b = min(hi, start + len(buf)) - m
        if b >= a:
            spans.append((a, b, buf, start))
    if not spans:
        raise InvalidSpec(f"{spec.name}: motif band {spec.motif_band} has no room "
                          f"inside writable payload")
    a, b, buf, start = spans[int(rng.integers(0, len(spans)))]
    off = int(rng.integers(a, b + 1))
    buf[off - start:off - start + m] = spec.motif


def _payload_regions(b: Binary) -> list[tuple[int, bytearray]]:
    """(file offset, mutable buffer) pairs for section payloads and overlay."""
    regions = []
    pos = HEADER_FIXED + TABLE_ENTRY * len(b.sections)
    for s in b.sections:
        regions.append((pos, bytearray(s.data)))
        pos += len(s.data)
    regions.append((pos, bytearray(b.overlay)))
    return regions


def _validate_spec(spec: FamilySpec) -> None:
    if not spec.motif:
        raise InvalidSpec(f"{spec.name}: empty motif")
    if spec.size_min > spec.size_max:
        raise InvalidSpec(f"{spec.name}: size_min > size_max")
    if spec.overlay_min > spec.overlay_max:
        raise InvalidSpec(f"{spec.name}: overlay_min > overlay_max")
    if spec.size_min < HEADER_FIXED + TABLE_ENTRY + len(spec.motif):
        raise InvalidSpec(f"{spec.name}: size band too small for container + motif")


def _generate_plain(spec: FamilySpec, rng: np.random.Generator, sample_id: str,
                    year: int | None) -> Binary:
    total = int(rng.integers(spec.size_min, spec.size_max + 1))
    overlay_len = 0
    if spec.overlay_max > 0:
        overlay_len = int(rng.integers(spec.overlay_min, spec.overlay_max + 1))
    n_sections = 2 if spec.has_code else 1
    body = total - HEADER_FIXED - TABLE_ENTRY * n_sections - overlay_len
    if body < 64:
        body = 64
    if spec.has_code:
        code_len = max(32, int(body * 0.30))
        data_len = body - code_len
        code = spec.texture.fill(code_len, rng)
        _sprinkle_patterns(code, spec.code_patterns, rng)
        sections = [Section(KIND_CODE, bytes(code)),
                    Section(KIND_DATA, bytes(spec.texture.fill(data_len, rng)))]
    else:
        sections = [Section(KIND_DATA, bytes(spec.texture.fill(body, rng)))]
    if spec.prologue_level is not None and spec.prologue_len:
        first = bytearray(sections[0].data)
        first[:spec.prologue_len] = bytes([spec.prologue_level]) * min(spec.prologue_len, len(first))
        sections[0] = Section(sections[0].kind, bytes(first))
    overlay = spec.build_overlay(overlay_len, rng)
    b = make_binary(id=sample_id, family=spec.name, sections=sections, overlay=overlay, year=year)
    regions = _payload_regions(b)
    _plant_motif(regions, b.total_size(), spec, rng)
    sections = []
    pos = 0
    for s in b.sections:
        sections.append(Section(s.kind, bytes(regions[pos][1])))
        pos += 1
    return replace(b, sections=sections, overlay=bytes(regions[-1][1]))


def _generate_prepacked(spec: FamilySpec, rng: np.random.Generator, sample_id: str,
                        year: int | None) -> Binary:
    """Samples born behind the packed stub: a compressed inner image plus a
    noise overlay padded so the outer file lands in the size band."""
    from . import lz  # local import: obfusc depends on binformat, not vice versa

    total = int(rng.integers(spec.size_min, spec.size_max + 1))
    inner_len = max(256, int(total * 0.6))
    inner_body = spec.texture.fill(inner_len, rng)
    inner = make_binary(id=sample_id + ".inner", family=spec.name,
                        sections=[Section(KIND_DATA, bytes(inner_body))])
    inner_bytes = serialize(inner)
    comp = lz.compress(inner_bytes)
    stub = len(inner_bytes).to_bytes(8, "little") + lz.whiten(comp)
    overhead = HEADER_FIXED + TABLE_ENTRY + len(stub)
    overlay_len = max(128, total - overhead)
    overlay = spec.build_overlay(overlay_len, rng)
    b = make_binary(id=sample_id, family=spec.name, sections=[Section(KIND_DATA, stub)],
                    overlay=overlay, magic=PACKED_MAGIC, packed_stub=True, year=year)
    regions = _payload_regions(b)
    # the stub is not writable (it must stay decompressible): motif goes in
    # the overlay, so restrict candidate regions to it
    _plant_motif(regions[-1:], b.total_size(), spec, rng)
    return replace(b, overlay=bytes(regions[-1][1]))


def generate_family(spec: FamilySpec, n: int, seed: int) -> list[Binary]:
    """Generate ``n`` labeled samples for one family; deterministic in
    (spec, n, seed)."""
    _validate_spec(spec)
    out = []
    for i in range(n):
        rng = rng_for(seed, "gen", spec.name, i)
        sample_id = f"{spec.name}-{i:04d}"
        year = int(rng.integers(spec.year_range[0], spec.year_range[1] + 1))
        if spec.packable:
            out.append(_generate_plain(spec, rng, sample_id, year))
        else:
            out.append(_generate_prepacked(spec, rng, sample_id, year))
    return out


def default_family_specs() -> list[tuple[FamilySpec, int]]:
    """The built-in five-family desk corpus: (spec, sample count) pairs.

    alfa/bravo/charlie are packable with distinct body tile textures;
    delta ships pre-packed; echo is pure noise (incompressible).  charlie
    has no code section, so it cannot be morphed.  Counts keep a 4:1
    imbalance across families.
    """
    patterns = tuple(p for p, _ in CODE_SWAP_PAIRS)
    lead = TextureSpec(tile=b"\x80", stripe_levels=(0,), stripe_bytes=4096,
                       noise_fraction=0.85)
    specs = [
        (FamilySpec(
            name="alfa", size_min=12 * 1024, size_max=26 * 1024,
            motif=b"\xf0|ALFA-SIG-7f3a|\x0f", motif_band=(64, 2048),
            texture=TextureSpec(tile=bytes((40, 40, 56, 56, 40, 72, 56, 40) * 2),
                                stripe_levels=(0, 64), stripe_bytes=1024),
            overlay_texture=lead,
            overlay_tail_texture=TextureSpec(tile=bytes((44, 52)), stripe_levels=(0,),
                                             stripe_bytes=4096, noise_fraction=0.25),
            overlay_min=1024, overlay_max=2048,
            prologue_level=24, prologue_len=768,
            code_patterns=patterns), 200),
        (FamilySpec(
            name="bravo", size_min=12 * 1024, size_max=26 * 1024,
            motif=b"\xf1|BRAVO-SIG-22c9|\x0e", motif_band=(64, 2048),
            texture=TextureSpec(tile=bytes(range(120, 216, 4)),
                                stripe_levels=(0, -48, 24), stripe_bytes=1536),
            overlay_texture=lead,
            overlay_tail_texture=TextureSpec(tile=bytes((140, 150)), stripe_levels=(0,),
                                             stripe_bytes=4096, noise_fraction=0.25),
            overlay_min=1024, overlay_max=2048,
            prologue_level=216, prologue_len=768,
            code_patterns=patterns), 150),
        (FamilySpec(
            name="charlie", size_min=11 * 1024, size_max=24 * 1024,
            motif=b"\xf2|CHARLIE-SIG-90d1|\x0d", motif_band=(64, 2048),
            texture=TextureSpec(tile=bytes((208, 16, 208, 208, 16, 16) * 2),
                                stripe_levels=(0, 0, 32), stripe_bytes=512),
            overlay_texture=lead,
            overlay_tail_texture=TextureSpec(tile=bytes((225, 215)), stripe_levels=(0,),
                                             stripe_bytes=4096, noise_fraction=0.25),
            overlay_min=1024, overlay_max=2048,
            has_code=False,
            prologue_level=112, prologue_len=768), 120),
        (FamilySpec(
            name="delta", size_min=5 * 1024, size_max=9 * 1024,
            motif=b"\xf3|DELTA-SIG-4be2|\x0c", motif_band=(-1536, -64),
            texture=TextureSpec(tile=bytes((80, 96, 160, 144) * 4),
                                stripe_levels=(0, 48), stripe_bytes=768),
            overlay_texture=lead,
            overlay_tail_texture=TextureSpec(tile=b"\x28", stripe_levels=(0, 176),
                                             stripe_bytes=192, noise_fraction=0.1),
            overlay_tail_fraction=0.6,
            packable=False), 80),
        (FamilySpec(
            name="echo", size_min=12 * 1024, size_max=22 * 1024,
            motif=b"\xf4|ECHO-SIG-d077|\x0b", motif_band=(64, 2048),
            texture=TextureSpec(tile=b"\x00", noise_fraction=1.0),
            overlay_min=512, overlay_max=1024,
            code_patterns=patterns), 50),
    ]
    return specs


def make_default_corpus(seed: int, scale: float = 1.0) -> list[Binary]:
    """Generate the built-in corpus; ``scale`` shrinks per-family counts."""
    out = []
    for spec, count in default_family_specs():
        n = max(3, int(round(count * scale)))
        out.extend(generate_family(spec, n, seed))
    return out


# ---------------------------------------------------------------------------
# corpus manifests (JSON lines)


@dataclass
class ManifestEntry:
    id: str
    path: str
    family: str
    year: int | None
    origin: str
    parent_id: str | None


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]


def _check_entries(entries: list[ManifestEntry]) -> None:
    seen: dict[str, ManifestEntry] = {}
    for e in entries:
        if e.id in seen:
            raise DuplicateId(f"duplicate sample id {e.id!r}")
        seen[e.id] = e
    for e in entries:
        if e.origin != ORIGIN_BASE:
            parent = seen.get(e.parent_id or "")
            if parent is None or parent.origin != ORIGIN_BASE:
                raise BadParent(f"{e.id}: parent_id {e.parent_id!r} does not resolve "
                                f"to a base entry")


def save_corpus(binaries: list[Binary], out_dir: str | Path) -> CorpusManifest:
    """Write one .bin per sample plus manifest.jsonl; returns the manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for b in binaries:
        rel = f"{b.id}.bin"
        entries.append(ManifestEntry(id=b.id, path=rel, family=b.family, year=b.year,
                                     origin=b.origin, parent_id=b.parent_id))
    _check_entries(entries)
    for b, e in zip(binaries, entries):
        (out / e.path).write_bytes(serialize(b))
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(json.dumps({"id": e.id, "path": e.path, "family": e.family,
                                 "year": e.year, "origin": e.origin,
                                 "parent_id": e.parent_id}, sort_keys=True) + "\n")
    return CorpusManifest(entries=entries)


def load_corpus(manifest_path: str | Path) -> list[Binary]:
    """Load a corpus back from its manifest; inverse of :func:`save_corpus`
    on (id, family, bytes)."""
    mpath = Path(manifest_path)
    if not mpath.is_file():
        raise MissingFile(f"manifest not found: {mpath}")
    entries = []
    with open(mpath, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            d = json.loads(line)
            entries.append(ManifestEntry(id=d["id"], path=d["path"], family=d["family"],
                                         year=d.get("year"), origin=d.get("origin", ORIGIN_BASE),
                                         parent_id=d.get("parent_id")))
    _check_entries(entries)
    out = []
    for e in entries:
        fpath = mpath.parent / e.path
        if not fpath.is_file():
            raise MissingFile(f"{e.id}: sample file missing: {fpath}")
        b = parse(fpath.read_bytes(), id=e.id, family=e.family)
        out.append(replace(b, year=e.year, origin=e.origin, parent_id=e.parent_id))
    return out


def corpus_digest(binaries: list[Binary]) -> str:
    """Stable content hash over (id, family, bytes), order-independent."""
    import hashlib

    h = hashlib.sha256()
    for b in sorted(binaries, key=lambda x: x.id):
        h.update(b.id.encode())
        h.update(b"\x00")
        h.update(b.family.encode())
        h.update(b"\x00")
        h.update(serialize(b))
    return h.hexdigest()
