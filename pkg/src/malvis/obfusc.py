"""Attacker transforms: packer emulation and instruction-substitution
morphing, plus training-set enhancement and conversion-rate reports.

Packing compresses header+sections behind a stub (packed magic + original
length) and copies the overlay verbatim, so the trailing bytes of a packed
sample always equal the original overlay.  Morphing swaps byte patterns
inside code sections only; everything else is untouched.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import tempfile
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import lz
from .binformat import (CODE_SWAP_PAIRS, KIND_CODE, KIND_DATA, ORIGIN_BASE,
                        ORIGIN_MORPHED, ORIGIN_PACKED, PACKED_MAGIC, Binary, Section,
                        make_binary, parse, serialize)
from .errors import InvalidSpec, NotPacked
from .seeding import rng_for

STUB_LEN_FIELD = 8  # u64 LE original body length at the start of the stub section


@dataclass(frozen=True)
class PackResult:
    binary: Binary | None
    reason: str | None = None

    @property
    def applicable(self) -> bool:
        return self.binary is not None


MorphResult = PackResult


@dataclass(frozen=True)
class SubstitutionTable:
    """Pattern/replacement pairs declared semantics-preserving for the
    synthetic code alphabet.  Unambiguous scanning requires prefix-free
    patterns; in-place rewriting requires equal lengths."""

    pairs: tuple[tuple[bytes, bytes], ...]

    def __post_init__(self):
        pats = [p for p, _ in self.pairs]
        for p, r in self.pairs:
            if not p:
                raise InvalidSpec("empty substitution pattern")
            if len(p) != len(r):
                raise InvalidSpec(f"substitution must preserve length: {p.hex()}->{r.hex()}")
        for i, a in enumerate(pats):
            for j, b in enumerate(pats):
                if i != j and b.startswith(a):
                    raise InvalidSpec(f"pattern {a.hex()} is a prefix of {b.hex()}")

    @classmethod
    def from_json(cls, path: str | Path) -> "SubstitutionTable":
        items = json.loads(Path(path).read_text())
        return cls(tuple((bytes.fromhex(d["pattern"]), bytes.fromhex(d["replacement"]))
                         for d in items))

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(
            [{"pattern": p.hex(), "replacement": r.hex()} for p, r in self.pairs],
            indent=2))


def default_substitution_table() -> SubstitutionTable:
    """Both directions of the synthetic opcode swap pairs, so a morphed
    sample stays morphable indefinitely."""
    pairs = []
    for a, b in CODE_SWAP_PAIRS:
        pairs.append((a, b))
        pairs.append((b, a))
    return SubstitutionTable(tuple(pairs))


# ---------------------------------------------------------------------------
# packing


def pack(b: Binary) -> PackResult:
    """Compress header+sections behind the packed stub; overlay appended
    verbatim.  Not applicable for already-packed or incompressible input."""
    if b.header.magic == PACKED_MAGIC or b.header.packed_stub_present:
        return PackResult(None, "already packed")
    full = serialize(b)
    body = full[:len(full) - len(b.overlay)] if b.overlay else full
    comp = lz.compress(body)
    if len(comp) >= len(body):
        return PackResult(None, "incompressible")
    stub = len(body).to_bytes(STUB_LEN_FIELD, "little") + lz.whiten(comp)
    packed = make_binary(id=f"{b.id}.packed", family=b.family,
                         sections=[Section(KIND_DATA, stub)], overlay=b.overlay,
                         magic=PACKED_MAGIC, packed_stub=True, year=b.year,
                         origin=ORIGIN_PACKED, parent_id=b.id)
    return PackResult(packed)


def unpack(b: Binary) -> Binary:
    """Exact inverse of :func:`pack` (validation path)."""
    if b.header.magic != PACKED_MAGIC and not b.header.packed_stub_present:
        raise NotPacked(f"{b.id}: no packed stub present")
    if not b.sections or len(b.sections[0].data) < STUB_LEN_FIELD:
        raise NotPacked(f"{b.id}: stub section missing or short")
    stub = b.sections[0].data
    body_len = int.from_bytes(stub[:STUB_LEN_FIELD], "little")
    body = lz.decompress(lz.whiten(stub[STUB_LEN_FIELD:]), body_len)
    inner = parse(body, id=b.parent_id or f"{b.id}.unpacked", family=b.family)
    return Binary(id=inner.id, family=b.family, header=inner.header,
                  sections=inner.sections, overlay=b.overlay, year=b.year,
                  origin=ORIGIN_BASE, parent_id=None)


def pack_with_command(b: Binary, cmd: str) -> PackResult:
    """Pass-through to an external packer command.  ``cmd`` is a shell
    template with {in} and {out} placeholders; the output file is parsed
    back into a Binary.  Untested against real packers."""
    with tempfile.TemporaryDirectory() as tmp:
        src = Path(tmp) / "in.bin"
        dst = Path(tmp) / "out.bin"
        src.write_bytes(serialize(b))
        argv = [a.format(**{"in": str(src), "out": str(dst)}) for a in shlex.split(cmd)]
        proc = subprocess.run(argv, capture_output=True)
        if proc.returncode != 0 or not dst.is_file():
            return PackResult(None, f"packer command failed (rc={proc.returncode})")
        out = parse(dst.read_bytes(), id=f"{b.id}.packed", family=b.family)
        out.year = b.year
        out.origin = ORIGIN_PACKED
        out.parent_id = b.id
        return PackResult(out)


# ---------------------------------------------------------------------------
# morphing


def _morph_section(data: bytes, table: SubstitutionTable, passes: int,
                   rng: np.random.Generator) -> tuple[bytes, int]:
    """Left-to-right scan; each match replaced with probability 0.5.
    Returns (new bytes, total matches seen)."""
    buf = bytearray(data)
    pairs = table.pairs
    matches = 0
    for _ in range(passes):
        i = 0
        n = len(buf)
        while i < n:
            hit = None
            for pat, rep in pairs:
                if buf[i:i + len(pat)] == pat:
                    hit = (pat, rep)
                    break
            if hit is None:
                i += 1
                continue
            matches += 1
            pat, rep = hit
            if rng.random() < 0.5:
                buf[i:i + len(pat)] = rep
            i += len(pat)
    return bytes(buf), matches


def morph(b: Binary, table: SubstitutionTable | None = None, passes: int = 1,
          seed: int = 0) -> MorphResult:
    """Substitute equivalent byte patterns inside code sections only.
    Per-sample randomness derives from (seed, sample id), so results do
    not depend on call order."""
    if passes < 1:
        raise InvalidSpec("passes must be >= 1")
    table = table or default_substitution_table()
    code = b.code_sections()
    if not code:
        return MorphResult(None, "no code section")
    rng = rng_for(seed, "morph", b.id)
    new_sections = []
    total_matches = 0
    for s in b.sections:
        if s.kind == KIND_CODE:
            data, matches = _morph_section(s.data, table, passes, rng)
            total_matches += matches
            new_sections.append(Section(s.kind, data))
        else:
            new_sections.append(s)
    if total_matches == 0:
        return MorphResult(None, "no matches")
    morphed = make_binary(id=f"{b.id}.morphed", family=b.family, sections=new_sections,
                          overlay=b.overlay, magic=b.header.magic,
                          packed_stub=b.header.packed_stub_present, year=b.year,
                          origin=ORIGIN_MORPHED, parent_id=b.id)
    return MorphResult(morphed)


# ---------------------------------------------------------------------------
# enhancement and reporting


def build_enhanced_training_set(train: list[Binary], pack_fraction: float,
                                morph_fraction: float, seed: int,
                                table: SubstitutionTable | None = None,
                                morph_passes: int = 1) -> tuple[list[Binary], dict]:
    """Original samples plus packed/morphed copies of seeded random
    subsets; non-applicable transforms are skipped and counted.

    Returns (enhanced list, counts dict)."""
    if not (0.0 <= pack_fraction <= 1.0 and 0.0 <= morph_fraction <= 1.0):
        raise InvalidSpec("fractions must be in [0, 1]")
    out = list(train)
    counts = {"pack_selected": 0, "pack_applied": 0, "pack_skipped": 0,
              "morph_selected": 0, "morph_applied": 0, "morph_skipped": 0}
    n = len(train)
    rng = rng_for(seed, "enhance")
    for fraction, kind in ((pack_fraction, "pack"), (morph_fraction, "morph")):
        k = int(round(n * fraction))
        chosen = sorted(rng.choice(n, size=k, replace=False)) if k else []
        counts[f"{kind}_selected"] = len(chosen)
        for i in chosen:
            b = train[int(i)]
            res = pack(b) if kind == "pack" else morph(b, table, morph_passes, seed)
            if res.applicable:
                out.append(res.binary)
                counts[f"{kind}_applied"] += 1
            else:
                counts[f"{kind}_skipped"] += 1
    return out, counts


def rate_percent(converted: int, total: int) -> float:
    """converted/total as a percentage, exact rational, half-up to 2 dp."""
    if total == 0:
        return 0.0
    exact = Fraction(converted * 100, total)
    quantized = (Decimal(exact.numerator) / Decimal(exact.denominator)).quantize(
        Decimal("0.01"), rounding=ROUND_HALF_UP)
    return float(quantized)


@dataclass
class ConversionReport:
    per_family: dict[str, dict]
    overall: dict
    empty_classes: list[str]

    def to_dict(self) -> dict:
        return {"per_family": self.per_family, "overall": self.overall,
                "empty_classes": self.empty_classes}


def conversion_report(base: list[Binary], transformed: list[Binary]) -> ConversionReport:
    """Per-family and overall conversion rates; families with zero
    conversions are flagged as empty classes."""
    by_family: dict[str, dict] = {}
    parent_families = {b.id: b.family for b in base}
    for b in base:
        fam = by_family.setdefault(b.family, {"total": 0, "converted": 0})
        fam["total"] += 1
    for t in transformed:
        fam_name = parent_families.get(t.parent_id or "", t.family)
        fam = by_family.setdefault(fam_name, {"total": 0, "converted": 0})
        fam["converted"] += 1
    per_family = {}
    empty = []
    tot = conv = 0
    for name in sorted(by_family):
        d = by_family[name]
        per_family[name] = {"total": d["total"], "converted": d["converted"],
                            "percentage": rate_percent(d["converted"], d["total"])}
        tot += d["total"]
        conv += d["converted"]
        if d["converted"] == 0:
            empty.append(name)
    overall = {"total": tot, "converted": conv, "percentage": rate_percent(conv, tot)}
    return ConversionReport(per_family=per_family, overall=overall, empty_classes=empty)


def transform_corpus(corpus: list[Binary], mode: str, seed: int = 0,
                     table: SubstitutionTable | None = None,
                     morph_passes: int = 1,
                     packer_cmd: str | None = None) -> tuple[list[Binary], ConversionReport]:
    """Apply pack or morph to every sample, skipping the non-applicable."""
    out = []
    for b in corpus:
        if mode == "pack":
            res = pack_with_command(b, packer_cmd) if packer_cmd else pack(b)
        elif mode == "morph":
            res = morph(b, table, morph_passes, seed)
        else:
            raise InvalidSpec(f"unknown transform mode {mode!r}")
        if res.applicable:
            out.append(res.binary)
    return out, conversion_report(corpus, out)
