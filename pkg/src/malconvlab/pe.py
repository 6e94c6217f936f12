"""Minimal PE (Portable Executable) reader.

Parses just enough of the format to locate the section table and compute
slack regions: file ranges inside a section's raw allocation but past its
virtual size, which loaders never map and which can therefore be rewritten
without changing program behavior.

Only the fields this package needs are decoded. Offsets follow the on-disk
layout: the DOS header stores the PE signature offset as a u32 at 0x3C; the
COFF header follows the 4-byte signature; each section table entry is 40
bytes with VirtualSize at +8, VirtualAddress at +12, SizeOfRawData at +16
and PointerToRawData at +20.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    NotAPEError,
    SectionBoundsError,
    SectionOverlapError,
    TruncatedFileError,
)
from .validation import as_byte_string

DOS_MAGIC = b"MZ"
PE_SIGNATURE = b"PE\0\0"
_PE_OFFSET_FIELD = 0x3C
_COFF_SIZE = 20
_SECTION_ENTRY_SIZE = 40


@dataclass(frozen=True)
class SectionHeader:
    name: str
    virtual_size: int
    virtual_address: int
    raw_size: int
    raw_address: int

    @property
    def raw_end(self) -> int:
        return self.raw_address + self.raw_size


@dataclass(frozen=True)
class SlackRegion:
    """File range [start, start + length) that is stored but never mapped."""

    section: str
    start: int
    length: int

    @property
    def end(self) -> int:
        return self.start + self.length

    def indices(self) -> range:
        return range(self.start, self.end)


@dataclass(frozen=True)
class PEFile:
    data: bytes
    e_lfanew: int
    optional_header_size: int
    sections: tuple[SectionHeader, ...]

    @property
    def num_sections(self) -> int:
        return len(self.sections)

    @property
    def total_size(self) -> int:
        return len(self.data)

    @property
    def section_table_offset(self) -> int:
        return self.e_lfanew + 4 + _COFF_SIZE + self.optional_header_size

    @property
    def header_end(self) -> int:
        """First byte past the section table."""
        return self.section_table_offset + len(self.sections) * _SECTION_ENTRY_SIZE

    def section_table_bytes(self) -> bytes:
        return self.data[self.section_table_offset : self.header_end]


def _read(data: bytes, offset: int, size: int, what: str) -> bytes:
    if offset < 0 or offset + size > len(data):
        raise TruncatedFileError(f"file ends inside {what}", offset=offset)
    return data[offset : offset + size]


def parse_pe(data) -> PEFile:
    """Parse headers and the section table; validate raw layout.

    Raises NotAPEError on bad magic values, TruncatedFileError when a header
    or a section's raw data runs past end-of-file, SectionOverlapError when
    raw ranges are unsorted or overlap, and SectionBoundsError when a
    section's raw data would start inside the headers.
    """
    data = as_byte_string(data)
    if _read(data, 0, 2, "DOS magic") != DOS_MAGIC:
        raise NotAPEError("missing MZ signature", offset=0)
    (e_lfanew,) = struct.unpack("<I", _read(data, _PE_OFFSET_FIELD, 4, "PE offset field"))
    if _read(data, e_lfanew, 4, "PE signature") != PE_SIGNATURE:
        raise NotAPEError("missing PE signature", offset=e_lfanew)

    coff = _read(data, e_lfanew + 4, _COFF_SIZE, "COFF header")
    num_sections = struct.unpack_from("<H", coff, 2)[0]
    optional_size = struct.unpack_from("<H", coff, 16)[0]
    table_offset = e_lfanew + 4 + _COFF_SIZE + optional_size
    header_end = table_offset + num_sections * _SECTION_ENTRY_SIZE
    _read(data, table_offset, num_sections * _SECTION_ENTRY_SIZE, "section table")

    sections = []
    for i in range(num_sections):
        entry = data[table_offset + i * _SECTION_ENTRY_SIZE :][:_SECTION_ENTRY_SIZE]
        name = entry[:8].rstrip(b"\0").decode("latin-1")
        virtual_size, virtual_address, raw_size, raw_address = struct.unpack_from(
            "<IIII", entry, 8
        )
        sections.append(
            SectionHeader(name, virtual_size, virtual_address, raw_size, raw_address)
        )

    prev_end = None
    prev_name = None
    for s in sections:
        if s.raw_size == 0:
            continue
        if s.raw_address < header_end:
            raise SectionBoundsError(
                f"section {s.name!r} raw data starts inside the headers",
                offset=s.raw_address,
            )
        if s.raw_end > len(data):
            raise TruncatedFileError(
                f"section {s.name!r} raw data runs past end of file",
                offset=s.raw_address,
            )
        if prev_end is not None and s.raw_address < prev_end:
            raise SectionOverlapError(
                f"section {s.name!r} raw data overlaps section {prev_name!r}",
                offset=s.raw_address,
            )
        prev_end, prev_name = s.raw_end, s.name

    return PEFile(
        data=data,
        e_lfanew=e_lfanew,
        optional_header_size=optional_size,
        sections=tuple(sections),
    )


def slack_regions(pe: PEFile) -> list[SlackRegion]:
    """Unmapped tails of each section's raw allocation, in file order.

    A section whose raw allocation is larger than its virtual size carries
    ``raw_size - virtual_size`` dead bytes starting at
    ``raw_address + virtual_size``. Sections with no such gap contribute
    nothing.
    """
    regions = []
    for s in pe.sections:
        if s.raw_size > s.virtual_size:
            regions.append(
                SlackRegion(
                    section=s.name,
                    start=s.raw_address + s.virtual_size,
                    length=s.raw_size - s.virtual_size,
                )
            )
    return regions


def slack_indices(pe: PEFile, limit: int | None = None) -> np.ndarray:
    """Flat array of all slack byte offsets, optionally truncated to < limit."""
    idx = [np.arange(r.start, r.end, dtype=np.int64) for r in slack_regions(pe)]
    flat = np.concatenate(idx) if idx else np.empty(0, dtype=np.int64)
    if limit is not None:
        flat = flat[flat < limit]
    return flat
