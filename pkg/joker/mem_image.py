"""Physical memory images, the JKMI container and address translation.

A MemoryImage is the unit of acquisition and analysis: an immutable, sorted
set of non-overlapping physical segments. Unmapped reads are hard errors,
never zero-filled.
"""

import bisect
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

from .errors import (
    ConfigurationError,
    ImageFormatError,
    ImageValidationError,
    NotLinearMappedError,
    TranslationFaultError,
    UnmappedAddressError,
)

PhysAddr = int
VirtAddr = int

JKMI_MAGIC = b"JKMI"
_HEADER = struct.Struct("<4sHH")
_SEGMENT = struct.Struct("<QQ")
_LABEL_LEN = struct.Struct("<H")
_WORD = struct.Struct("<I")

# ARMv7-A short-descriptor format
L1_FAULT = 0b00
L1_COARSE = 0b01
L1_SECTION = 0b10
L1_SUPERSECTION_BIT = 1 << 18
L2_LARGE = 0b01
SECTION_SIZE = 1 << 20
L1_TABLE_SIZE = 0x4000
L2_TABLE_SIZE = 0x400


class PhysicalMemory(Protocol):
    """Anything physical memory can be read from: an image or a halted target."""

    def read(self, at: PhysAddr, length: int) -> bytes: ...


@dataclass(frozen=True)
class Segment:
    base: PhysAddr
    data: bytes
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "data", bytes(self.data))

    @property
    def end(self) -> PhysAddr:
        return self.base + len(self.data)


@dataclass(frozen=True)
class MemoryImage:
    """Immutable collection of physical segments sorted by base."""

    segments: tuple[Segment, ...]
    _bases: list[int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ordered = tuple(sorted(self.segments, key=lambda s: s.base))
        for seg in ordered:
            if not seg.data:
                raise ImageValidationError(f"segment at 0x{seg.base:x} is empty")
            if seg.base < 0 or seg.end > 1 << 64:
                raise ImageValidationError(
                    f"segment at 0x{seg.base:x} exceeds the 64-bit physical space"
                )
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.base < prev.end:
                raise ImageValidationError(
                    f"segments overlap: 0x{prev.base:x}+0x{len(prev.data):x} "
                    f"and 0x{cur.base:x}"
                )
        object.__setattr__(self, "segments", ordered)
        object.__setattr__(self, "_bases", [s.base for s in ordered])

    @property
    def total_size(self) -> int:
        return sum(len(s.data) for s in self.segments)

    def segment_at(self, at: PhysAddr) -> Segment | None:
        idx = bisect.bisect_right(self._bases, at) - 1
        if idx >= 0 and at < self.segments[idx].end:
            return self.segments[idx]
        return None

    def contains(self, at: PhysAddr, length: int) -> bool:
        try:
            self.read(at, length)
        except UnmappedAddressError:
            return False
        return True

    def read(self, at: PhysAddr, length: int) -> bytes:
        """Read `length` bytes at `at`; adjacent segments are stitched."""
        if length < 0:
            raise ValueError("length must be non-negative")
        chunks = []
        cursor = at
        end = at + length
        while cursor < end:
            seg = self.segment_at(cursor)
            if seg is None:
                raise UnmappedAddressError(cursor)
            take = min(end, seg.end) - cursor
            offset = cursor - seg.base
            chunks.append(seg.data[offset : offset + take])
            cursor += take
        return b"".join(chunks)

    def patched(self, at: PhysAddr, data: bytes) -> "MemoryImage":
        """Return a copy with `data` written at `at` (must lie in one segment)."""
        seg = self.segment_at(at)
        if seg is None or at + len(data) > seg.end:
            raise UnmappedAddressError(at if seg is None else seg.end)
        offset = at - seg.base
        new_data = seg.data[:offset] + bytes(data) + seg.data[offset + len(data) :]
        replaced = Segment(seg.base, new_data, seg.label)
        return MemoryImage(tuple(replaced if s is seg else s for s in self.segments))

    def with_segment(
        self, base: PhysAddr, data: bytes, label: str = ""
    ) -> "MemoryImage":
        return MemoryImage(self.segments + (Segment(base, data, label),))


@dataclass(frozen=True)
class TranslationConstants:
    """Linear-map constants plus the EVT's physical and virtual bases."""

    page_offset: VirtAddr
    phys_offset: PhysAddr
    evt_phys: PhysAddr
    page_size: int = 4096
    ttbr_phys: PhysAddr | None = None
    evt_virt: VirtAddr = 0xFFFF0000

    def __post_init__(self):
        if self.page_size <= 0 or self.page_size & (self.page_size - 1):
            raise ConfigurationError(f"page_size {self.page_size} is not a power of two")
        mask = self.page_size - 1
        if self.page_offset & mask or self.phys_offset & mask:
            raise ConfigurationError("page_offset and phys_offset must be page-aligned")
        if self.evt_virt not in (0x00000000, 0xFFFF0000):
            raise ConfigurationError(
                f"evt_virt 0x{self.evt_virt:08x} must be 0x00000000 or 0xffff0000"
            )


def read_bytes(mem: PhysicalMemory, at: PhysAddr, length: int) -> bytes:
    return mem.read(at, length)


def read_word32(mem: PhysicalMemory, at: PhysAddr) -> int:
    """Little-endian 32-bit word at a physical address."""
    return _WORD.unpack(mem.read(at, 4))[0]


def virt_to_phys_linear(tc: TranslationConstants, v: VirtAddr) -> PhysAddr:
    if not 0 <= v <= 0xFFFFFFFF:
        raise ValueError(f"virtual address 0x{v:x} exceeds 32 bits")
    if v < tc.page_offset:
        raise NotLinearMappedError(v, tc.page_offset)
    return tc.phys_offset + (v - tc.page_offset)


def phys_to_virt_linear(tc: TranslationConstants, p: PhysAddr) -> VirtAddr:
    v = tc.page_offset + (p - tc.phys_offset)
    if p < tc.phys_offset or v > 0xFFFFFFFF:
        raise UnmappedAddressError(p, f"0x{p:x} is outside the kernel linear map")
    return v


def walk_page_table(mem: PhysicalMemory, ttbr: PhysAddr, v: VirtAddr) -> PhysAddr:
    """Translate `v` through an ARMv7-A short-descriptor table rooted at `ttbr`.

    Sections (1 MiB) and small pages (4 KiB) are supported; supersections
    and large pages raise TranslationFaultError.
    """
    l1_addr = (ttbr & ~(L1_TABLE_SIZE - 1)) + ((v >> 20) << 2)
    desc = read_word32(mem, l1_addr)
    kind = desc & 0b11

    if kind == L1_SECTION:
        if desc & L1_SUPERSECTION_BIT:
            raise TranslationFaultError(v, desc, 1, "supersection not supported")
        return (desc & 0xFFF00000) | (v & 0x000FFFFF)
    if kind != L1_COARSE:
        reason = "fault" if kind == L1_FAULT else "reserved descriptor"
        raise TranslationFaultError(v, desc, 1, reason)

    l2_addr = (desc & 0xFFFFFC00) + (((v >> 12) & 0xFF) << 2)
    desc2 = read_word32(mem, l2_addr)
    kind2 = desc2 & 0b11
    if kind2 == L1_FAULT:
        raise TranslationFaultError(v, desc2, 2, "fault")
    if kind2 == L2_LARGE:
        raise TranslationFaultError(v, desc2, 2, "large page not supported")
    return (desc2 & 0xFFFFF000) | (v & 0xFFF)


def load_image(data: bytes) -> MemoryImage:
    """Parse a JKMI container (versions 1 and 2)."""
    if len(data) < _HEADER.size:
        raise ImageFormatError("container shorter than its header")
    magic, version, count = _HEADER.unpack_from(data, 0)
    if magic != JKMI_MAGIC:
        raise ImageFormatError(f"bad magic {magic!r}, expected {JKMI_MAGIC!r}")
    if version not in (1, 2):
        raise ImageFormatError(f"unsupported container version {version}")

    offset = _HEADER.size
    segments = []
    for index in range(count):
        if offset + _SEGMENT.size > len(data):
            raise ImageFormatError(f"segment {index} header truncated")
        base, length = _SEGMENT.unpack_from(data, offset)
        offset += _SEGMENT.size
        label = ""
        if version == 2:
            if offset + _LABEL_LEN.size > len(data):
                raise ImageFormatError(f"segment {index} label truncated")
            (label_len,) = _LABEL_LEN.unpack_from(data, offset)
            offset += _LABEL_LEN.size
            try:
                label = data[offset : offset + label_len].decode("utf-8")
            except UnicodeDecodeError:
                raise ImageFormatError(f"segment {index} label is not UTF-8") from None
            offset += label_len
        if offset + length > len(data):
            raise ImageFormatError(f"segment {index} data truncated")
        segments.append(Segment(base, data[offset : offset + length], label))
        offset += length
    if offset != len(data):
        raise ImageFormatError(f"{len(data) - offset} trailing bytes after segments")
    return MemoryImage(tuple(segments))


def store_image(image: MemoryImage) -> bytes:
    labelled = any(s.label for s in image.segments)
    version = 2 if labelled else 1
    out = bytearray(_HEADER.pack(JKMI_MAGIC, version, len(image.segments)))
    for seg in image.segments:
        out += _SEGMENT.pack(seg.base, len(seg.data))
        if labelled:
            encoded = seg.label.encode("utf-8")
            out += _LABEL_LEN.pack(len(encoded)) + encoded
        out += seg.data
    return bytes(out)


def load_flat(blob: bytes, base: PhysAddr) -> MemoryImage:
    return MemoryImage((Segment(base, blob, "flat"),))


def open_image(path: str | Path, base: PhysAddr | None = None) -> MemoryImage:
    """Load an image file: JKMI containers by magic, flat blobs with `base`."""
    data = Path(path).expanduser().read_bytes()
    if data[:4] == JKMI_MAGIC:
        return load_image(data)
    if base is None:
        raise ImageFormatError(
            f"{path} is not a JKMI container; pass --base <hex> to load it as a flat blob"
        )
    return load_flat(data, base)


def save_image(image: MemoryImage, path: str | Path) -> None:
    Path(path).expanduser().write_bytes(store_image(image))
