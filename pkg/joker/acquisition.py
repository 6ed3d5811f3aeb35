"""Target sessions and region acquisition.

A session reads physical memory only while the target is halted. The
remote session speaks the probe wire format over any transport; the
image session replays a stored image through the same surface so every
detector runs unchanged against either.
"""

import logging
import re
import socket
from dataclasses import dataclass
from enum import StrEnum
from typing import Protocol

from .detectors import slab_pages, walk_task_list
from .errors import (
    CorruptListError,
    ProtocolError,
    RegionRequestError,
    TargetConnectionError,
    TargetNotHaltedError,
    UnmappedAddressError,
)
from .mem_image import MemoryImage, PhysAddr, Segment, virt_to_phys_linear
from .profile import KernelProfile
from .protocol import (
    Opcode,
    Status,
    WireState,
    encode_request,
    read_response,
    unpack_address,
    unpack_status,
)

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 4096
EVT_ACQUIRE_LEN = 0x428  # vectors, stubs and the SWI literal pool through +0x424


class TargetState(StrEnum):
    RUNNING = "running"
    HALTED = "halted"


class Transport(Protocol):
    def send(self, data: bytes) -> None: ...

    def recv_exact(self, n: int) -> bytes: ...

    def close(self) -> None: ...


class TargetSession(Protocol):
    state: TargetState

    def halt(self) -> None: ...

    def resume(self) -> None: ...

    def read_memory(self, base: PhysAddr, length: int) -> bytes: ...

    def read(self, at: PhysAddr, length: int) -> bytes: ...


class SocketTransport:
    """Blocking TCP transport to a probe endpoint ``host:port``."""

    def __init__(self, endpoint: str, timeout: float = 5.0):
        host, port = parse_endpoint(endpoint)
        try:
            self._sock = socket.create_connection((host, port), timeout=timeout)
        except OSError as e:
            raise TargetConnectionError(f"cannot connect to {endpoint}: {e}") from e
        self.endpoint = endpoint

    def send(self, data: bytes) -> None:
        try:
            self._sock.sendall(data)
        except OSError as e:
            raise TargetConnectionError(f"send to {self.endpoint} failed: {e}") from e

    def recv_exact(self, n: int) -> bytes:
        chunks = bytearray()
        while len(chunks) < n:
            try:
                chunk = self._sock.recv(n - len(chunks))
            except OSError as e:
                raise TargetConnectionError(f"receive from {self.endpoint} failed: {e}") from e
            if not chunk:
                raise TargetConnectionError(f"{self.endpoint} closed the connection")
            chunks += chunk
        return bytes(chunks)

    def close(self) -> None:
        self._sock.close()


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise TargetConnectionError(f"endpoint {endpoint!r} is not host:port")
    return host or "127.0.0.1", int(port)


class RemoteTarget:
    """Session over the probe wire format."""

    def __init__(self, transport: Transport):
        self._transport = transport
        self.state = TargetState.RUNNING
        self.max_read_chunk = DEFAULT_CHUNK
        try:
            self.status()
        except Exception:
            transport.close()
            raise

    @classmethod
    def connect(cls, endpoint: str, timeout: float = 5.0) -> "RemoteTarget":
        return cls(SocketTransport(endpoint, timeout))

    def __enter__(self) -> "RemoteTarget":
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        self._transport.close()

    def _call(self, opcode: Opcode, base: int = 0, length: int = 0) -> tuple[Status, bytes]:
        self._transport.send(encode_request(opcode, base, length))
        return read_response(self._transport.recv_exact)

    def _expect_ok(self, opcode: Opcode) -> bytes:
        status, payload = self._call(opcode)
        if status != Status.OK:
            raise ProtocolError(
                f"{opcode.name} failed with {status.name}: {payload.decode('utf-8', 'replace')}"
            )
        return payload

    def status(self) -> TargetState:
        state, chunk = unpack_status(self._expect_ok(Opcode.STATUS))
        self.state = TargetState.HALTED if state == WireState.HALTED else TargetState.RUNNING
        self.max_read_chunk = min(chunk, DEFAULT_CHUNK) if chunk else DEFAULT_CHUNK
        return self.state

    def halt(self) -> None:
        self._expect_ok(Opcode.HALT)
        self.state = TargetState.HALTED
        log.info("target halted")

    def resume(self) -> None:
        if self.state == TargetState.RUNNING:
            log.warning("resume requested while the target is running; ignoring")
            return
        self._expect_ok(Opcode.RESUME)
        self.state = TargetState.RUNNING
        log.info("target resumed")

    def read_memory(self, base: PhysAddr, length: int) -> bytes:
        if self.state != TargetState.HALTED:
            raise TargetNotHaltedError("memory reads need a halted target; halt it first")
        out = bytearray()
        cursor = base
        while len(out) < length:
            take = min(self.max_read_chunk, length - len(out))
            out += self._read_chunk(cursor, take)
            cursor += take
        return bytes(out)

    read = read_memory

    def _read_chunk(self, base: PhysAddr, length: int) -> bytes:
        status, payload = self._call(Opcode.READ, base, length)
        match status:
            case Status.OK:
                if len(payload) != length:
                    raise ProtocolError(f"asked for {length} bytes, got {len(payload)}")
                return payload
            case Status.NOT_HALTED:
                self.state = TargetState.RUNNING
                raise TargetNotHaltedError("target reports it is running")
            case Status.UNMAPPED:
                missing = unpack_address(payload)
                raise UnmappedAddressError(base if missing is None else missing)
        detail = payload.decode("utf-8", "replace")
        raise ProtocolError(f"READ 0x{base:x}+{length} failed: {detail}")


class ImageTarget:
    """Session backed by a stored image; halting just unlocks reads."""

    def __init__(self, image: MemoryImage, label: str = "image"):
        self.image = image
        self.label = label
        self.state = TargetState.RUNNING

    def halt(self) -> None:
        self.state = TargetState.HALTED

    def resume(self) -> None:
        if self.state == TargetState.RUNNING:
            log.warning("resume requested while %s is running; ignoring", self.label)
        self.state = TargetState.RUNNING

    def read_memory(self, base: PhysAddr, length: int) -> bytes:
        if self.state != TargetState.HALTED:
            raise TargetNotHaltedError("memory reads need a halted target; halt it first")
        return self.image.read(base, length)

    read = read_memory


@dataclass(frozen=True)
class Region:
    label: str
    base: PhysAddr
    length: int

    @property
    def end(self) -> PhysAddr:
        return self.base + self.length


@dataclass(frozen=True)
class RegionRequest:
    """Named physical ranges to acquire; validated before any read."""

    regions: tuple[Region, ...]

    def __post_init__(self):
        labels = [r.label for r in self.regions]
        if len(set(labels)) != len(labels):
            raise RegionRequestError("region labels must be unique")
        for region in self.regions:
            if region.length <= 0:
                raise RegionRequestError(f"region {region.label!r} has no length")
        ordered = sorted(self.regions, key=lambda r: r.base)
        for prev, cur in zip(ordered, ordered[1:]):
            if cur.base < prev.end:
                raise RegionRequestError(f"regions {prev.label!r} and {cur.label!r} overlap")


_REGION_LINE = re.compile(r"^(\S+)\s+(0x[0-9a-fA-F]+)\s+(0x[0-9a-fA-F]+|\d+)$")


def parse_regions(text: str) -> RegionRequest:
    """Parse ``label base length`` lines (``#`` comments allowed)."""
    regions = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        match = _REGION_LINE.match(line)
        if not match:
            raise RegionRequestError(f"line {lineno}: expected 'label 0xBASE LENGTH'")
        regions.append(Region(match.group(1), int(match.group(2), 16), int(match.group(3), 0)))
    return RegionRequest(tuple(regions))


def acquire_regions(session: TargetSession, request: RegionRequest) -> MemoryImage:
    """Read each region into a labelled segment of a new image."""
    if session.state != TargetState.HALTED:
        raise TargetNotHaltedError("acquisition needs a halted target")
    segments = []
    for region in request.regions:
        log.info("acquiring %s: 0x%x+0x%x", region.label, region.base, region.length)
        data = session.read_memory(region.base, region.length)
        segments.append(Segment(region.base, data, region.label))
    return MemoryImage(tuple(segments))


def plan_detection_regions(profile: KernelProfile) -> RegionRequest:
    """Fixed regions every detector needs, before slab pages are known."""
    tc = profile.translation
    slab = profile.slab
    regions = [
        Region("evt", tc.evt_phys, EVT_ACQUIRE_LEN),
        Region(
            "vector_swi",
            virt_to_phys_linear(tc, profile.vector_swi_virt),
            profile.swi_handler_len,
        ),
        Region(
            "init_task",
            virt_to_phys_linear(tc, profile.init_task_virt),
            profile.task_struct_size,
        ),
        Region("mem_map", slab.mem_map_phys, (slab.pfn_end - slab.pfn_start) * slab.page_desc_size),
        Region("kmem_cache_names", slab.cache_table_phys, slab.cache_count * slab.cache_name_len),
    ]
    if profile.syscall_count:
        regions.append(
            Region(
                "sys_call_table",
                virt_to_phys_linear(tc, profile.sys_call_table_virt),
                4 * profile.syscall_count,
            )
        )
    return RegionRequest(tuple(regions))


def _coalesce(regions: list[Region]) -> list[Region]:
    merged: list[Region] = []
    for region in sorted(regions, key=lambda r: r.base):
        if merged and region.base < merged[-1].end:
            last = merged[-1]
            length = max(last.end, region.end) - last.base
            merged[-1] = Region(f"{last.label}+{region.label}", last.base, length)
        else:
            merged.append(region)
    return merged


def acquire_for_detection(session: TargetSession, profile: KernelProfile) -> MemoryImage:
    """Acquire everything the detection flow reads, in two passes.

    The fixed regions come first; the task list is then walked on the halted
    target and the task_struct slab pages named by mem_map are added.
    """
    if session.state != TargetState.HALTED:
        raise TargetNotHaltedError("acquisition needs a halted target")
    fixed = list(plan_detection_regions(profile).regions)
    first_pass = MemoryImage(tuple(_read_tolerant(session, fixed)))

    extra: list[Region] = []
    size = profile.task_struct_size
    try:
        tasks = walk_task_list(session, profile)
    except CorruptListError as e:
        log.warning("task list walk stopped early during acquisition: %s", e)
        tasks = e.partial
    for task in tasks:
        extra.append(Region(f"task_0x{task.addr:x}", task.addr, size))
    for page_phys, length in slab_pages(first_pass, profile):
        extra.append(Region(f"slab_0x{page_phys:x}", page_phys, length))

    return MemoryImage(tuple(_read_tolerant(session, _coalesce(fixed + extra))))


def _read_tolerant(session: TargetSession, regions: list[Region]) -> list[Segment]:
    segments = []
    for region in regions:
        try:
            data = session.read_memory(region.base, region.length)
        except UnmappedAddressError as e:
            log.warning("skipping %s: 0x%x is unmapped on the target", region.label, e.address)
            continue
        segments.append(Segment(region.base, data, region.label))
    return segments
