"""Rootkit detectors.

Static checks compare a baseline acquisition with the current one; the
cross-view check reconciles the task list against the task_struct slab.
Every detector reads through the PhysicalMemory protocol, so images and
halted targets are interchangeable. Memory a detector needs but cannot
read surfaces as AcquisitionGapError.
"""

import logging
import struct
from collections.abc import Callable, Iterator
from dataclasses import dataclass
from enum import StrEnum

from .arm_codec import (
    TABLE_REGISTER,
    LdrLiteral,
    decode,
    disassemble_line,
    is_pc_address_load,
    is_pc_relative,
    literal_target,
)
from .errors import (
    AcquisitionGapError,
    ConfigurationError,
    CorruptListError,
    DataIntegrityError,
    NotLinearMappedError,
    UnmappedAddressError,
)
from .mem_image import PhysAddr, PhysicalMemory, VirtAddr, virt_to_phys_linear
from .profile import KernelProfile, syscall_name

log = logging.getLogger(__name__)

EVT_VECTOR_COUNT = 8
EVT_SWI_SLOT = 0x8
SWI_POINTER_OFFSET = 0x420
SWI_SPARE_OFFSET = 0x424
_ROW = 16


def _read(mem: PhysicalMemory, at: PhysAddr, length: int, region: str) -> bytes:
    try:
        return mem.read(at, length)
    except UnmappedAddressError as e:
        raise AcquisitionGapError(region, e.address) from e


def _linear(profile: KernelProfile, virt: VirtAddr, region: str) -> PhysAddr:
    try:
        return virt_to_phys_linear(profile.translation, virt)
    except NotLinearMappedError as e:
        raise AcquisitionGapError(region, virt) from e


def evidence_row(region: bytes, region_phys: PhysAddr, offset: int) -> str:
    """Hex of the 16-byte row holding `offset`, clipped to the bytes read."""
    row = offset - offset % _ROW
    data = region[row : row + _ROW]
    return f"0x{region_phys + row:08x}: " + " ".join(f"{b:02x}" for b in data)


def _words(data: bytes) -> tuple[int, ...]:
    return struct.unpack(f"<{len(data) // 4}I", data[: len(data) - len(data) % 4])


# syscall table


@dataclass(frozen=True)
class SyscallHookFinding:
    index: int
    name: str
    original: int
    current: int
    evidence: str = ""


def extract_syscall_table(mem: PhysicalMemory, profile: KernelProfile) -> list[int]:
    """The handler address of every syscall, in table order."""
    raw = _read_table(mem, profile)
    return list(_words(raw))


def _read_table(mem: PhysicalMemory, profile: KernelProfile) -> bytes:
    phys = _linear(profile, profile.sys_call_table_virt, "sys_call_table")
    return _read(mem, phys, 4 * profile.syscall_count, "sys_call_table")


def check_syscall_table(
    baseline: PhysicalMemory,
    current: PhysicalMemory,
    profile: KernelProfile,
    baseline_profile: KernelProfile | None = None,
) -> list[SyscallHookFinding]:
    """Entries whose handler differs between baseline and current.

    `baseline_profile` describes the baseline when it comes from a different
    build; both tables must still have the same number of entries.
    """
    before_profile = baseline_profile or profile
    before = extract_syscall_table(baseline, before_profile)
    raw = _read_table(current, profile)
    after = _words(raw)
    if len(before) != len(after):
        raise ConfigurationError(
            f"baseline table has {len(before)} entries, current has {len(after)}"
        )
    table_phys = virt_to_phys_linear(profile.translation, profile.sys_call_table_virt)
    findings = []
    for index, (old, new) in enumerate(zip(before, after)):
        if old != new:
            findings.append(
                SyscallHookFinding(
                    index=index,
                    name=syscall_name(profile, index),
                    original=old,
                    current=new,
                    evidence=evidence_row(raw, table_phys, 4 * index),
                )
            )
    log.info("syscall table: %d of %d entries changed", len(findings), len(after))
    return findings


# exception vector table


@dataclass(frozen=True)
class EvtFinding:
    slot_offset: int
    original_word: int
    current_word: int
    original_target: int | None
    current_target: int | None
    original_text: str = ""
    current_text: str = ""
    evidence: str = ""


def _describe(word: int, fetch: VirtAddr) -> tuple[int | None, str]:
    instr = decode(word, fetch)
    target = literal_target(instr) if is_pc_relative(instr) else None
    return target, disassemble_line(instr)


def check_evt(
    baseline: PhysicalMemory, current: PhysicalMemory, profile: KernelProfile
) -> list[EvtFinding]:
    """Vector slots 0x00-0x1C whose instruction word changed."""
    tc = profile.translation
    length = 4 * EVT_VECTOR_COUNT
    before = _read(baseline, tc.evt_phys, length, "evt")
    after = _read(current, tc.evt_phys, length, "evt")
    findings = []
    for slot, (old, new) in enumerate(zip(_words(before), _words(after))):
        if old == new:
            continue
        offset = 4 * slot
        fetch = tc.evt_virt + offset
        old_target, old_text = _describe(old, fetch)
        new_target, new_text = _describe(new, fetch)
        findings.append(
            EvtFinding(
                slot_offset=offset,
                original_word=old,
                current_word=new,
                original_target=old_target,
                current_target=new_target,
                original_text=old_text,
                current_text=new_text,
                evidence=evidence_row(after, tc.evt_phys, offset),
            )
        )
    log.info("exception vector table: %d slot(s) changed", len(findings))
    return findings


# SWI handler


class SwiFindingKind(StrEnum):
    POINTER_CHANGED = "pointer_changed"
    CODE_CHANGED = "code_changed"


@dataclass(frozen=True)
class SwiFinding:
    kind: SwiFindingKind
    offset: int
    original_word: int
    current_word: int
    annotation: str = ""
    table_load_redirect: bool = False
    evidence: str = ""


def check_swi_pointer(
    baseline: PhysicalMemory, current: PhysicalMemory, profile: KernelProfile
) -> list[SwiFinding]:
    """Changes to the SWI handler pointer at EVT+0x420 and the spare literal at +0x424."""
    tc = profile.translation
    base = tc.evt_phys + SWI_POINTER_OFFSET
    length = SWI_SPARE_OFFSET + 4 - SWI_POINTER_OFFSET
    before = _words(_read(baseline, base, length, "evt literal pool"))
    raw_after = _read(current, base, length, "evt literal pool")
    after = _words(raw_after)

    swi_load_target = None
    try:
        slot = _read(current, tc.evt_phys + EVT_SWI_SLOT, 4, "evt")
        instr = decode(_words(slot)[0], tc.evt_virt + EVT_SWI_SLOT)
        if isinstance(instr.kind, LdrLiteral):
            swi_load_target = literal_target(instr) - tc.evt_virt
    except AcquisitionGapError:
        pass

    findings = []
    for i, (old, new) in enumerate(zip(before, after)):
        if old == new:
            continue
        offset = SWI_POINTER_OFFSET + 4 * i
        if offset == SWI_POINTER_OFFSET:
            note = f"SWI handler pointer moved from 0x{old:08x} to 0x{new:08x}"
        else:
            note = f"spare literal next to the SWI pointer now holds 0x{new:08x}"
        if swi_load_target == offset:
            note += "; the SWI vector loads its handler from here"
        findings.append(
            SwiFinding(
                kind=SwiFindingKind.POINTER_CHANGED,
                offset=offset,
                original_word=old,
                current_word=new,
                annotation=note,
                evidence=evidence_row(raw_after, base, 4 * i),
            )
        )
    log.info("SWI handler pointer: %d word(s) changed", len(findings))
    return findings


def check_swi_code(
    baseline: PhysicalMemory, current: PhysicalMemory, profile: KernelProfile
) -> list[SwiFinding]:
    """Word-level diff of the vector_swi window, flagging a redirected table load."""
    length = profile.swi_handler_len
    phys = _linear(profile, profile.vector_swi_virt, "vector_swi")
    raw_before = _read(baseline, phys, length, "vector_swi")
    raw_after = _read(current, phys, length, "vector_swi")
    after = _words(raw_after)
    findings = []
    for i, (old, new) in enumerate(zip(_words(raw_before), after)):
        if old == new:
            continue
        offset = 4 * i
        fetch = profile.vector_swi_virt + offset
        was, now = decode(old, fetch), decode(new, fetch)
        annotation = f"{disassemble_line(was)} -> {disassemble_line(now)}"
        redirect = (
            is_pc_address_load(was, TABLE_REGISTER)
            and isinstance(now.kind, LdrLiteral)
            and now.kind.rd == TABLE_REGISTER
        )
        if redirect:
            literal = literal_target(now)
            annotation += (
                f"; syscall table base now loaded from 0x{literal:08x}"
                f" (was 0x{literal_target(was):08x})"
            )
            slot = literal - profile.vector_swi_virt
            if 0 <= slot <= length - 4:
                annotation += f", which holds 0x{after[slot // 4]:08x}"
        findings.append(
            SwiFinding(
                kind=SwiFindingKind.CODE_CHANGED,
                offset=offset,
                original_word=old,
                current_word=new,
                annotation=annotation,
                table_load_redirect=redirect,
                evidence=evidence_row(raw_after, phys, offset),
            )
        )
    log.info("vector_swi code: %d word(s) changed", len(findings))
    return findings


# tasks


class Provenance(StrEnum):
    LIST_WALK = "list_walk"
    CACHE_SCAN = "cache_scan"


@dataclass(frozen=True)
class TaskRecord:
    addr: PhysAddr
    pid: int
    comm: str
    state: int
    flags: int
    provenance: Provenance
    slot: int | None = None


def _task_record(
    raw: bytes,
    addr: PhysAddr,
    profile: KernelProfile,
    provenance: Provenance,
    slot: int | None = None,
) -> TaskRecord:
    t = profile.task
    comm = raw[t.comm : t.comm + t.comm_len].split(b"\0", 1)[0]
    return TaskRecord(
        addr=addr,
        pid=int.from_bytes(raw[t.pid : t.pid + 4], "little", signed=True),
        comm=comm.decode("utf-8", "replace"),
        state=int.from_bytes(raw[t.state : t.state + t.state_size], "little", signed=True),
        flags=int.from_bytes(raw[t.flags : t.flags + 4], "little"),
        provenance=provenance,
        slot=slot,
    )


def walk_task_list(mem: PhysicalMemory, profile: KernelProfile) -> list[TaskRecord]:
    """Follow tasks.next from init_task until the list closes.

    Raises
    ------
    AcquisitionGapError
        When init_task itself cannot be read
    CorruptListError
        When the list leaves acquired memory or cycles without returning to
        init_task; ``partial`` holds the records read so far
    """
    t = profile.task
    size = profile.task_struct_size
    start = profile.init_task_virt
    records: list[TaskRecord] = []
    visited: set[VirtAddr] = set()
    current = start
    while True:
        try:
            phys = virt_to_phys_linear(profile.translation, current)
            raw = mem.read(phys, size)
        except (UnmappedAddressError, NotLinearMappedError) as e:
            if not records:
                raise AcquisitionGapError("init_task", current) from e
            raise CorruptListError(
                f"task list leaves acquired memory at 0x{current:08x}", records
            ) from e
        records.append(_task_record(raw, phys, profile, Provenance.LIST_WALK))
        visited.add(current)
        next_node = int.from_bytes(raw[t.tasks_next : t.tasks_next + 4], "little")
        current = (next_node - t.tasks_next) & 0xFFFFFFFF
        if current == start:
            log.info("task list: %d task(s)", len(records))
            return records
        if current in visited:
            raise CorruptListError(
                f"task list cycles at 0x{current:08x} without returning to init_task", records
            )


def _find_cache_id(mem: PhysicalMemory, profile: KernelProfile) -> int | None:
    slab = profile.slab
    raw = _read(
        mem, slab.cache_table_phys, slab.cache_count * slab.cache_name_len, "kmem_cache_names"
    )
    for index in range(slab.cache_count):
        entry = raw[index * slab.cache_name_len : (index + 1) * slab.cache_name_len]
        if entry.split(b"\0", 1)[0].decode("utf-8", "replace") == slab.cache_name:
            return index
    return None


def _slab_objects(
    mem: PhysicalMemory,
    profile: KernelProfile,
    on_gap: Callable[[PhysAddr], None] | None,
) -> Iterator[tuple[PhysAddr, int, int]]:
    """Yield (first object phys, object count, bitmap) per task_struct slab page."""
    slab = profile.slab
    cache_id = _find_cache_id(mem, profile)
    if cache_id is None:
        log.warning("no %r cache in the cache table", slab.cache_name)
        return
    ds = slab.page_desc_size
    count = slab.pfn_end - slab.pfn_start
    try:
        descs: bytes | None = mem.read(slab.mem_map_phys, count * ds)
    except UnmappedAddressError:
        descs = None
    page_size = profile.translation.page_size

    def field(desc: bytes, offset: int) -> int:
        return int.from_bytes(desc[offset : offset + 4], "little")

    for i in range(count):
        at = slab.mem_map_phys + i * ds
        if descs is not None:
            desc = descs[i * ds : (i + 1) * ds]
        else:
            try:
                desc = mem.read(at, ds)
            except UnmappedAddressError:
                if on_gap:
                    on_gap(at)
                continue
        if not field(desc, slab.desc_flags) & slab.slab_flag:
            continue
        if field(desc, slab.desc_cache_id) != cache_id:
            continue
        objects = field(desc, slab.desc_objects)
        first = field(desc, slab.desc_first_object)
        if objects > 32 or first + objects * profile.task_struct_size > page_size:
            log.warning("implausible slab descriptor for pfn 0x%x; skipped", slab.pfn_start + i)
            continue
        yield (slab.pfn_start + i) * page_size + first, objects, field(desc, slab.desc_bitmap)


def slab_pages(mem: PhysicalMemory, profile: KernelProfile) -> list[tuple[PhysAddr, int]]:
    """Physical (start, length) of every task_struct slab page's object area."""
    try:
        return [
            (start, objects * profile.task_struct_size)
            for start, objects, _ in _slab_objects(mem, profile, None)
            if objects
        ]
    except AcquisitionGapError as e:
        log.warning("cannot locate slab pages: %s", e)
        return []


def scan_cache_tasks(
    mem: PhysicalMemory,
    profile: KernelProfile,
    on_gap: Callable[[PhysAddr], None] | None = None,
) -> list[TaskRecord]:
    """Allocated task_struct objects found by walking mem_map's slab pages.

    Unreadable descriptors or slab pages are reported through `on_gap`
    and skipped.
    """
    size = profile.task_struct_size
    records: list[TaskRecord] = []
    slot = 0
    for start, objects, bitmap in _slab_objects(mem, profile, on_gap):
        try:
            page = mem.read(start, objects * size)
        except UnmappedAddressError:
            if on_gap:
                on_gap(start)
            log.debug("slab page at 0x%x not acquired", start)
            slot += objects
            continue
        for j in range(objects):
            if bitmap >> j & 1:
                raw = page[j * size : (j + 1) * size]
                records.append(
                    _task_record(raw, start + j * size, profile, Provenance.CACHE_SCAN, slot)
                )
            slot += 1
    log.info("task_struct cache: %d allocated object(s)", len(records))
    return records


def transient_reasons(task: TaskRecord, profile: KernelProfile) -> list[str]:
    f = profile.filter
    reasons = []
    if task.pid == 0 and task.comm != f.swapper_name:
        reasons.append("pid 0")
    if task.state < 0:
        reasons.append("negative state")
    if task.flags & f.shutdown_mask == f.shutdown_value:
        reasons.append("shutdown flags")
    return reasons


def is_transient(task: TaskRecord, profile: KernelProfile) -> bool:
    """True for a task caught mid-creation or mid-exit."""
    return bool(transient_reasons(task, profile))


@dataclass(frozen=True)
class CrossViewReport:
    hidden: tuple[TaskRecord, ...]
    missing_from_cache_count: int
    filtered_transient: tuple[TaskRecord, ...] = ()
    filter_reasons: tuple[str, ...] = ()

    @property
    def cache_only_count(self) -> int:
        return len(self.hidden)


def _check_unique(tasks: list[TaskRecord], source: str) -> None:
    seen: set[PhysAddr] = set()
    for task in tasks:
        if task.addr in seen:
            raise DataIntegrityError(f"{source} lists task_struct 0x{task.addr:x} twice")
        seen.add(task.addr)


def cross_view(
    list_tasks: list[TaskRecord], cache_tasks: list[TaskRecord], profile: KernelProfile
) -> CrossViewReport:
    """Reconcile the two views by task_struct address."""
    _check_unique(list_tasks, "the task list")
    _check_unique(cache_tasks, "the cache scan")
    listed = {t.addr for t in list_tasks}
    cached = {t.addr for t in cache_tasks}
    hidden: list[TaskRecord] = []
    filtered: list[TaskRecord] = []
    reasons: list[str] = []
    for task in cache_tasks:
        if task.addr in listed:
            continue
        why = transient_reasons(task, profile)
        if why:
            filtered.append(task)
            reasons.append(", ".join(why))
            log.debug("filtered transient task pid=%d comm=%s (%s)", task.pid, task.comm, why)
        else:
            hidden.append(task)
    missing = sum(1 for t in list_tasks if t.addr not in cached)
    return CrossViewReport(tuple(hidden), missing, tuple(filtered), tuple(reasons))
