"""Rootkit sample injectors.

Each injector takes a clean image and returns a new image carrying one
documented hooking or hiding technique. Inputs are never mutated.
"""

import logging
import random
import struct

from .arm_codec import NOP_WORD, TABLE_REGISTER, decode, encode_ldr_pc_literal, is_pc_address_load
from .errors import (
    ImageValidationError,
    InjectionError,
    NotLinearMappedError,
    SyscallIndexError,
    UnmappedAddressError,
)
from .forge import EVT_SWI_SLOT, SWI_POINTER_OFFSET, SWI_SPARE_OFFSET
from .mem_image import MemoryImage, PhysAddr, VirtAddr, read_word32, virt_to_phys_linear
from .profile import KernelProfile

log = logging.getLogger(__name__)

SAMPLE1_HOOKS: tuple[tuple[str, int], ...] = (
    ("read", 0xBF034078),
    ("write", 0xBF034000),
    ("open", 0xBF034028),
    ("close", 0xBF034050),
)
SAMPLE2_HANDLER = 0xBF035000
SAMPLE3_HANDLER = 0xC0300000
SAMPLE4_FAKE_TABLE = 0xC02864C8
SAMPLE5_COMM = "printer"

SAMPLES = ("clean", "1", "2", "3", "4", "5", "race")
TRANSIENT_VARIANTS = ("pid_zero", "negative_state", "shutdown_flags")


def _put_word(image: MemoryImage, at: PhysAddr, value: int) -> MemoryImage:
    return image.patched(at, struct.pack("<I", value & 0xFFFFFFFF))


def _phys(profile: KernelProfile, virt: VirtAddr) -> PhysAddr:
    try:
        return virt_to_phys_linear(profile.translation, virt)
    except NotLinearMappedError as e:
        raise InjectionError(str(e)) from None


def inject_syscall_hook(
    image: MemoryImage, profile: KernelProfile, hooks: list[tuple[int, int]]
) -> MemoryImage:
    """Overwrite sys_call_table entries with (index, new handler) pairs."""
    table = _phys(profile, profile.sys_call_table_virt)
    for index, handler in hooks:
        if not 0 <= index < profile.syscall_count:
            raise SyscallIndexError(f"syscall index {index} outside the table")
        image = _put_word(image, table + 4 * index, handler)
        log.debug("hooked syscall %d -> 0x%08x", index, handler)
    return image


def inject_evt_branch_hook(
    image: MemoryImage, profile: KernelProfile, new_handler: VirtAddr
) -> MemoryImage:
    """Point the SWI vector's literal load at a planted pointer in the spare slot."""
    evt = profile.translation.evt_phys
    image = _put_word(image, evt + SWI_SPARE_OFFSET, new_handler)
    load = encode_ldr_pc_literal(15, SWI_SPARE_OFFSET - (EVT_SWI_SLOT + 8))
    return _put_word(image, evt + EVT_SWI_SLOT, load)


def inject_swi_pointer_hook(
    image: MemoryImage, profile: KernelProfile, new_handler: VirtAddr
) -> MemoryImage:
    """Copy vector_swi to `new_handler` and swap the EVT's SWI pointer to it."""
    length = profile.swi_handler_len
    code = image.read(_phys(profile, profile.vector_swi_virt), length)
    dest = _phys(profile, new_handler)
    try:
        if image.contains(dest, length):
            image = image.patched(dest, code)
        else:
            image = image.with_segment(dest, code, "swi_copy")
    except (ImageValidationError, UnmappedAddressError) as e:
        raise InjectionError(f"cannot place the handler copy at 0x{new_handler:08x}: {e}") from e
    return _put_word(image, profile.translation.evt_phys + SWI_POINTER_OFFSET, new_handler)


def inject_swi_code_hook(
    image: MemoryImage, profile: KernelProfile, fake_table: VirtAddr
) -> MemoryImage:
    """Make vector_swi load its table base from a planted literal.

    The ``add r8, pc, #imm`` is replaced by ``ldr r8, [pc, #off]`` aimed at
    the first NOP after it that is within literal range; that NOP becomes
    the fake table address.
    """
    base_virt = profile.vector_swi_virt
    base = _phys(profile, base_virt)
    raw = image.read(base, profile.swi_handler_len)
    words = struct.unpack(f"<{len(raw) // 4}I", raw)
    load = next(
        (
            i
            for i, w in enumerate(words)
            if is_pc_address_load(decode(w, base_virt + 4 * i), TABLE_REGISTER)
        ),
        None,
    )
    if load is None:
        raise InjectionError("no 'add r8, pc, #imm' in the SWI handler window")
    for i in range(load + 1, len(words)):
        offset = 4 * (i - load) - 8
        if offset >= 4096:
            break
        if words[i] == NOP_WORD and offset >= 0:
            image = _put_word(image, base + 4 * i, fake_table)
            return _put_word(image, base + 4 * load, encode_ldr_pc_literal(TABLE_REGISTER, offset))
    raise InjectionError("no NOP slot within literal range of the table load")


def _task_field(image: MemoryImage, profile: KernelProfile, task: VirtAddr, offset: int) -> int:
    return read_word32(image, _phys(profile, task + offset))


def _list_tasks(image: MemoryImage, profile: KernelProfile) -> list[tuple[VirtAddr, str]]:
    offsets = profile.task
    start = profile.init_task_virt
    seen: list[tuple[VirtAddr, str]] = []
    current = start
    while True:
        raw = image.read(_phys(profile, current + offsets.comm), offsets.comm_len)
        seen.append((current, raw.split(b"\0", 1)[0].decode("utf-8", "replace")))
        next_node = _task_field(image, profile, current, offsets.tasks_next)
        current = (next_node - offsets.tasks_next) & 0xFFFFFFFF
        if current == start:
            return seen
        if any(addr == current for addr, _ in seen):
            raise InjectionError("task list does not cycle back to init_task")


def _unlink(image: MemoryImage, profile: KernelProfile, victim: VirtAddr) -> MemoryImage:
    offsets = profile.task
    next_node = _task_field(image, profile, victim, offsets.tasks_next)
    prev_node = _task_field(image, profile, victim, offsets.tasks_prev)
    prev_task = prev_node - offsets.tasks_next
    next_task = next_node - offsets.tasks_next
    image = _put_word(image, _phys(profile, prev_task + offsets.tasks_next), next_node)
    return _put_word(image, _phys(profile, next_task + offsets.tasks_prev), prev_node)


def _find_task(image: MemoryImage, profile: KernelProfile, comm: str) -> VirtAddr:
    for position, (addr, name) in enumerate(_list_tasks(image, profile)):
        if name == comm:
            if position == 0:
                raise InjectionError("init_task cannot be hidden")
            return addr
    raise InjectionError(f"no task named {comm!r} on the task list")


def hide_task(image: MemoryImage, profile: KernelProfile, comm: str) -> MemoryImage:
    """Unlink the task named `comm` from the list; its slab object stays allocated."""
    return _unlink(image, profile, _find_task(image, profile, comm))


def inject_halt_race(
    image: MemoryImage,
    profile: KernelProfile,
    victim: str,
    seed: int = 0,
    variant: str | None = None,
) -> MemoryImage:
    """Freeze `victim` half-way through exit: unlinked and carrying one transient marker."""
    if variant is None:
        variant = random.Random(seed).choice(TRANSIENT_VARIANTS)
    if variant not in TRANSIENT_VARIANTS:
        raise InjectionError(f"unknown transient variant {variant!r}")
    offsets = profile.task
    addr = _find_task(image, profile, victim)
    image = _unlink(image, profile, addr)
    if variant == "pid_zero":
        return _put_word(image, _phys(profile, addr + offsets.pid), 0)
    if variant == "negative_state":
        return image.patched(
            _phys(profile, addr + offsets.state),
            (-1).to_bytes(offsets.state_size, "little", signed=True),
        )
    flags = _task_field(image, profile, addr, offsets.flags)
    f = profile.filter
    return _put_word(
        image, _phys(profile, addr + offsets.flags), (flags & ~f.shutdown_mask) | f.shutdown_value
    )


def apply_sample(
    image: MemoryImage, profile: KernelProfile, sample: str, seed: int = 0
) -> MemoryImage:
    """Apply a named sample with its default parameters."""
    match sample:
        case "clean":
            return image
        case "1":
            index = {name: i for i, name in reversed(list(enumerate(profile.syscall_names)))}
            try:
                hooks = [(index[name], handler) for name, handler in SAMPLE1_HOOKS]
            except KeyError as e:
                raise InjectionError(f"profile has no syscall named {e.args[0]!r}") from None
            return inject_syscall_hook(image, profile, hooks)
        case "2":
            return inject_evt_branch_hook(image, profile, SAMPLE2_HANDLER)
        case "3":
            return inject_swi_pointer_hook(image, profile, SAMPLE3_HANDLER)
        case "4":
            return inject_swi_code_hook(image, profile, SAMPLE4_FAKE_TABLE)
        case "5":
            return hide_task(image, profile, SAMPLE5_COMM)
        case "race":
            candidates = [name for _, name in _list_tasks(image, profile)[2:]]
            if not candidates:
                raise InjectionError("no task besides swapper and init to race")
            victim = random.Random(seed).choice(candidates)
            return inject_halt_race(image, profile, victim, seed=seed)
    raise InjectionError(f"unknown sample {sample!r}; expected one of {', '.join(SAMPLES)}")


def _block_diff(
    left: MemoryImage, right: MemoryImage, ranges: list[tuple[int, int]], only_unmapped: bool
) -> None:
    # append every byte of `right` that is unmapped in `left` (or differs from it)
    block = 64
    for seg in right.segments:
        for start in range(0, len(seg.data), block):
            chunk = seg.data[start : start + block]
            at = seg.base + start
            try:
                if left.read(at, len(chunk)) == chunk or only_unmapped:
                    continue
            except UnmappedAddressError:
                pass
            for i, value in enumerate(chunk):
                other = left.segment_at(at + i)
                if other is None:
                    ranges.append((at + i, 1))
                elif not only_unmapped and other.data[at + i - other.base] != value:
                    ranges.append((at + i, 1))


def diff_ranges(a: MemoryImage, b: MemoryImage) -> list[tuple[PhysAddr, int]]:
    """Physical byte runs where `a` and `b` differ, including one-sided bytes."""
    singles: list[tuple[int, int]] = []
    _block_diff(a, b, singles, only_unmapped=False)
    _block_diff(b, a, singles, only_unmapped=True)
    merged: list[tuple[int, int]] = []
    for at, length in sorted(set(singles)):
        if merged and merged[-1][0] + merged[-1][1] == at:
            merged[-1] = (merged[-1][0], merged[-1][1] + length)
        else:
            merged.append((at, length))
    return merged


def diff_words(a: MemoryImage, b: MemoryImage) -> set[PhysAddr]:
    """Word-aligned physical addresses touched by `diff_ranges`."""
    words: set[PhysAddr] = set()
    for at, length in diff_ranges(a, b):
        for byte in range(at, at + length):
            words.add(byte & ~3)
    return words
