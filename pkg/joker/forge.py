"""Forge deterministic toy-kernel images and their matching profiles.

The forged kernel carries every structure the detectors inspect: the
syscall table, the exception vector table with its literal pool, the
vector_swi code block, a circular task list, a mem_map with a simplified
slab model, and short-descriptor page tables mirroring the linear map.

Default constants mirror the published snapshots wherever they were
printed; everything else is arbitrary but fixed.
"""

import random
import re
import struct
from dataclasses import dataclass, field, replace

from .arm_codec import (
    NOP_WORD,
    TABLE_REGISTER,
    decode,
    encode_branch,
    encode_ldr_pc_literal,
    encode_svc,
    is_pc_address_load,
    literal_target,
)
from .errors import ForgeSpecError
from .mem_image import (
    L1_COARSE,
    L1_TABLE_SIZE,
    L2_TABLE_SIZE,
    SECTION_SIZE,
    MemoryImage,
    Segment,
    TranslationConstants,
)
from .profile import KernelProfile, SlabLayout, TaskOffsets

NI = 0xC02E499C

# ARM EABI numbers 0-31 with the handler addresses of the clean table dump.
# The low byte of entry 0 is missing from the dump and is fixed at 0x00.
DEFAULT_SYSCALLS: tuple[tuple[str, int], ...] = (
    ("restart_syscall", 0xC02D6800),
    ("exit", 0xC02C9F9C),
    ("fork", 0xC0286AB0),
    ("read", 0xC0365554),
    ("write", 0xC03652EC),
    ("open", 0xC0362F4C),
    ("close", 0xC0362B60),
    ("sys_ni_syscall", NI),
    ("creat", 0xC0362F7C),
    ("link", 0xC0371C50),
    ("unlink", 0xC0371514),
    ("execve", 0xC0286AC0),
    ("chdir", 0xC0363A2C),
    ("sys_ni_syscall", NI),
    ("mknod", 0xC0371964),
    ("chmod", 0xC03638F4),
    ("lchown", 0xC02F93EC),
    ("sys_ni_syscall", NI),
    ("sys_ni_syscall", NI),
    ("lseek", 0xC0364324),
    ("getpid", 0xC02D5D7C),
    ("mount", 0xC037FF9C),
    ("sys_ni_syscall", NI),
    ("setuid", 0xC02F930C),
    ("getuid", 0xC02F8FFC),
    ("sys_ni_syscall", NI),
    ("ptrace", 0xC02D1E48),
    ("sys_ni_syscall", NI),
    ("sys_ni_syscall", NI),
    ("pause", 0xC02D76B0),
    ("sys_ni_syscall", NI),
    ("sys_ni_syscall", NI),
)

# vector_swi entry code (first 0x70 bytes as dumped), then filler, the
# alignment NOPs, and a literal word; sys_call_table follows at +0xE4.
_SWI_PROLOGUE = (
    0xE24DD088, 0xE88D1FFF, 0xE28D803C, 0xE9486000,
    0xE14F8000, 0xE58DE03C, 0xE58D8040, 0xE58D0044,
    0xE3A0B000, 0xE3180020, 0x13A0A000, 0x051EA004,
    0xE59FC0A8, 0xE59CC000, 0xEE01CF10, 0xF1080080,
    0xE1A096AD, 0xE1A09689, 0xE28F8094, 0xE599C000,
    0xE3DAA4FF, 0x122A7609, 0x159F8084, 0xE92D0030,
    0xE31C0C01, 0x1A000008, 0xE3570E17, 0xE24FEF65,
)
_SWI_FILLER_WORDS = 24  # +0x70 .. +0xD0
_SWI_PAD_NOPS = 4  # +0xD0 .. +0xE0
_SWI_TAIL_LITERAL = 0xC0551C04

# Harmless words for stubs and filler: no NOP, no table-pointer load.
_FILLER_VOCABULARY = (
    0xE92D4010, 0xE8BD8010, 0xE3A00000, 0xE5900000,
    0xE1A0E00F, 0xE24DD008, 0xE58D0004, 0xE3500000,
    0x1A000002, 0xE12FFF1E, 0xE5931000, 0xE0800001,
)

# (slot offset, branch target relative to the vector base); slot 0x8 is the
# SWI literal load and slot 0x0 the reset svc.
_VECTOR_BRANCHES = (
    (0x04, 0x380),
    (0x0C, 0x300),
    (0x10, 0x280),
    (0x14, 0x3C0),
    (0x18, 0x200),
    (0x1C, 0x3A0),
)
RESET_SVC_IMM = 0x9F0000
EVT_SWI_SLOT = 0x8
SWI_POINTER_OFFSET = 0x420
SWI_SPARE_OFFSET = 0x424

LIST_POISON1 = 0x00100100
LIST_POISON2 = 0x00200200
CACHE_NAMES = ("kmalloc-64", "task_struct", "dentry", "inode_cache")
PAGE_DESC_SIZE = 0x20
PG_RESERVED = 0x400
SLAB_FLAG = 0x1

_SECTION_ATTRS = 0x40E
_SMALL_PAGE_ATTRS = 0x03E


@dataclass(frozen=True)
class TaskSpec:
    pid: int
    comm: str
    state: int = 0
    flags: int = 0x00400100


DEFAULT_ROSTER: tuple[TaskSpec, ...] = (
    TaskSpec(0, "swapper", 0, 0x0),
    TaskSpec(1, "init", 1, 0x00400100),
    TaskSpec(2, "kthreadd", 1, 0x00208040),
    TaskSpec(812, "system_server", 1, 0x00400140),
    TaskSpec(3129, "printer", 0, 0x00400100),
    TaskSpec(3140, "MalApp", 0, 0x00400100),
)

# freed objects left behind in unallocated slots
DEFAULT_STALE: tuple[TaskSpec, ...] = (
    TaskSpec(2911, "dumpstate", 64, 0x0040014C),
    TaskSpec(3001, "am", 64, 0x0040014C),
)

DEFAULT_TASK_OFFSETS = TaskOffsets(
    pid=0x150, comm=0x1C0, state=0x0, flags=0xC, tasks_next=0x110, tasks_prev=0x114
)


def default_swi_template(seed: int = 0) -> tuple[int, ...]:
    rng = random.Random(seed)
    filler = tuple(rng.choice(_FILLER_VOCABULARY) for _ in range(_SWI_FILLER_WORDS))
    return _SWI_PROLOGUE + filler + (NOP_WORD,) * _SWI_PAD_NOPS + (_SWI_TAIL_LITERAL,)


@dataclass(frozen=True)
class FixtureSpec:
    """Everything needed to forge a clean toy kernel."""

    page_offset: int = 0xC0000000
    phys_offset: int = 0x40000000
    page_size: int = 4096
    linear_size: int = 0x400000
    evt_phys: int = 0x40002000
    evt_virt: int = 0xFFFF0000
    ttbr_phys: int = 0x40004000
    vector_swi_virt: int = 0xC003D140
    syscalls: tuple[tuple[str, int], ...] = DEFAULT_SYSCALLS
    swi_template: tuple[int, ...] | None = None
    roster: tuple[TaskSpec, ...] = DEFAULT_ROSTER
    stale: tuple[TaskSpec, ...] = DEFAULT_STALE
    task_offsets: TaskOffsets = DEFAULT_TASK_OFFSETS
    task_struct_size: int = 0x200
    objects_per_page: int = 8
    free_slot_mask: int = 0b00100100
    slab_pages: int = 1
    slab_phys: int = 0x40200000
    mem_map_phys: int = 0x40100000
    cache_table_phys: int = 0x40108000
    seed: int = 0

    @property
    def translation(self) -> TranslationConstants:
        return TranslationConstants(
            page_offset=self.page_offset,
            phys_offset=self.phys_offset,
            evt_phys=self.evt_phys,
            page_size=self.page_size,
            ttbr_phys=self.ttbr_phys,
            evt_virt=self.evt_virt,
        )

    @property
    def swi_words(self) -> tuple[int, ...]:
        if self.swi_template is not None:
            return self.swi_template
        return default_swi_template(self.seed)

    @property
    def sys_call_table_virt(self) -> int:
        return self.vector_swi_virt + 4 * len(self.swi_words)

    def validate(self) -> None:
        pids = [t.pid for t in self.roster]
        if len(set(pids)) != len(pids):
            raise ForgeSpecError("roster pids must be unique")
        if not self.roster or self.roster[0] != TaskSpec(0, "swapper", 0, 0):
            raise ForgeSpecError("roster[0] must be (0, 'swapper', 0, 0)")
        for task in self.roster + self.stale:
            if len(task.comm.encode()) >= self.task_offsets.comm_len:
                raise ForgeSpecError(f"comm {task.comm!r} does not fit comm_len")
        if self.objects_per_page > 32:
            raise ForgeSpecError("the allocation bitmap holds at most 32 objects")
        if self.objects_per_page * self.task_struct_size > self.page_size:
            raise ForgeSpecError("objects_per_page * task_struct_size exceeds a page")
        if self.linear_size % SECTION_SIZE or self.linear_size <= 0:
            raise ForgeSpecError("linear_size must be a positive multiple of 1 MiB")
        self._validate_swi_template()

    def _validate_swi_template(self) -> None:
        words = self.swi_words
        loads = [
            i for i, w in enumerate(words) if is_pc_address_load(decode(w, 0), TABLE_REGISTER)
        ]
        if len(loads) != 1:
            raise ForgeSpecError("vector_swi template needs exactly one 'add r8, pc, #imm'")
        fetch = self.vector_swi_virt + 4 * loads[0]
        if literal_target(decode(words[loads[0]], fetch)) != self.sys_call_table_virt:
            raise ForgeSpecError(
                "the table-pointer load must address the word right after the template"
            )
        if NOP_WORD not in words[loads[0] :]:
            raise ForgeSpecError("vector_swi template needs a NOP slot after the table load")


@dataclass
class KernelModel:
    """Mutable toy-kernel state: slab slots and the task-list order.

    `slots[i]` holds the object last written to slot i (live or stale);
    `allocated[i]` mirrors the slab bitmap; `order` is the task list,
    starting with init_task's slot.
    """

    spec: FixtureSpec
    slots: list[TaskSpec | None]
    allocated: list[bool]
    order: list[int] = field(default_factory=list)

    @classmethod
    def from_spec(cls, spec: FixtureSpec) -> "KernelModel":
        spec.validate()
        capacity = spec.objects_per_page * spec.slab_pages
        slots: list[TaskSpec | None] = [None] * capacity
        allocated = [False] * capacity
        order: list[int] = []
        free = [
            bool(spec.free_slot_mask >> (i % spec.objects_per_page) & 1) for i in range(capacity)
        ]
        usable = [i for i in range(capacity) if not free[i]]
        if len(spec.roster) > len(usable):
            raise ForgeSpecError(
                f"roster of {len(spec.roster)} tasks does not fit {len(usable)} "
                "allocatable slab slots"
            )
        for task, slot in zip(spec.roster, usable):
            slots[slot] = task
            allocated[slot] = True
            order.append(slot)
        stale_slots = [i for i in range(capacity) if free[i]]
        for task, slot in zip(spec.stale, stale_slots):
            slots[slot] = task
        return cls(spec=spec, slots=slots, allocated=allocated, order=order)

    def live_tasks(self) -> list[TaskSpec]:
        return [self.slots[i] for i in self.order]  # type: ignore[misc]

    def spawn(self, task: TaskSpec) -> int:
        if any(t.pid == task.pid for t in self.live_tasks()):
            raise ForgeSpecError(f"pid {task.pid} already running")
        for slot, used in enumerate(self.allocated):
            if not used:
                self.slots[slot] = task
                self.allocated[slot] = True
                self.order.append(slot)
                return slot
        raise ForgeSpecError("no free task_struct slot for spawn")

    def exit(self, comm: str) -> TaskSpec:
        for position, slot in enumerate(self.order):
            task = self.slots[slot]
            if position and task is not None and task.comm == comm:
                del self.order[position]
                self.allocated[slot] = False
                return task
        raise ForgeSpecError(f"no running task named {comm!r} can exit")

    # geometry

    def slot_phys(self, slot: int) -> int:
        page, index = divmod(slot, self.spec.objects_per_page)
        return self.spec.slab_phys + page * self.spec.page_size + index * self.spec.task_struct_size

    def slot_virt(self, slot: int) -> int:
        return self.spec.page_offset + (self.slot_phys(slot) - self.spec.phys_offset)

    def profile(self) -> KernelProfile:
        spec = self.spec
        pfn_start = spec.phys_offset // spec.page_size
        pfn_end = (spec.phys_offset + spec.linear_size) // spec.page_size
        return KernelProfile(
            translation=spec.translation,
            sys_call_table_virt=spec.sys_call_table_virt,
            vector_swi_virt=spec.vector_swi_virt,
            init_task_virt=self.slot_virt(self.order[0]),
            task=spec.task_offsets,
            task_struct_size=spec.task_struct_size,
            syscall_names=tuple(name for name, _ in spec.syscalls),
            slab=SlabLayout(
                mem_map_phys=spec.mem_map_phys,
                page_desc_size=PAGE_DESC_SIZE,
                pfn_start=pfn_start,
                pfn_end=pfn_end,
                cache_table_phys=spec.cache_table_phys,
                cache_count=len(CACHE_NAMES),
                slab_flag=SLAB_FLAG,
            ),
            swi_handler_len=4 * len(spec.swi_words),
        )

    def render(self) -> tuple[MemoryImage, KernelProfile]:
        profile = self.profile()
        segments = [
            Segment(self.spec.evt_phys, self._vectors_page(), "vectors"),
            *self._page_tables(),
            self._kernel_text(),
            Segment(self.spec.mem_map_phys, self._mem_map(profile), "mem_map"),
            Segment(self.spec.cache_table_phys, self._cache_table(), "kmem_cache_names"),
            *self._slab_pages(),
        ]
        return MemoryImage(tuple(segments)), profile

    # builders

    def _filler(self, salt: int, count: int) -> list[int]:
        rng = random.Random(self.spec.seed * 1_000_003 + salt)
        return [rng.choice(_FILLER_VOCABULARY) for _ in range(count)]

    def _vectors_page(self) -> bytes:
        spec = self.spec
        page = bytearray(spec.page_size)
        base = spec.evt_virt
        struct.pack_into("<I", page, 0x0, encode_svc(RESET_SVC_IMM))
        struct.pack_into(
            "<I",
            page,
            EVT_SWI_SLOT,
            encode_ldr_pc_literal(15, SWI_POINTER_OFFSET - (EVT_SWI_SLOT + 8)),
        )
        for slot, target in _VECTOR_BRANCHES:
            struct.pack_into("<I", page, slot, encode_branch(base + slot, base + target))
        stubs = self._filler(1, (SWI_POINTER_OFFSET - 0x200) // 4)
        struct.pack_into(f"<{len(stubs)}I", page, 0x200, *stubs)
        struct.pack_into("<II", page, SWI_POINTER_OFFSET, spec.vector_swi_virt, 0)
        return bytes(page)

    def _page_tables(self) -> list[Segment]:
        spec = self.spec
        l1 = bytearray(L1_TABLE_SIZE)
        l2_phys = spec.ttbr_phys + L1_TABLE_SIZE
        l2 = bytearray(spec.page_size)
        linear_l2, vectors_l2 = 0, L2_TABLE_SIZE

        first_mb = spec.page_offset >> 20
        struct.pack_into("<I", l1, first_mb * 4, (l2_phys + linear_l2) | L1_COARSE)
        for i in range(SECTION_SIZE // spec.page_size):
            phys = spec.phys_offset + i * spec.page_size
            struct.pack_into("<I", l2, linear_l2 + i * 4, phys | _SMALL_PAGE_ATTRS)
        for mb in range(1, spec.linear_size // SECTION_SIZE):
            phys = spec.phys_offset + mb * SECTION_SIZE
            struct.pack_into("<I", l1, (first_mb + mb) * 4, phys | _SECTION_ATTRS)

        evt_mb = spec.evt_virt >> 20
        struct.pack_into("<I", l1, evt_mb * 4, (l2_phys + vectors_l2) | L1_COARSE)
        evt_index = (spec.evt_virt >> 12) & 0xFF
        struct.pack_into("<I", l2, vectors_l2 + evt_index * 4, spec.evt_phys | _SMALL_PAGE_ATTRS)
        return [
            Segment(spec.ttbr_phys, bytes(l1), "swapper_pg_dir"),
            Segment(l2_phys, bytes(l2), "l2_tables"),
        ]

    def _kernel_text(self) -> Segment:
        spec = self.spec
        tc = spec.translation
        swi_phys = tc.phys_offset + (spec.vector_swi_virt - tc.page_offset)
        words = list(spec.swi_words) + [addr for _, addr in spec.syscalls]
        start = swi_phys & ~(spec.page_size - 1)
        end = swi_phys + 4 * len(words)
        end = (end + spec.page_size - 1) & ~(spec.page_size - 1)
        text = bytearray(end - start)
        struct.pack_into(f"<{len(words)}I", text, swi_phys - start, *words)
        return Segment(start, bytes(text), "kernel_text")

    def _task_bytes(self, task: TaskSpec, next_node: int, prev_node: int) -> bytes:
        offsets = self.spec.task_offsets
        raw = bytearray(self.spec.task_struct_size)
        raw[offsets.state : offsets.state + offsets.state_size] = task.state.to_bytes(
            offsets.state_size, "little", signed=True
        )
        struct.pack_into("<I", raw, offsets.flags, task.flags & 0xFFFFFFFF)
        struct.pack_into("<I", raw, offsets.tasks_next, next_node)
        struct.pack_into("<I", raw, offsets.tasks_prev, prev_node)
        struct.pack_into("<i", raw, offsets.pid, task.pid)
        comm = task.comm.encode().ljust(offsets.comm_len, b"\0")
        raw[offsets.comm : offsets.comm + offsets.comm_len] = comm
        return bytes(raw)

    def _slab_pages(self) -> list[Segment]:
        spec = self.spec
        node = spec.task_offsets.tasks_next
        pages = [bytearray(spec.page_size) for _ in range(spec.slab_pages)]
        links: dict[int, tuple[int, int]] = {}
        count = len(self.order)
        for position, slot in enumerate(self.order):
            nxt = self.order[(position + 1) % count]
            prv = self.order[position - 1]
            links[slot] = (self.slot_virt(nxt) + node, self.slot_virt(prv) + node)
        for slot, task in enumerate(self.slots):
            if task is None:
                continue
            next_node, prev_node = links.get(slot, (LIST_POISON1, LIST_POISON2))
            page, index = divmod(slot, spec.objects_per_page)
            offset = index * spec.task_struct_size
            pages[page][offset : offset + spec.task_struct_size] = self._task_bytes(
                task, next_node, prev_node
            )
        return [
            Segment(spec.slab_phys + i * spec.page_size, bytes(page), f"slab_task_struct_{i}")
            for i, page in enumerate(pages)
        ]

    def _mem_map(self, profile: KernelProfile) -> bytes:
        spec = self.spec
        layout = profile.slab
        count = layout.pfn_end - layout.pfn_start
        mem_map = bytearray(count * PAGE_DESC_SIZE)

        def put(pfn: int, flags: int, cache_id: int = 0, objects: int = 0, bitmap: int = 0):
            at = (pfn - layout.pfn_start) * PAGE_DESC_SIZE
            struct.pack_into("<I", mem_map, at + layout.desc_flags, flags)
            struct.pack_into("<I", mem_map, at + layout.desc_cache_id, cache_id)
            struct.pack_into("<I", mem_map, at + layout.desc_objects, objects)
            struct.pack_into("<I", mem_map, at + layout.desc_bitmap, bitmap)
            struct.pack_into("<I", mem_map, at + layout.desc_first_object, 0)

        text_pfn = (spec.phys_offset + (spec.vector_swi_virt - spec.page_offset)) // spec.page_size
        put(text_pfn, PG_RESERVED)
        task_cache = CACHE_NAMES.index("task_struct")
        for page in range(spec.slab_pages):
            bitmap = 0
            for index in range(spec.objects_per_page):
                if self.allocated[page * spec.objects_per_page + index]:
                    bitmap |= 1 << index
            pfn = (spec.slab_phys + page * spec.page_size) // spec.page_size
            put(pfn, SLAB_FLAG, task_cache, spec.objects_per_page, bitmap)
        # a dentry slab whose contents are never acquired
        decoy_pfn = (spec.slab_phys + spec.slab_pages * spec.page_size) // spec.page_size
        put(decoy_pfn, SLAB_FLAG, CACHE_NAMES.index("dentry"), 16, 0xFFFF)
        return bytes(mem_map)

    def _cache_table(self) -> bytes:
        return b"".join(name.encode().ljust(32, b"\0") for name in CACHE_NAMES)


def build_clean_image(spec: FixtureSpec | None = None) -> tuple[MemoryImage, KernelProfile]:
    """Forge a clean toy-kernel image and the profile describing it."""
    return KernelModel.from_spec(spec or FixtureSpec()).render()


def load_fixture_spec(text: str) -> FixtureSpec:
    """Parse a forge spec file.

    ``[forge]`` takes ``key = value`` overrides of FixtureSpec scalars;
    ``[roster]`` and ``[stale]`` list ``pid comm [state [flags]]`` per line.
    """
    overrides: dict[str, object] = {}
    lists: dict[str, list[TaskSpec]] = {}
    section = None
    scalar_fields = {
        "page_offset", "phys_offset", "page_size", "linear_size", "evt_phys", "evt_virt",
        "ttbr_phys", "vector_swi_virt", "task_struct_size", "objects_per_page",
        "free_slot_mask", "slab_pages", "slab_phys", "mem_map_phys", "cache_table_phys", "seed",
    }
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        header = re.match(r"^\[(\w+)\]$", line)
        if header:
            section = header.group(1)
            if section not in ("forge", "roster", "stale"):
                raise ForgeSpecError(f"line {lineno}: unknown section [{section}]")
            continue
        try:
            if section == "forge":
                key, value = (p.strip() for p in line.split("=", 1))
                if key not in scalar_fields:
                    raise ForgeSpecError(f"line {lineno}: unknown forge key {key!r}")
                overrides[key] = int(value, 0)
            elif section in ("roster", "stale"):
                parts = line.split()
                task = TaskSpec(
                    pid=int(parts[0], 0),
                    comm=parts[1],
                    state=int(parts[2], 0) if len(parts) > 2 else 0,
                    flags=int(parts[3], 0) if len(parts) > 3 else 0x00400100,
                )
                lists.setdefault(section, []).append(task)
            else:
                raise ForgeSpecError(f"line {lineno} appears before any [section]")
        except (ValueError, IndexError):
            raise ForgeSpecError(f"line {lineno}: cannot parse {raw.strip()!r}") from None
    spec = replace(FixtureSpec(), **overrides)  # type: ignore[arg-type]
    if "roster" in lists:
        spec = replace(spec, roster=tuple(lists["roster"]))
    if "stale" in lists:
        spec = replace(spec, stale=tuple(lists["stale"]))
    spec.validate()
    return spec
