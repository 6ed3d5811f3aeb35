"""Kernel profiles: every address, offset and constant the detectors need.

Profile text grammar
--------------------
- ``#`` starts a comment line; blank lines are ignored.
- ``[section]`` headers: translation, symbols, task, slab, filter, syscalls.
- Inside every section but ``[syscalls]``: ``key = value``. Addresses are hex
  with a ``0x`` prefix; sizes and offsets accept any Python int literal.
- ``[syscalls]`` lists one name per line; the line order is the syscall number.
"""

import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .errors import ProfileError, SyscallIndexError, UnistdParseError
from .mem_image import PhysAddr, TranslationConstants, VirtAddr

NI_SYSCALL = "sys_ni_syscall"
SECTIONS = ("translation", "symbols", "task", "slab", "filter", "syscalls")

_REQUIRED = object()
_HEX_ADDR = re.compile(r"^0x[0-9a-fA-F]+$")
_NAME = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


@dataclass(frozen=True)
class TaskOffsets:
    pid: int
    comm: int
    state: int
    flags: int
    tasks_next: int
    tasks_prev: int
    comm_len: int = 16
    state_size: int = 4


@dataclass(frozen=True)
class SlabLayout:
    """Where the page descriptors live and how a slab descriptor is laid out."""

    mem_map_phys: PhysAddr
    page_desc_size: int
    pfn_start: int
    pfn_end: int
    cache_table_phys: PhysAddr
    cache_count: int
    cache_name: str = "task_struct"
    cache_name_len: int = 32
    slab_flag: int = 0x1
    desc_flags: int = 0x0
    desc_cache_id: int = 0x4
    desc_objects: int = 0x8
    desc_bitmap: int = 0xC
    desc_first_object: int = 0x10


@dataclass(frozen=True)
class FilterParams:
    shutdown_mask: int = 0x3
    shutdown_value: int = 0x2
    swapper_name: str = "swapper"


@dataclass(frozen=True)
class KernelProfile:
    translation: TranslationConstants
    sys_call_table_virt: VirtAddr
    vector_swi_virt: VirtAddr
    init_task_virt: VirtAddr
    task: TaskOffsets
    task_struct_size: int
    syscall_names: tuple[str, ...]
    slab: SlabLayout
    filter: FilterParams = field(default_factory=FilterParams)
    swi_handler_len: int = 512

    def __post_init__(self):
        object.__setattr__(self, "syscall_names", tuple(self.syscall_names))
        if self.task.comm_len < 1:
            raise ProfileError("task.comm_len", "must be at least 1")
        if self.task.state_size not in (4, 8):
            raise ProfileError("task.state_size", "must be 4 or 8")
        widths = {"comm": self.task.comm_len, "state": self.task.state_size}
        for f in fields(TaskOffsets):
            if f.name in ("comm_len", "state_size"):
                continue
            start = getattr(self.task, f.name)
            end = start + widths.get(f.name, 4)
            if start < 0 or end > self.task_struct_size:
                raise ProfileError(
                    f"task.{f.name}",
                    f"field {start:#x}..{end:#x} is outside "
                    f"task_struct_size {self.task_struct_size:#x}",
                )
        if self.slab.pfn_start >= self.slab.pfn_end:
            raise ProfileError("slab.pfn_end", "pfn_start must be below pfn_end")
        if self.swi_handler_len <= 0 or self.swi_handler_len % 4:
            raise ProfileError("symbols.swi_handler_len", "must be a positive multiple of 4")

    @property
    def syscall_count(self) -> int:
        return len(self.syscall_names)


@dataclass(frozen=True)
class _Key:
    section: str
    name: str
    kind: str  # addr | hex | int | str
    default: Any = _REQUIRED


# (profile attribute path, file key)
_LAYOUT: list[tuple[str, _Key]] = [
    ("translation.page_offset", _Key("translation", "page_offset", "addr")),
    ("translation.phys_offset", _Key("translation", "phys_offset", "addr")),
    ("translation.evt_phys", _Key("translation", "evt_phys", "addr")),
    ("translation.evt_virt", _Key("translation", "evt_virt", "addr", 0xFFFF0000)),
    ("translation.page_size", _Key("translation", "page_size", "hex", 4096)),
    ("translation.ttbr_phys", _Key("translation", "ttbr_phys", "addr", None)),
    ("sys_call_table_virt", _Key("symbols", "sys_call_table", "addr")),
    ("vector_swi_virt", _Key("symbols", "vector_swi", "addr")),
    ("swi_handler_len", _Key("symbols", "swi_handler_len", "hex", 512)),
    ("init_task_virt", _Key("symbols", "init_task", "addr")),
    ("task_struct_size", _Key("task", "size", "hex")),
    ("task.pid", _Key("task", "pid", "hex")),
    ("task.comm", _Key("task", "comm", "hex")),
    ("task.comm_len", _Key("task", "comm_len", "int", 16)),
    ("task.state", _Key("task", "state", "hex")),
    ("task.state_size", _Key("task", "state_size", "int", 4)),
    ("task.flags", _Key("task", "flags", "hex")),
    ("task.tasks_next", _Key("task", "tasks_next", "hex")),
    ("task.tasks_prev", _Key("task", "tasks_prev", "hex")),
    ("slab.mem_map_phys", _Key("slab", "mem_map", "addr")),
    ("slab.page_desc_size", _Key("slab", "page_desc_size", "hex")),
    ("slab.pfn_start", _Key("slab", "pfn_start", "hex")),
    ("slab.pfn_end", _Key("slab", "pfn_end", "hex")),
    ("slab.cache_table_phys", _Key("slab", "cache_table", "addr")),
    ("slab.cache_count", _Key("slab", "cache_count", "int")),
    ("slab.cache_name", _Key("slab", "cache_name", "str", "task_struct")),
    ("slab.cache_name_len", _Key("slab", "cache_name_len", "int", 32)),
    ("slab.slab_flag", _Key("slab", "slab_flag", "hex", 0x1)),
    ("slab.desc_flags", _Key("slab", "desc_flags", "hex", 0x0)),
    ("slab.desc_cache_id", _Key("slab", "desc_cache_id", "hex", 0x4)),
    ("slab.desc_objects", _Key("slab", "desc_objects", "hex", 0x8)),
    ("slab.desc_bitmap", _Key("slab", "desc_bitmap", "hex", 0xC)),
    ("slab.desc_first_object", _Key("slab", "desc_first_object", "hex", 0x10)),
    ("filter.shutdown_mask", _Key("filter", "shutdown_mask", "hex", 0x3)),
    ("filter.shutdown_value", _Key("filter", "shutdown_value", "hex", 0x2)),
    ("filter.swapper_name", _Key("filter", "swapper_name", "str", "swapper")),
]


def _parse_sections(text: str) -> tuple[dict[str, dict[str, str]], list[str]]:
    values: dict[str, dict[str, str]] = {s: {} for s in SECTIONS if s != "syscalls"}
    names: list[str] = []
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        header = re.match(r"^\[(\w+)\]$", line)
        if header:
            section = header.group(1)
            if section not in SECTIONS:
                raise ProfileError(section, f"unknown section on line {lineno}")
            continue
        if section is None:
            raise ProfileError("?", f"line {lineno} appears before any [section]")
        if section == "syscalls":
            if not _NAME.match(line):
                raise ProfileError("syscalls", f"invalid syscall name {line!r} on line {lineno}")
            names.append(line)
            continue
        if "=" not in line:
            raise ProfileError(section, f"expected 'key = value' on line {lineno}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[section][key] = value
    return values, names


def _convert(key: _Key, raw: str) -> Any:
    label = f"{key.section}.{key.name}"
    if key.kind == "str":
        return raw
    if key.kind == "addr":
        if not _HEX_ADDR.match(raw):
            raise ProfileError(label, f"expected a 0x-prefixed hex address, got {raw!r}")
        return int(raw, 16)
    try:
        return int(raw, 0)
    except ValueError:
        raise ProfileError(label, f"expected an integer, got {raw!r}") from None


def load_profile(text: str) -> KernelProfile:
    """Parse and validate profile text.

    Raises
    ------
    ProfileError
        On a missing key, a malformed value or a violated invariant; the
        message names the offending key.
    """
    values, names = _parse_sections(text)
    resolved: dict[str, Any] = {}
    known = {(k.section, k.name) for _, k in _LAYOUT} | {("symbols", "syscall_count")}
    for section, entries in values.items():
        for name in entries:
            if (section, name) not in known:
                raise ProfileError(f"{section}.{name}", "unknown key")

    for path, key in _LAYOUT:
        raw = values[key.section].get(key.name)
        if raw is None:
            if key.default is _REQUIRED:
                raise ProfileError(f"{key.section}.{key.name}", "missing required key")
            resolved[path] = key.default
        else:
            resolved[path] = _convert(key, raw)

    declared = values["symbols"].get("syscall_count")
    if declared is not None:
        count = _convert(_Key("symbols", "syscall_count", "int"), declared)
        if count != len(names):
            raise ProfileError(
                "symbols.syscall_count",
                f"declares {count} syscalls but [syscalls] lists {len(names)}",
            )

    def group(prefix: str) -> dict[str, Any]:
        return {
            p.split(".", 1)[1]: v for p, v in resolved.items() if p.startswith(prefix + ".")
        }

    try:
        translation = TranslationConstants(**group("translation"))
    except Exception as e:
        raise ProfileError("translation", str(e)) from None

    return KernelProfile(
        translation=translation,
        sys_call_table_virt=resolved["sys_call_table_virt"],
        vector_swi_virt=resolved["vector_swi_virt"],
        init_task_virt=resolved["init_task_virt"],
        task=TaskOffsets(**group("task")),
        task_struct_size=resolved["task_struct_size"],
        syscall_names=tuple(names),
        slab=SlabLayout(**group("slab")),
        filter=FilterParams(**group("filter")),
        swi_handler_len=resolved["swi_handler_len"],
    )


def _lookup(profile: KernelProfile, path: str) -> Any:
    obj: Any = profile
    for part in path.split("."):
        obj = getattr(obj, part)
    return obj


def _format(key: _Key, value: Any) -> str:
    if key.kind == "addr":
        return f"0x{value:08x}"
    if key.kind == "hex":
        return f"0x{value:x}"
    return str(value)


def save_profile(profile: KernelProfile) -> str:
    """Render a profile in canonical key order; load_profile inverts it."""
    lines = ["# joker kernel profile"]
    current = None
    for path, key in _LAYOUT:
        value = _lookup(profile, path)
        if key.section != current:
            lines.extend(["", f"[{key.section}]"])
            current = key.section
            if current == "symbols":
                lines.append(f"syscall_count = {profile.syscall_count}")
        if value is None:
            continue
        lines.append(f"{key.name} = {_format(key, value)}")
    lines.extend(["", "[syscalls]", *profile.syscall_names, ""])
    return "\n".join(lines)


def load_profile_file(path: str | Path) -> KernelProfile:
    path = Path(path).expanduser()
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise ProfileError(None, f"{path} is not UTF-8 text ({e.reason})") from None
    return load_profile(text)


def syscall_name(profile: KernelProfile, index: int) -> str:
    if not 0 <= index < profile.syscall_count:
        raise SyscallIndexError(
            f"syscall index {index} outside table of {profile.syscall_count} entries"
        )
    return profile.syscall_names[index]


_UNISTD_BASED = re.compile(
    r"^\s*#\s*define\s+__NR_(\w+)\s+\(\s*__NR_\w*BASE\s*\+\s*(0x[0-9a-fA-F]+|\d+)\s*\)"
)
_UNISTD_PLAIN = re.compile(r"^\s*#\s*define\s+__NR_(\w+)\s+\(?\s*(0x[0-9a-fA-F]+|\d+)\s*\)?\s*$")
_UNISTD_SKIP = {"SYSCALL_BASE", "OABI_SYSCALL_BASE", "syscalls"}


def parse_unistd(header_text: str) -> list[str]:
    """Recover syscall names in table order from a unistd.h excerpt.

    Understands the ARM EABI ``(__NR_SYSCALL_BASE+n)`` form and plain
    ``#define __NR_name n``. Gaps are filled with ``sys_ni_syscall``.
    """
    by_index: dict[int, str] = {}
    for lineno, line in enumerate(header_text.splitlines(), start=1):
        match = _UNISTD_BASED.match(line) or _UNISTD_PLAIN.match(line)
        if not match:
            continue
        name, number = match.group(1), int(match.group(2), 0)
        if name in _UNISTD_SKIP:
            continue
        existing = by_index.get(number)
        if existing is not None and existing != name:
            raise UnistdParseError(
                f"line {lineno}: syscall {number} defined as both "
                f"'{existing}' and '{name}'"
            )
        by_index[number] = name
    if not by_index:
        return []
    return [by_index.get(i, NI_SYSCALL) for i in range(max(by_index) + 1)]
