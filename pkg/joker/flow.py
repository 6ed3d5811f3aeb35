"""Detection flow: run the detectors and gather one report.

Each detector runs on its own; a detector that hits an acquisition gap
is marked skipped and the others carry on.
"""

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import StrEnum
from functools import partial

from .acquisition import TargetState
from .detectors import (
    CrossViewReport,
    EvtFinding,
    SwiFinding,
    SyscallHookFinding,
    check_evt,
    check_swi_code,
    check_swi_pointer,
    check_syscall_table,
    cross_view,
    scan_cache_tasks,
    walk_task_list,
)
from .errors import (
    AcquisitionGapError,
    ConfigurationError,
    CorruptListError,
    DataIntegrityError,
)
from .mem_image import MemoryImage, PhysAddr, PhysicalMemory
from .profile import KernelProfile

log = logging.getLogger(__name__)

SYSCALL_TABLE = "syscall_table"
EVT = "evt"
SWI_POINTER = "swi_pointer"
SWI_CODE = "swi_code"
CROSS_VIEW = "cross_view"
DETECTORS = (SYSCALL_TABLE, EVT, SWI_POINTER, SWI_CODE, CROSS_VIEW)
STATIC_DETECTORS = DETECTORS[:4]

EXIT_CLEAN = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_ALERT = 3
EXIT_SKIPPED = 4


class Verdict(StrEnum):
    CLEAN = "clean"
    ROOTKIT_ALERT = "rootkit_alert"


class DetectorState(StrEnum):
    OK = "ok"
    SKIPPED = "skipped"


@dataclass(frozen=True)
class DetectorStatus:
    name: str
    state: DetectorState
    reason: str | None = None
    notes: tuple[str, ...] = ()


@dataclass(frozen=True)
class DetectionReport:
    syscall_hooks: tuple[SyscallHookFinding, ...] = ()
    evt_findings: tuple[EvtFinding, ...] = ()
    swi_pointer_findings: tuple[SwiFinding, ...] = ()
    swi_code_findings: tuple[SwiFinding, ...] = ()
    cross_view: CrossViewReport | None = None
    statuses: tuple[DetectorStatus, ...] = field(default_factory=tuple)

    @property
    def swi_findings(self) -> tuple[SwiFinding, ...]:
        return self.swi_pointer_findings + self.swi_code_findings

    @property
    def verdict(self) -> Verdict:
        hidden = self.cross_view.hidden if self.cross_view else ()
        if self.syscall_hooks or self.evt_findings or self.swi_findings or hidden:
            return Verdict.ROOTKIT_ALERT
        return Verdict.CLEAN

    @property
    def skipped(self) -> tuple[DetectorStatus, ...]:
        return tuple(s for s in self.statuses if s.state == DetectorState.SKIPPED)

    @property
    def exit_code(self) -> int:
        if self.verdict == Verdict.ROOTKIT_ALERT:
            return EXIT_ALERT
        if self.skipped:
            return EXIT_SKIPPED
        return EXIT_CLEAN


def _ensure_halted(mem: PhysicalMemory | None) -> None:
    state = getattr(mem, "state", None)
    if state == TargetState.RUNNING:
        log.info("halting target before analysis")
        mem.halt()  # type: ignore[union-attr]


def _cross_view_step(
    current: PhysicalMemory, profile: KernelProfile
) -> tuple[CrossViewReport | None, DetectorStatus]:
    try:
        listed = walk_task_list(current, profile)
    except (CorruptListError, AcquisitionGapError) as e:
        walked = len(getattr(e, "partial", []))
        reason = f"{e} ({walked} task(s) walked)" if walked else str(e)
        return None, DetectorStatus(CROSS_VIEW, DetectorState.SKIPPED, reason)

    gaps: list[PhysAddr] = []
    try:
        cached = scan_cache_tasks(current, profile, on_gap=gaps.append)
        report = cross_view(listed, cached, profile)
    except (AcquisitionGapError, DataIntegrityError) as e:
        return None, DetectorStatus(CROSS_VIEW, DetectorState.SKIPPED, str(e))
    notes = tuple(f"mem_map or slab memory at 0x{at:x} not acquired" for at in gaps)
    return report, DetectorStatus(CROSS_VIEW, DetectorState.OK, notes=notes)


def run_detection_flow(
    baseline: PhysicalMemory | None,
    current: PhysicalMemory,
    profile: KernelProfile,
    *,
    detectors: Sequence[str] = DETECTORS,
    concurrent: bool = False,
    baseline_profile: KernelProfile | None = None,
) -> DetectionReport:
    """Run the selected detectors on `current` (and `baseline` for static checks).

    A running target session is halted first. Static checks may run on a
    thread pool when both inputs are images; the cross view always runs
    after them, list walk before cache scan.
    """
    unknown = sorted(set(detectors) - set(DETECTORS))
    if unknown:
        raise ConfigurationError(f"unknown detector(s): {', '.join(unknown)}")
    static = [name for name in STATIC_DETECTORS if name in detectors]
    if static and baseline is None:
        raise ConfigurationError("static checks need a baseline acquisition")
    _ensure_halted(current)
    _ensure_halted(baseline)

    checks: dict[str, Callable[..., list]] = {
        SYSCALL_TABLE: partial(check_syscall_table, baseline_profile=baseline_profile),
        EVT: check_evt,
        SWI_POINTER: check_swi_pointer,
        SWI_CODE: check_swi_code,
    }

    def guarded(name: str) -> tuple[list, DetectorStatus]:
        try:
            findings = checks[name](baseline, current, profile)
            return findings, DetectorStatus(name, DetectorState.OK)
        except AcquisitionGapError as e:
            log.warning("%s skipped: %s", name, e)
            return [], DetectorStatus(name, DetectorState.SKIPPED, str(e))

    images = isinstance(baseline, MemoryImage) and isinstance(current, MemoryImage)
    if concurrent and images and len(static) > 1:
        with ThreadPoolExecutor(max_workers=len(static)) as pool:
            outcomes = dict(zip(static, pool.map(guarded, static)))
    else:
        outcomes = {name: guarded(name) for name in static}

    statuses = [outcomes[name][1] for name in static]
    results = {name: tuple(outcomes[name][0]) for name in static}

    report_cross_view = None
    if CROSS_VIEW in detectors:
        report_cross_view, status = _cross_view_step(current, profile)
        if status.state == DetectorState.SKIPPED:
            log.warning("cross_view skipped: %s", status.reason)
        statuses.append(status)

    return DetectionReport(
        syscall_hooks=results.get(SYSCALL_TABLE, ()),
        evt_findings=results.get(EVT, ()),
        swi_pointer_findings=results.get(SWI_POINTER, ()),
        swi_code_findings=results.get(SWI_CODE, ()),
        cross_view=report_cross_view,
        statuses=tuple(statuses),
    )
