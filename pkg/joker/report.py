"""Render detection reports as text or JSON, and read the JSON back."""

import json
from typing import Any

from .detectors import (
    CrossViewReport,
    EvtFinding,
    Provenance,
    SwiFinding,
    SwiFindingKind,
    SyscallHookFinding,
    TaskRecord,
)
from .errors import ReportFormatError
from .flow import DetectionReport, DetectorState, DetectorStatus, Verdict

SCHEMA = "joker.report/1"
CROSS_VIEW_BANNER = "-----compare cache <-> tasks list (cross-view)-----"


def _syscall_lines(f: SyscallHookFinding) -> list[str]:
    return [
        f"The address of system call < {f.name} > has been changed",
        f"original address: {f.original:08x}",
        f"new address: {f.current:08x}",
        f"evidence: {f.evidence}",
    ]


def _evt_lines(f: EvtFinding) -> list[str]:
    def side(word: int, text: str, target: int | None) -> str:
        suffix = f" -> 0x{target:08x}" if target is not None else ""
        return f"0x{word:08x} ({text}){suffix}"

    return [
        f"The exception vector at offset 0x{f.slot_offset:02x} has been changed",
        f"original instruction: {side(f.original_word, f.original_text, f.original_target)}",
        f"new instruction: {side(f.current_word, f.current_text, f.current_target)}",
        f"evidence: {f.evidence}",
    ]


def _swi_lines(f: SwiFinding) -> list[str]:
    if f.kind == SwiFindingKind.POINTER_CHANGED:
        head = f"The SWI handler literal at vector offset 0x{f.offset:x} has been changed"
    else:
        head = f"The SWI handler code at vector_swi+0x{f.offset:x} has been changed"
    lines = [
        head,
        f"original word: {f.original_word:08x}",
        f"new word: {f.current_word:08x}",
    ]
    if f.table_load_redirect:
        lines.append("The system call table pointer load has been redirected")
    if f.annotation:
        lines.append(f.annotation)
    lines.append(f"evidence: {f.evidence}")
    return lines


def _task_file_name(t: TaskRecord) -> str:
    return f"section_task_struct#0x{t.slot:x}" if t.slot is not None else f"0x{t.addr:x}"


def _cross_view_lines(cv: CrossViewReport) -> list[str]:
    lines = [CROSS_VIEW_BANNER]
    for t in cv.hidden:
        lines.append(
            f"Task with pid: {t.pid} , name: {t.comm} , file name: {_task_file_name(t)} "
            "found in cache but not in tasks list"
        )
    for t, reason in zip(cv.filtered_transient, cv.filter_reasons):
        lines.append(
            f"Transient task with pid: {t.pid} , name: {t.comm} , file name: "
            f"{_task_file_name(t)} ignored ({reason})"
        )
    lines.append(
        f"Number of tasks that appear in list but not in cache: {cv.missing_from_cache_count}"
    )
    lines.append(f"Number of tasks that appear in cache but not in list: {cv.cache_only_count}")
    return lines


def render_text(report: DetectionReport, header: dict[str, str] | None = None) -> str:
    blocks: list[list[str]] = []
    if header:
        blocks.append([f"{key}: {value}" for key, value in header.items()])
    blocks.extend(_syscall_lines(f) for f in report.syscall_hooks)
    blocks.extend(_evt_lines(f) for f in report.evt_findings)
    blocks.extend(_swi_lines(f) for f in report.swi_findings)
    if report.cross_view is not None:
        blocks.append(_cross_view_lines(report.cross_view))
    notes = []
    for status in report.statuses:
        if status.state == DetectorState.SKIPPED:
            notes.append(f"Detector {status.name} skipped: {status.reason}")
        notes.extend(f"Detector {status.name}: {note}" for note in status.notes)
    if notes:
        blocks.append(notes)
    verdict = "ROOTKIT ALERT" if report.verdict == Verdict.ROOTKIT_ALERT else "CLEAN"
    blocks.append([f"Verdict: {verdict}"])
    return "\n\n".join("\n".join(block) for block in blocks) + "\n"


# JSON


def _task_dict(t: TaskRecord) -> dict[str, Any]:
    return {
        "addr": t.addr,
        "pid": t.pid,
        "comm": t.comm,
        "state": t.state,
        "flags": t.flags,
        "provenance": str(t.provenance),
        "slot": t.slot,
    }


def report_to_dict(report: DetectionReport) -> dict[str, Any]:
    findings: list[dict[str, Any]] = []
    for f in report.syscall_hooks:
        findings.append(
            {
                "detector": "syscall_table",
                "index": f.index,
                "name": f.name,
                "original": f.original,
                "current": f.current,
                "evidence": f.evidence,
            }
        )
    for f in report.evt_findings:
        findings.append(
            {
                "detector": "evt",
                "slot_offset": f.slot_offset,
                "original_word": f.original_word,
                "current_word": f.current_word,
                "original_target": f.original_target,
                "current_target": f.current_target,
                "original_text": f.original_text,
                "current_text": f.current_text,
                "evidence": f.evidence,
            }
        )
    for name, group in (
        ("swi_pointer", report.swi_pointer_findings),
        ("swi_code", report.swi_code_findings),
    ):
        for f in group:
            findings.append(
                {
                    "detector": name,
                    "kind": str(f.kind),
                    "offset": f.offset,
                    "original_word": f.original_word,
                    "current_word": f.current_word,
                    "annotation": f.annotation,
                    "table_load_redirect": f.table_load_redirect,
                    "evidence": f.evidence,
                }
            )
    cross_view = None
    if report.cross_view is not None:
        cv = report.cross_view
        for t in cv.hidden:
            findings.append({"detector": "cross_view", "kind": "hidden_task", **_task_dict(t)})
        cross_view = {
            "hidden": [_task_dict(t) for t in cv.hidden],
            "filtered_transient": [
                {**_task_dict(t), "reason": reason}
                for t, reason in zip(cv.filtered_transient, cv.filter_reasons)
            ],
            "counts": {
                "list_not_in_cache": cv.missing_from_cache_count,
                "cache_not_in_list": cv.cache_only_count,
            },
        }
    return {
        "schema": SCHEMA,
        "verdict": str(report.verdict),
        "findings": findings,
        "cross_view": cross_view,
        "detectors": [
            {"name": s.name, "status": str(s.state), "reason": s.reason, "notes": list(s.notes)}
            for s in report.statuses
        ],
    }


def render_json(report: DetectionReport) -> str:
    return json.dumps(report_to_dict(report), indent=2) + "\n"


def render_report(
    report: DetectionReport, fmt: str = "text", header: dict[str, str] | None = None
) -> str:
    """Render `report` as ``text`` or ``json``; the JSON form carries no header."""
    if fmt == "json":
        return render_json(report)
    if fmt == "text":
        return render_text(report, header)
    raise ValueError(f"unknown report format {fmt!r}")


def _task_from(d: dict[str, Any]) -> TaskRecord:
    return TaskRecord(
        addr=d["addr"],
        pid=d["pid"],
        comm=d["comm"],
        state=d["state"],
        flags=d["flags"],
        provenance=Provenance(d["provenance"]),
        slot=d.get("slot"),
    )


def _swi_from(f: dict[str, Any]) -> SwiFinding:
    return SwiFinding(
        kind=SwiFindingKind(f["kind"]),
        offset=f["offset"],
        original_word=f["original_word"],
        current_word=f["current_word"],
        annotation=f["annotation"],
        table_load_redirect=f["table_load_redirect"],
        evidence=f["evidence"],
    )


def report_from_json(text: str) -> DetectionReport:
    """Rebuild a DetectionReport from `render_json` output."""
    try:
        doc = json.loads(text)
        if doc.get("schema") != SCHEMA:
            raise ReportFormatError(f"unsupported report schema {doc.get('schema')!r}")
        by_detector: dict[str, list[dict[str, Any]]] = {}
        for f in doc["findings"]:
            by_detector.setdefault(f["detector"], []).append(f)
        cross_view = None
        if doc.get("cross_view") is not None:
            cv = doc["cross_view"]
            cross_view = CrossViewReport(
                hidden=tuple(_task_from(t) for t in cv["hidden"]),
                missing_from_cache_count=cv["counts"]["list_not_in_cache"],
                filtered_transient=tuple(_task_from(t) for t in cv["filtered_transient"]),
                filter_reasons=tuple(t["reason"] for t in cv["filtered_transient"]),
            )
        return DetectionReport(
            syscall_hooks=tuple(
                SyscallHookFinding(
                    f["index"], f["name"], f["original"], f["current"], f["evidence"]
                )
                for f in by_detector.get("syscall_table", [])
            ),
            evt_findings=tuple(
                EvtFinding(
                    slot_offset=f["slot_offset"],
                    original_word=f["original_word"],
                    current_word=f["current_word"],
                    original_target=f["original_target"],
                    current_target=f["current_target"],
                    original_text=f["original_text"],
                    current_text=f["current_text"],
                    evidence=f["evidence"],
                )
                for f in by_detector.get("evt", [])
            ),
            swi_pointer_findings=tuple(_swi_from(f) for f in by_detector.get("swi_pointer", [])),
            swi_code_findings=tuple(_swi_from(f) for f in by_detector.get("swi_code", [])),
            cross_view=cross_view,
            statuses=tuple(
                DetectorStatus(
                    name=s["name"],
                    state=DetectorState(s["status"]),
                    reason=s["reason"],
                    notes=tuple(s["notes"]),
                )
                for s in doc["detectors"]
            ),
        )
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ReportFormatError(f"malformed report: {e}") from e
