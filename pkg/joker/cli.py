"""Main CLI entry point for joker."""

import json
import sys
import threading
from dataclasses import replace
from functools import partial
from pathlib import Path
from typing import Annotated, Literal

from cyclopts import App, CycloptsError, Parameter
from rich.console import Console
from rich.markup import escape

from .acquisition import (
    RemoteTarget,
    acquire_for_detection,
    acquire_regions,
    parse_regions,
)
from .config import resolve_log_level, resolve_profile_path
from .errors import ForgeSpecError, JokerError, RegionRequestError
from .flow import (
    CROSS_VIEW,
    DETECTORS,
    EVT,
    EXIT_CLEAN,
    EXIT_ERROR,
    EXIT_USAGE,
    SWI_CODE,
    SWI_POINTER,
    SYSCALL_TABLE,
    DetectionReport,
    run_detection_flow,
)
from .forge import FixtureSpec, KernelModel, load_fixture_spec
from .logs import configure_logging
from .mem_image import MemoryImage, open_image, save_image
from .profile import KernelProfile, load_profile_file, save_profile
from .report import render_report
from .samples import apply_sample, diff_ranges
from .sim_device import RaceMode, SimDeviceConfig, parse_script, run_sim_server

app = App(
    help="Detects ARM kernel rootkits in physical memory acquired over a debug link.\n\n"
    "Use 'joker COMMAND --help' for detailed command options.",
    version_flags=["--version"],
)
console = Console()

Format = Annotated[Literal["text", "json"], Parameter(name="--format")]


def _fail(e: Exception) -> SystemExit:
    console.print(f"[red]Error: {escape(str(e))}[/red]")
    return SystemExit(EXIT_ERROR)


def _usage(message: str) -> SystemExit:
    console.print(f"[red]Usage error: {escape(message)}[/red]")
    return SystemExit(EXIT_USAGE)


def _parse_base(base: str | None) -> int | None:
    if base is None:
        return None
    try:
        return int(base, 16)
    except ValueError:
        raise _usage(f"--base expects a hex address, got {base!r}") from None


def _read_text(path: str, error: type[JokerError]) -> str:
    try:
        return Path(path).expanduser().read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise error(f"{path} is not UTF-8 text ({e.reason})") from None


def _profile(profile: str | None) -> tuple[KernelProfile, Path]:
    path = resolve_profile_path(profile)
    return load_profile_file(path), path


def _emit(report: DetectionReport, fmt: str, out: str | None, header: dict[str, str]) -> int:
    text = render_report(report, fmt, header=header)
    if out:
        Path(out).expanduser().write_text(text)
        console.print(f"[green]Report written to[/green] {escape(out)}")
    else:
        console.print(text, markup=False, highlight=False, emoji=False, soft_wrap=True, end="")
    return report.exit_code


def _analyze(
    detectors: tuple[str, ...],
    baseline: str | None,
    current: str,
    profile: str | None,
    base: str | None,
    fmt: str,
    out: str | None,
    concurrent: bool = False,
) -> int:
    start = _parse_base(base)
    try:
        kernel, profile_path = _profile(profile)
        before = open_image(baseline, start) if baseline else None
        after = open_image(current, start)
        report = run_detection_flow(
            before, after, kernel, detectors=detectors, concurrent=concurrent
        )
    except (JokerError, OSError) as e:
        raise _fail(e) from e
    header = {"current": current, "profile": str(profile_path)}
    if baseline:
        header = {"baseline": baseline, **header}
    return _emit(report, fmt, out, header)


@app.command
def scan(
    *,
    baseline: str,
    current: str | None = None,
    connect: str | None = None,
    profile: str | None = None,
    base: str | None = None,
    fmt: Format = "text",
    out: str | None = None,
    concurrent: bool = False,
    keep_halted: bool = False,
    verbose: bool = False,
) -> int:
    """Run every detector against a current image or a live target.

    Parameters
    ----------
    baseline : str
        Clean reference image
    current : str
        Image under examination (exclusive with --connect)
    connect : str
        host:port of a probe endpoint to acquire from instead of --current
    profile : str
        Kernel profile (default: $JOKER_PROFILE)
    base : str
        Physical base, in hex, for flat images without a JKMI header
    fmt : str
        Report format: text or json
    out : str
        Write the report here instead of stdout
    concurrent : bool
        Run the static checks on a thread pool (images only)
    keep_halted : bool
        Leave a live target halted after acquisition
    verbose : bool
        Debug logging on stderr
    """
    configure_logging(resolve_log_level(verbose))
    if (current is None) == (connect is None):
        raise _usage("scan needs exactly one of --current or --connect")
    if current is not None:
        return _analyze(DETECTORS, baseline, current, profile, base, fmt, out, concurrent)
    assert connect is not None

    start = _parse_base(base)
    try:
        kernel, profile_path = _profile(profile)
        before = open_image(baseline, start)
        with RemoteTarget.connect(connect) as target:
            target.halt()
            acquired = acquire_for_detection(target, kernel)
            if not keep_halted:
                target.resume()
        report = run_detection_flow(before, acquired, kernel)
    except (JokerError, OSError) as e:
        raise _fail(e) from e
    header = {"baseline": baseline, "target": connect, "profile": str(profile_path)}
    return _emit(report, fmt, out, header)


@app.command
def diff_syscalls(
    *,
    baseline: str,
    current: str,
    profile: str | None = None,
    base: str | None = None,
    fmt: Format = "text",
    out: str | None = None,
    verbose: bool = False,
) -> int:
    """Compare sys_call_table entries between two images."""
    configure_logging(resolve_log_level(verbose))
    return _analyze((SYSCALL_TABLE,), baseline, current, profile, base, fmt, out)


@app.command
def check_evt(
    *,
    baseline: str,
    current: str,
    profile: str | None = None,
    base: str | None = None,
    fmt: Format = "text",
    out: str | None = None,
    verbose: bool = False,
) -> int:
    """Compare the exception vector table slots between two images."""
    configure_logging(resolve_log_level(verbose))
    return _analyze((EVT,), baseline, current, profile, base, fmt, out)


@app.command
def check_swi(
    *,
    baseline: str,
    current: str,
    profile: str | None = None,
    base: str | None = None,
    fmt: Format = "text",
    out: str | None = None,
    verbose: bool = False,
) -> int:
    """Compare the SWI handler pointer and the vector_swi code between two images."""
    configure_logging(resolve_log_level(verbose))
    return _analyze((SWI_POINTER, SWI_CODE), baseline, current, profile, base, fmt, out)


@app.command
def crossview(
    *,
    current: str,
    profile: str | None = None,
    base: str | None = None,
    fmt: Format = "text",
    out: str | None = None,
    verbose: bool = False,
) -> int:
    """Reconcile the task list with the task_struct cache of one image."""
    configure_logging(resolve_log_level(verbose))
    return _analyze((CROSS_VIEW,), None, current, profile, base, fmt, out)


@app.command
def acquire(
    *,
    connect: str,
    out: str,
    regions: str | None = None,
    profile: str | None = None,
    keep_halted: bool = False,
    verbose: bool = False,
) -> int:
    """Halt a live target and store the acquired memory as a JKMI image.

    Parameters
    ----------
    connect : str
        host:port of the probe endpoint
    out : str
        Output image path
    regions : str
        File of 'label 0xBASE LENGTH' lines; without it the regions the
        detectors need are planned from the profile
    profile : str
        Kernel profile (default: $JOKER_PROFILE)
    keep_halted : bool
        Leave the target halted afterwards
    verbose : bool
        Debug logging on stderr
    """
    configure_logging(resolve_log_level(verbose))
    try:
        if regions:
            request = parse_regions(_read_text(regions, RegionRequestError))
            collect = partial(acquire_regions, request=request)
        else:
            collect = partial(acquire_for_detection, profile=_profile(profile)[0])
        with RemoteTarget.connect(connect) as target:
            target.halt()
            image = collect(target)
            if not keep_halted:
                target.resume()
        save_image(image, out)
    except (JokerError, OSError) as e:
        raise _fail(e) from e
    console.print(
        f"[green]Acquired {len(image.segments)} segment(s), "
        f"{image.total_size} bytes ->[/green] {escape(out)}"
    )
    return EXIT_CLEAN


def _forge_spec(spec: str | None, seed: int | None) -> FixtureSpec:
    fixture = load_fixture_spec(_read_text(spec, ForgeSpecError)) if spec else FixtureSpec()
    if seed is not None:
        fixture = replace(fixture, seed=seed)
    return fixture


@app.command
def forge(
    *,
    out: str,
    sample: Literal["clean", "1", "2", "3", "4", "5", "race"] = "clean",
    spec: str | None = None,
    seed: int | None = None,
    verbose: bool = False,
) -> int:
    """Forge a toy-kernel image, optionally carrying a rootkit sample.

    Writes <sample>.jkmi, baseline.jkmi, kernel.prof and manifest.json
    into the output directory.

    Parameters
    ----------
    out : str
        Output directory (created if missing)
    sample : str
        clean, 1-5 or race
    spec : str
        Forge spec file overriding the default layout and roster
    seed : int
        Seed for filler bytes and race choices
    verbose : bool
        Debug logging on stderr
    """
    configure_logging(resolve_log_level(verbose))
    try:
        fixture = _forge_spec(spec, seed)
        clean, kernel = KernelModel.from_spec(fixture).render()
        image = apply_sample(clean, kernel, sample, fixture.seed)
        target = Path(out).expanduser()
        target.mkdir(parents=True, exist_ok=True)
        save_image(clean, target / "baseline.jkmi")
        save_image(image, target / f"{sample}.jkmi")
        (target / "kernel.prof").write_text(save_profile(kernel))
        manifest = _manifest(sample, fixture.seed, clean, image)
        (target / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    except (JokerError, OSError) as e:
        raise _fail(e) from e
    console.print(f"[green]Forged sample {sample} in[/green] {escape(str(target))}")
    return EXIT_CLEAN


def _manifest(sample: str, seed: int, clean: MemoryImage, image: MemoryImage) -> dict:
    return {
        "sample": sample,
        "seed": seed,
        "image": f"{sample}.jkmi",
        "baseline": "baseline.jkmi",
        "profile": "kernel.prof",
        "modified": [{"phys": at, "length": length} for at, length in diff_ranges(clean, image)],
    }


@app.command
def serve_sim(
    *,
    listen: str = "127.0.0.1:4444",
    spec: str | None = None,
    script: str | None = None,
    race_mode: Literal["none", "halt-mid-unlink"] = "none",
    seed: int = 0,
    profile_out: str | None = None,
    verbose: bool = False,
) -> int:
    """Serve a simulated target over the probe protocol until interrupted.

    Parameters
    ----------
    listen : str
        host:port to bind
    spec : str
        Forge spec file for the simulated kernel
    script : str
        Workload file of 'spawn PID COMM' and 'exit COMM' lines
    race_mode : str
        none, or halt-mid-unlink to freeze one task mid-exit on every halt
    seed : int
        Seed for race choices
    profile_out : str
        Write the simulated kernel's profile here
    verbose : bool
        Debug logging on stderr
    """
    configure_logging(resolve_log_level(verbose))
    try:
        config = SimDeviceConfig(
            spec=_forge_spec(spec, None),
            script=parse_script(_read_text(script, ForgeSpecError)) if script else (),
            race_mode=RaceMode(race_mode),
            seed=seed,
        )
        server = run_sim_server(config, listen)
        if profile_out:
            Path(profile_out).expanduser().write_text(save_profile(server.device.profile))
    except (JokerError, OSError) as e:
        raise _fail(e) from e
    console.print(f"[green]Simulated target listening on[/green] {server.endpoint}")
    try:
        threading.Event().wait()
    except KeyboardInterrupt:
        console.print("[yellow]Stopping simulated target[/yellow]")
    finally:
        server.stop()
    return EXIT_CLEAN


def run_cli(argv: list[str] | None = None) -> int:
    """Parse `argv`, run the command and return its exit code."""
    try:
        command, bound, _ = app.parse_args(argv, exit_on_error=False, print_error=True)
    except CycloptsError:
        return EXIT_USAGE
    try:
        result = command(*bound.args, **bound.kwargs)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_ERROR
    return result if isinstance(result, int) else EXIT_CLEAN


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
