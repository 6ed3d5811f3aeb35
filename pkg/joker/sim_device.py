"""Simulated debug target serving a live toy kernel over the probe protocol.

While running, every command the device receives advances its scripted
workload one step. HALT freezes a snapshot that all reads see until
RESUME. In halt-mid-unlink mode the snapshot catches one exiting task
half-way through leaving the task list.
"""

import logging
import random
import socketserver
import threading
from collections import deque
from dataclasses import dataclass, field
from enum import StrEnum

from .acquisition import TargetState, parse_endpoint
from .errors import (
    ForgeSpecError,
    InjectionError,
    TargetConnectionError,
    UnmappedAddressError,
)
from .forge import FixtureSpec, KernelModel, TaskSpec
from .mem_image import MemoryImage
from .profile import KernelProfile
from .protocol import (
    Opcode,
    Status,
    WireState,
    encode_response,
    pack_address,
    pack_status,
    read_request,
)
from .samples import inject_halt_race

log = logging.getLogger(__name__)


class _NotHalted(Exception):
    pass


class _Incomplete(Exception):
    pass


class RaceMode(StrEnum):
    NONE = "none"
    HALT_MID_UNLINK = "halt-mid-unlink"


@dataclass(frozen=True)
class MutatorEvent:
    action: str  # spawn | exit
    comm: str
    pid: int = 0


def parse_script(text: str) -> tuple[MutatorEvent, ...]:
    """Parse ``spawn <pid> <comm>`` and ``exit <comm>`` lines."""
    events = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        parts = raw.split("#", 1)[0].split()
        if not parts:
            continue
        match parts:
            case ["spawn", pid, comm]:
                try:
                    events.append(MutatorEvent("spawn", comm, int(pid, 0)))
                except ValueError:
                    raise ForgeSpecError(f"script line {lineno}: bad pid {pid!r}") from None
            case ["exit", comm]:
                events.append(MutatorEvent("exit", comm))
            case _:
                raise ForgeSpecError(f"script line {lineno}: cannot parse {raw.strip()!r}")
    return tuple(events)


@dataclass(frozen=True)
class SimDeviceConfig:
    spec: FixtureSpec = field(default_factory=FixtureSpec)
    script: tuple[MutatorEvent, ...] = ()
    race_mode: RaceMode = RaceMode.NONE
    seed: int = 0
    max_read_chunk: int = 4096


class SimDevice:
    """Thread-safe simulated target; `handle` serves one decoded request."""

    def __init__(self, config: SimDeviceConfig | None = None):
        self.config = config or SimDeviceConfig()
        self._model = KernelModel.from_spec(self.config.spec)
        self._rng = random.Random(self.config.seed)
        self._pending: deque[MutatorEvent] = deque(self.config.script)
        self._frozen: MemoryImage | None = None
        self._exiting: str | None = None
        self._lock = threading.Lock()
        self.profile: KernelProfile = self._model.profile()

    @property
    def state(self) -> TargetState:
        return TargetState.RUNNING if self._frozen is None else TargetState.HALTED

    @property
    def live_tasks(self) -> list[TaskSpec]:
        with self._lock:
            return self._model.live_tasks()

    def _tick(self) -> None:
        if not self._pending:
            return
        event = self._pending.popleft()
        try:
            if event.action == "spawn":
                self._model.spawn(TaskSpec(event.pid, event.comm))
            else:
                self._model.exit(event.comm)
        except ForgeSpecError as e:
            log.warning("workload step dropped: %s", e)
            return
        log.debug("workload: %s %s", event.action, event.comm)

    def _race_victim(self) -> str | None:
        if self._pending and self._pending[0].action == "exit":
            return self._pending.popleft().comm
        candidates = [t.comm for t in self._model.live_tasks()[1:] if t.pid > 1]
        return self._rng.choice(candidates) if candidates else None

    def halt(self) -> None:
        with self._lock:
            if self._frozen is not None:
                return
            image, profile = self._model.render()
            if self.config.race_mode == RaceMode.HALT_MID_UNLINK:
                victim = self._race_victim()
                if victim is None:
                    log.info("no task available to catch mid-exit")
                else:
                    try:
                        image = inject_halt_race(
                            image, profile, victim, seed=self._rng.randrange(1 << 32)
                        )
                    except InjectionError as e:
                        log.warning("cannot stage %s mid-exit: %s", victim, e)
                    else:
                        self._exiting = victim
                        log.info("halted while %s was exiting", victim)
            self._frozen = image

    def resume(self) -> None:
        with self._lock:
            if self._frozen is None:
                log.warning("resume while running is a no-op")
                return
            victim, self._exiting, self._frozen = self._exiting, None, None
            if victim is not None:
                try:
                    self._model.exit(victim)
                except ForgeSpecError as e:
                    log.warning("%s could not finish exiting: %s", victim, e)

    def read(self, base: int, length: int) -> bytes:
        with self._lock:
            if self._frozen is None:
                raise _NotHalted
            return self._frozen.read(base, length)

    def handle(self, opcode: int, base: int = 0, length: int = 0) -> bytes:
        """Serve one request and return the encoded response frame."""
        if opcode != Opcode.HALT:
            with self._lock:
                if self._frozen is None:
                    self._tick()
        match opcode:
            case Opcode.HALT:
                self.halt()
                return encode_response(Status.OK)
            case Opcode.RESUME:
                self.resume()
                return encode_response(Status.OK)
            case Opcode.STATUS:
                wire = WireState.HALTED if self.state == TargetState.HALTED else WireState.RUNNING
                return encode_response(Status.OK, pack_status(wire, self.config.max_read_chunk))
            case Opcode.READ:
                if length > self.config.max_read_chunk:
                    message = f"read of {length} bytes exceeds {self.config.max_read_chunk}"
                    return encode_response(Status.ERR, message.encode())
                try:
                    return encode_response(Status.OK, self.read(base, length))
                except _NotHalted:
                    return encode_response(Status.NOT_HALTED)
                except UnmappedAddressError as e:
                    return encode_response(Status.UNMAPPED, pack_address(e.address))
        return encode_response(Status.ERR, f"unknown opcode {opcode}".encode())


class LoopbackTransport:
    """In-process transport that feeds request frames straight to a SimDevice."""

    def __init__(self, device: SimDevice):
        self.device = device
        self._inbox = bytearray()
        self._outbox = bytearray()

    def send(self, data: bytes) -> None:
        self._inbox += data
        while self._inbox:
            cursor = 0

            def take(n: int) -> bytes:
                nonlocal cursor
                if cursor + n > len(self._inbox):
                    raise _Incomplete
                chunk = bytes(self._inbox[cursor : cursor + n])
                cursor += n
                return chunk

            try:
                opcode, base, length = read_request(take)
            except _Incomplete:
                return
            del self._inbox[:cursor]
            self._outbox += self.device.handle(opcode, base, length)

    def recv_exact(self, n: int) -> bytes:
        if len(self._outbox) < n:
            raise TargetConnectionError("loopback device has no pending response")
        chunk = bytes(self._outbox[:n])
        del self._outbox[:n]
        return chunk

    def close(self) -> None:
        self._inbox.clear()
        self._outbox.clear()


class _ProbeHandler(socketserver.BaseRequestHandler):
    server: "SimServer"

    def _recv_exact(self, n: int) -> bytes:
        data = bytearray()
        while len(data) < n:
            chunk = self.request.recv(n - len(data))
            if not chunk:
                raise EOFError
            data += chunk
        return bytes(data)

    def handle(self) -> None:
        log.info("probe client %s:%d connected", *self.client_address[:2])
        try:
            while True:
                opcode, base, length = read_request(self._recv_exact)
                self.request.sendall(self.server.device.handle(opcode, base, length))
        except (EOFError, ConnectionError):
            log.info("probe client %s:%d disconnected", *self.client_address[:2])


class SimServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], device: SimDevice):
        self.device = device
        super().__init__(address, _ProbeHandler)
        self._thread: threading.Thread | None = None

    @property
    def endpoint(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"

    def start(self) -> "SimServer":
        self._thread = threading.Thread(target=self.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        if self._thread is not None:
            self._thread.join()


def run_sim_server(config: SimDeviceConfig, endpoint: str = "127.0.0.1:0") -> SimServer:
    """Bind a simulated target to `endpoint` and serve it on a background thread."""
    host, port = parse_endpoint(endpoint)
    try:
        server = SimServer((host, port), SimDevice(config))
    except OSError as e:
        raise TargetConnectionError(f"cannot listen on {endpoint}: {e}") from e
    log.info("simulated target listening on %s", server.endpoint)
    return server.start()
