"""Exception hierarchy for joker.

Every error raised by the toolkit derives from JokerError so the CLI can
render it as a one-line message instead of a traceback.
"""


class JokerError(Exception):
    """Base class for all toolkit errors."""

    pass


class ImageFormatError(JokerError):
    """Raised when an image container has a bad magic, version or truncation."""

    pass


class ImageValidationError(JokerError):
    """Raised when image segments are empty or overlap."""

    pass


class UnmappedAddressError(JokerError):
    """Raised when a physical range is not covered by the image or target."""

    def __init__(self, address: int, message: str | None = None):
        self.address = address
        super().__init__(message or f"physical address 0x{address:x} is not mapped")


class NotLinearMappedError(JokerError):
    """Raised when a virtual address lies below PAGE_OFFSET."""

    def __init__(self, virt: int, page_offset: int):
        self.virt = virt
        super().__init__(
            f"virtual address 0x{virt:08x} is below PAGE_OFFSET 0x{page_offset:08x}; "
            "use the page-table walker or evt_phys"
        )


class TranslationFaultError(JokerError):
    """Raised by the page-table walker on fault or unsupported descriptors."""

    def __init__(self, virt: int, descriptor: int, level: int, reason: str):
        self.virt = virt
        self.descriptor = descriptor
        self.level = level
        super().__init__(
            f"translation fault for 0x{virt:08x} at L{level}: "
            f"descriptor 0x{descriptor:08x} ({reason})"
        )


class ProfileError(JokerError):
    """Raised when a kernel profile cannot be parsed or fails validation."""

    def __init__(self, key: str | None, message: str):
        self.key = key
        super().__init__(f"profile key '{key}': {message}" if key else f"profile: {message}")


class UnistdParseError(JokerError):
    """Raised when a unistd.h excerpt maps one syscall number to two names."""

    pass


class SyscallIndexError(JokerError, IndexError):
    """Raised for a syscall number outside the profile's table."""

    pass


class EncodingError(JokerError):
    """Raised when an instruction field does not fit its encoding."""

    pass


class NotPcRelativeError(JokerError):
    """Raised when a target is requested for an instruction without one."""

    pass


class TargetConnectionError(JokerError):
    """Raised when the debug transport cannot be opened or drops."""

    pass


class ProtocolError(JokerError):
    """Raised for protocol violations and error responses from a target."""

    pass


class TargetNotHaltedError(ProtocolError):
    """Raised when memory is read while the target is running."""

    pass


class RegionRequestError(JokerError):
    """Raised when a region request is invalid (overlap, empty, duplicate label)."""

    pass


class AcquisitionGapError(JokerError):
    """Raised when a detector needs memory the acquisition does not contain."""

    def __init__(self, region: str, address: int):
        self.region = region
        self.address = address
        super().__init__(f"{region} not acquired: 0x{address:x} is unmapped")


class CorruptListError(JokerError):
    """Raised when the task list cannot be walked; keeps the records read so far."""

    def __init__(self, message: str, partial: list | None = None):
        self.partial = partial or []
        super().__init__(message)


class ConfigurationError(JokerError):
    """Raised when inputs disagree with each other (e.g. table sizes)."""

    pass


class DataIntegrityError(JokerError):
    """Raised when reconstructed records contain duplicate addresses."""

    pass


class ForgeSpecError(JokerError):
    """Raised for an invalid fixture spec."""

    pass


class InjectionError(JokerError):
    """Raised when a sample injection cannot be applied to an image."""

    pass


class ProfileResolutionError(JokerError):
    """Raised when no profile path can be determined."""

    pass


class ReportFormatError(JokerError):
    """Raised when a JSON report does not match the report schema."""

    pass
