"""Profile path resolution with clear precedence.

Follows explicit precedence order:
1. Explicit --profile flag
2. JOKER_PROFILE environment variable
3. ERROR - cannot determine

No fallbacks, no hardcoded paths, fail loudly.
"""

import os
from pathlib import Path

from .errors import ProfileResolutionError

PROFILE_ENV = "JOKER_PROFILE"
LOG_LEVEL_ENV = "JOKER_LOG_LEVEL"


def resolve_profile_path(
    explicit_path: str | None = None,
    environ: dict[str, str] | None = None,
) -> Path:
    """Resolve the kernel profile path.

    Raises
    ------
    ProfileResolutionError
        When neither source names a profile, or the named file is missing
    """
    env = os.environ if environ is None else environ

    # 1. Explicit path has highest priority
    if explicit_path:
        return _existing(Path(explicit_path).expanduser(), "--profile")

    # 2. Environment default
    if env.get(PROFILE_ENV):
        return _existing(Path(env[PROFILE_ENV]).expanduser(), PROFILE_ENV)

    raise ProfileResolutionError(
        "Cannot determine the kernel profile. You must either:\n"
        "1. Pass --profile PATH, OR\n"
        f"2. Set {PROFILE_ENV}=PATH in the environment\n"
        "Profiles are written by 'joker forge' or authored by hand."
    )


def _existing(path: Path, source: str) -> Path:
    if not path.is_file():
        raise ProfileResolutionError(f"Profile from {source} not found: {path}")
    return path.resolve()


def resolve_log_level(verbose: bool, environ: dict[str, str] | None = None) -> str:
    env = os.environ if environ is None else environ
    if verbose:
        return "DEBUG"
    return env.get(LOG_LEVEL_ENV, "WARNING").upper()
