import cmath
import hashlib
import json
from typing import Any, Optional


def parse_amplitude(text: str) -> Optional[complex]:
    """
    Parse a complex amplitude from a config value.

    Accepted forms:
    - real number (e.g., "1.883")
    - Python complex literal (e.g., "1.5+0.2j")
    - polar form modulus@phase in radians (e.g., "1.883@0.5")

    Args:
        text: Value string from a configuration file

    Returns:
        complex if parsing succeeds, None otherwise

    Examples:
        >>> parse_amplitude("1.883")
        (1.883+0j)
        >>> parse_amplitude("1.5+0.2j")
        (1.5+0.2j)
        >>> parse_amplitude("2@0")
        (2+0j)
        >>> parse_amplitude("invalid") is None
        True
    """
    text = text.strip().replace(" ", "")
    try:
        if "@" in text:
            modulus, phase = text.split("@", 1)
            return cmath.rect(float(modulus), float(phase))
        return complex(text)
    except ValueError:
        return None


def parse_bool(text: str) -> Optional[bool]:
    """
    >>> parse_bool("yes"), parse_bool("0"), parse_bool("maybe")
    (True, False, None)
    """
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    return None


def content_hash(data: Any) -> str:
    """SHA-256 of the canonical JSON form (sorted keys, no whitespace)"""
    canonical = json.dumps(data, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
