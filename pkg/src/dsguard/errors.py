"""Exception hierarchy shared across the toolkit."""


class DsguardError(Exception):
    """Base class for all toolkit errors."""


class GeometryError(DsguardError):
    """Image dimensions incompatible with the requested operation."""


class PlanFormatError(DsguardError):
    """Serialized transformation plan is malformed or inconsistent."""


class CapacityError(DsguardError):
    """Payload does not fit the image's embedding capacity."""


class MalformedPayloadError(DsguardError):
    """Embedded payload header is missing or corrupt (bad magic/version/length)."""


class AuthenticationError(DsguardError):
    """AEAD authentication failed: wrong key, wrong nonce, or tampered data."""


class LossyFormatError(DsguardError):
    """Lossy image format encountered; embedded payloads would not survive."""


class KeyFileError(DsguardError):
    """Key file is missing, unreadable, or malformed."""


class DatasetError(DsguardError):
    """Dataset-level failure: bad container, label out of range, key mismatch."""
