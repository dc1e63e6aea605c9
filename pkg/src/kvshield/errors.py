"""Exception types shared across kvshield."""


class KVShieldError(Exception):
    """Base class for all kvshield errors."""


class ShapeError(KVShieldError, ValueError):
    """Matrix dimensions do not line up."""


class InvalidDimensionError(KVShieldError, ValueError):
    """A count that must be positive (or consistent) is not."""


class WorldMismatchError(KVShieldError):
    """Plain data reached the shielded path, or permuted data the plain path."""


class BudgetError(KVShieldError):
    """A secure-world working set would exceed the trusted memory budget."""


class KeystoreError(KVShieldError):
    """Keystore file is malformed or fails its integrity check."""


class RefusalError(KVShieldError):
    """Request refused to avoid a combinatorial or memory blowup."""


class ConfigError(KVShieldError, ValueError):
    """Malformed configuration file or value."""
