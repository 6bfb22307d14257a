"""Exception types shared across the package."""


class VerificationError(RuntimeError):
    """A structural property that the theory guarantees failed numerically."""


class BlowUpError(RuntimeError):
    """A time integration left the stable regime (positivity loss, norm blow-up)."""
