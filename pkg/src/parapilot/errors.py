"""Exception types shared across the planner."""


class SpecError(ValueError):
    """An input document violates the model/cluster/profile schema."""


class UnsupportedDeviceCountError(SpecError):
    """Device counts must be powers of two; anything else is rejected."""


class DivisibilityError(ValueError):
    """A micro-batch cannot be split evenly across the data-parallel ranks."""


class InfeasiblePlanError(RuntimeError):
    """No configuration fits the device memory budget."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
