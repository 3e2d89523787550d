"""Exception types that the CLI maps onto distinct exit codes."""


class LoadError(RuntimeError):
    """A persisted artifact (checkpoint, dataset, export) cannot be read."""


class StateError(RuntimeError):
    """An operation was invoked before the state it needs exists."""


class NumericError(RuntimeError):
    """A non-finite value appeared where the math guarantees a finite one."""
