class ParameterError(ValueError):
    """Invalid configuration or argument value."""


class DataError(ValueError):
    """Inputs violate a data contract (NaN costs, duplicate bindings, ...)."""


class StateError(RuntimeError):
    """An operation was called on state that cannot support it."""
