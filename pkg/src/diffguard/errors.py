"""Exception types shared across the package."""


class UsageError(ValueError):
    """Bad arguments, invalid configuration or a precondition violation."""


class ShapeError(UsageError):
    """Inconsistent tensor shapes while building a graph node."""

    def __init__(self, node_id: str, message: str):
        super().__init__(f"[{node_id}] {message}")
        self.node_id = node_id


class NumericError(ArithmeticError):
    """A non-finite value appeared, or a division guard tripped."""

    def __init__(self, message: str, node_id: str | None = None):
        super().__init__(f"[{node_id}] {message}" if node_id else message)
        self.node_id = node_id
