class ExpressionError(ValueError):
    """Syntax or name error in a coefficient expression, with 0-based column."""

    def __init__(self, message: str, pos: int):
        super().__init__(f"{message} (at column {pos})")
        self.message = message
        self.pos = pos


class ConfigError(ValueError):
    pass


class CFLError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """A solver or simulator produced inf/nan; ``where`` locates the first one."""

    def __init__(self, message: str, where: tuple[int, ...]):
        super().__init__(f"{message} at {where}")
        self.where = where


class SingularSystemError(ArithmeticError):
    pass
