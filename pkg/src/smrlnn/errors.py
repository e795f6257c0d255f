class SmrlError(Exception):
    pass


class DimensionError(SmrlError, ValueError):
    pass


class NotPositiveDefiniteError(SmrlError, ValueError):
    def __init__(self, pivot):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite (Cholesky pivot {pivot} <= 0)")


class ConfigError(SmrlError, ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class DataError(SmrlError, ValueError):
    pass


class NonFiniteLossError(SmrlError, FloatingPointError):
    def __init__(self, loss_name, value=float("nan")):
        self.loss_name = loss_name
        self.value = value
        super().__init__(f"non-finite {loss_name}: {value}")


class EmptyArmError(SmrlError, ValueError):
    def __init__(self, arm):
        self.arm = arm
        super().__init__(f"{arm} arm is empty")
