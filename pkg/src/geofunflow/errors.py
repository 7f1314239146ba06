class NumericalError(RuntimeError):
    """Non-finite or divergent state encountered during a computation."""

    def __init__(self, message, step=None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class VerificationError(RuntimeError):
    pass
