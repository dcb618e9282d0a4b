"""Exception hierarchy shared by all modules."""


class SafeSwitchError(Exception):
    pass


class ValidationError(SafeSwitchError, ValueError):
    pass


class ProtocolError(SafeSwitchError):
    pass


class DivergenceError(SafeSwitchError):
    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"state diverged at step {step}")


class UnstabilizableError(SafeSwitchError):
    pass


class StabilityError(SafeSwitchError):
    pass


class DegenerateError(SafeSwitchError):
    pass


class SynthesisError(SafeSwitchError):
    pass


class CertificationError(SafeSwitchError):
    pass


class PreconditionError(SafeSwitchError):
    pass
