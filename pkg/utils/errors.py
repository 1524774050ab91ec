"""
Exception types shared by the engine and the CLI
"""


class MilNceError(Exception):
    """Base class for every error raised by this package"""


class ShapeError(MilNceError, ValueError):
    """Operand shapes do not conform"""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = shapes
        shown = ' vs '.join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: shape mismatch {shown}")


class ConfigError(MilNceError, ValueError):
    """Invalid or unparsable run configuration"""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"{message} (line {lineno})"
        super().__init__(message)


class NonFiniteError(MilNceError, ArithmeticError):
    """A loss or gradient stopped being finite during training"""

    def __init__(self, message, step=None):
        self.step = step
        if step is not None:
            message = f"{message} at step {step}"
        super().__init__(message)


class ArtifactMismatchError(MilNceError, ValueError):
    """A checkpoint or corpus file has the wrong format or version"""


class GradCheckError(MilNceError):
    """Analytic and finite-difference gradients disagree"""
