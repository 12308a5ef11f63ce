"""Exception hierarchy. Each class carries a stable CLI exit code."""


class CPMError(Exception):
    exit_code = 1


class AngleNearPi(CPMError, ValueError):
    """Rotation angle too close to pi for an unambiguous logarithm."""

    exit_code = 10


class ShapeMismatch(CPMError, ValueError):
    exit_code = 11


class NotScalar(CPMError, ValueError):
    exit_code = 12


class EmptyCloud(CPMError, ValueError):
    exit_code = 13


class PartMissing(CPMError, KeyError):
    """A requested part label has no points in the cloud."""

    exit_code = 14

    def __str__(self):
        return str(self.args[0]) if self.args else "part missing"


class InvalidRange(CPMError, ValueError):
    exit_code = 15


class InvalidSpec(CPMError, ValueError):
    exit_code = 16


class GenerationFailed(CPMError, RuntimeError):
    exit_code = 17


class NoModelForRelation(CPMError, KeyError):
    exit_code = 18

    def __str__(self):
        return str(self.args[0]) if self.args else "no model for relation"


class AllPartsMissing(CPMError, RuntimeError):
    exit_code = 19


class DataLeak(CPMError, RuntimeError):
    """Checkpoint was trained on records that the protocol holds out."""

    exit_code = 20


class CheckpointError(CPMError, ValueError):
    exit_code = 21


class ArgumentError(CPMError, ValueError):
    exit_code = 2
