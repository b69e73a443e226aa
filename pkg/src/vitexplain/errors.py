"""Exception hierarchy shared by the engine, explainers and CLI."""


class VitexplainError(Exception):
    """Base class; carries the process exit code used by the CLI."""

    exit_code = 1


class InputError(VitexplainError):
    """Bad user input: files, sizes, fractions, class indices."""

    exit_code = 2


class ModelError(VitexplainError):
    """Bundle is inconsistent: missing weights, shape mismatches."""

    exit_code = 3


class ShapeError(ModelError):
    """Dimension mismatch in a dense-math primitive."""


class NumericError(VitexplainError):
    """Non-finite value detected where the contract requires finiteness."""

    exit_code = 4
