"""Exception types mapped to CLI exit codes."""


class InputError(ValueError):
    """Bad or inconsistent user input (CLI exit code 2)."""


class NumericalError(RuntimeError):
    """A numerical procedure failed to produce a usable result (CLI exit code 3)."""
