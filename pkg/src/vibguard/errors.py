"""Exception types shared across the package.

The CLI maps each class to a distinct exit code.
"""


class VibguardError(Exception):
    exit_code = 1


class InvalidInputError(VibguardError, ValueError):
    exit_code = 2


class StateError(VibguardError, RuntimeError):
    exit_code = 3


class DegenerateInputError(VibguardError, ValueError):
    exit_code = 4
