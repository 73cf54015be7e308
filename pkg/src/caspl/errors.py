"""Exception hierarchy shared by every layer of the lab.

The CLI maps these onto exit codes, so keep the classes coarse.
"""


class CasplError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ConfigError(CasplError, ValueError):
    exit_code = 2


class DataError(CasplError, ValueError):
    exit_code = 2


class ContractError(CasplError, RuntimeError):
    exit_code = 4


class ShapeError(ContractError, ValueError):
    """Operand shapes do not conform for an op kind."""

    def __init__(self, kind, *shapes, detail=""):
        self.kind = kind
        self.shapes = tuple(tuple(s) for s in shapes)
        shown = " vs ".join(str(list(s)) for s in self.shapes)
        msg = f"{kind}: incompatible shapes {shown}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class DomainError(ContractError, ValueError):
    """An argument lies outside the mathematical domain of an op."""
