"""Exception types shared across the library."""


class TripnetError(Exception):
    """Base class for all library errors."""


class DimensionError(TripnetError):
    """Shapes of operands are incompatible."""


class NumericError(TripnetError):
    """Non-finite values where finite ones are required."""


class ContractError(TripnetError):
    """A documented precondition was violated by the caller."""


class CategoricalDomainError(ContractError):
    """A categorical code lies outside its attribute's domain."""


class UsageError(TripnetError):
    """API misuse, e.g. backward pass on an inference-mode state."""


class IngestionError(TripnetError):
    """Input data could not be joined or parsed."""


class ParseError(IngestionError):
    """A delimited input file failed to parse; message cites file and line."""

    def __init__(self, path, line_no, message, column=None):
        self.path = path
        self.line_no = line_no
        self.column = column
        where = f"{path}, line {line_no}"
        if column is not None:
            where += f", column {column}"
        super().__init__(f"{where}: {message}")
