"""Exception types shared across the package."""


class FineGatesError(Exception):
    pass


class DimensionError(FineGatesError, ValueError):
    pass


class ContractError(FineGatesError, ValueError):
    pass


class NumericError(FineGatesError, ArithmeticError):
    pass


class ConfigError(FineGatesError, ValueError):
    pass


class InputError(FineGatesError, ValueError):
    pass


class FormatError(FineGatesError, ValueError):
    """Malformed checkpoint bytes; ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DegenerateLayerError(FineGatesError):
    def __init__(self, layer, message=None):
        super().__init__(message or f"layer {layer!r} would have no rows or no columns left")
        self.layer = layer
