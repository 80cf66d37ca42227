class InvalidArgument(ValueError):
    pass


class EmptyValidityError(ValueError):
    """Raised when a warp leaves no valid pixel to average a loss over."""


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term, value=None):
        self.term = term
        super().__init__(f"loss term {term!r} is not finite ({value})")


class AggregationError(ValueError):
    pass


class IngestionError(OSError):
    def __init__(self, missing):
        self.missing = list(missing)
        listing = "\n  ".join(str(p) for p in self.missing)
        super().__init__(f"missing input files:\n  {listing}")


class EvaluationError(ValueError):
    pass


class ConfigError(ValueError):
    pass
