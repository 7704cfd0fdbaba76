"""Exception types shared across the package."""


class LayerQuantError(Exception):
    pass


class FormatError(LayerQuantError):
    """Malformed container file (bad header, overlapping or out-of-range extents)."""


class UnsupportedDtype(LayerQuantError):
    pass


class IoError(LayerQuantError, OSError):
    pass


class InvalidInput(LayerQuantError, ValueError):
    pass


class ConfigError(LayerQuantError, ValueError):
    pass


class PlanMismatch(LayerQuantError, ValueError):
    pass


class DegenerateActivations(LayerQuantError):
    pass


class DegenerateBudget(LayerQuantError, ValueError):
    pass


class EmptyCorpus(LayerQuantError):
    pass
