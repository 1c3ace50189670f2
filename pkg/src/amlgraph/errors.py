"""Exception hierarchy shared by all amlgraph modules."""


class AmlGraphError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(AmlGraphError):
    """Invalid configuration value or combination (ratios, dims, k, ...)."""


class DimensionError(AmlGraphError):
    """Tensor or parameter shapes do not line up."""


class IngestError(AmlGraphError):
    """Raw input records are malformed or inconsistent (missing profile,
    duplicate transaction id, bad feature width)."""


class SamplingError(AmlGraphError):
    """Negative sampling could not find enough non-edges."""


class MetricError(AmlGraphError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class NumericalError(AmlGraphError):
    """Non-finite value where a finite one is required (diverged training,
    zero-norm vector in a cosine)."""
