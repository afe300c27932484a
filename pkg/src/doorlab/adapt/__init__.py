"""Image distortions and sim<->real domain adapters."""
from .augment import AugmentConfig, augment
from .oracle import DomainAdapter, ReplayResolver, TableResolver, adapt_oracle

__all__ = ["AugmentConfig", "augment", "DomainAdapter", "ReplayResolver", "TableResolver",
           "adapt_oracle", "adapt_learned", "train_cyclegan"]


def __getattr__(name):
    # torch is only imported when a learned adapter is actually requested
    if name in ("adapt_learned", "train_cyclegan", "GeneratorHandle", "GanConfig"):
        from . import cyclegan
        return getattr(cyclegan, name)
    raise AttributeError(name)
