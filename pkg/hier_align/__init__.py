"""hier_align - hierarchical text-conditioned contrastive alignment on a synthetic grid world."""

__version__ = "0.1.0"
