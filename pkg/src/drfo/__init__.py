"""Fair matrix-factorization recommendation when sensitive attributes are only
partly known: reconstruction of missing attributes, total-variation ambiguity
sets around the reconstructed groups, and robust min-max fair training."""

__version__ = "0.1.0"
