"""GCVAMD: graph-autoencoder CausalVAE for causal AMD factor analysis.

Library surface:

- :mod:`gcvamd.graph` -- weighted adjacency, acyclicity penalty, dual updates,
  binarization, structural Hamming distance
- :mod:`gcvamd.layers` -- block-masked per-node MLPs and the two SCM transforms
- :mod:`gcvamd.model` -- the assembled VAE with causal layer, losses,
  interventions, and traversals
- :mod:`gcvamd.training` -- two-phase DAG-constrained schedule, tabular graph
  autoencoder, Adam steps, checkpoints
- :mod:`gcvamd.metrics` -- lasso, relevance/disentanglement scores,
  classification metrics
- :mod:`gcvamd.downstream` -- baseline conv AE vs causality-augmented classifier
- :mod:`gcvamd.data` -- OCTDL ingestion, preprocessing, splits, synthetic
  causal image generator
- :mod:`gcvamd.cli` -- reproducible command-line runs
"""

from gcvamd.graph import (
    AugLagState,
    BinaryGraph,
    WeightedAdjacency,
    acyclicity_grad,
    acyclicity_h,
    auglag_update,
    binarize_top_fraction,
    matrix_exponential,
    shd,
)

__version__ = "0.1.0"
