"""Orthogonalized-momentum optimizers and a desk-scale benchmark harness
for small sequential recommendation models.

Submodules:
    linalg   dense kernels, Jacobi SVD oracle, Newton-Schulz orthogonalization
    optim    Adam/AdamW and Muon steppers plus the hybrid group dispatcher
    model    two tiny recommenders with exact hand-derived gradients
    data     interaction-log ingestion, filtering, splitting, batching
    metrics  top-K ranking metrics and convergence tracking
    harness  experiment runner, sweeps, comparison reports
    cli      command-line entry points
"""

__version__ = "0.1.0"
