"""Speaker-verification backend toolkit.

Scores (enrollment, test) embedding pairs with a generative PLDA backend,
a pairwise Gaussian backend, a discriminatively trained PLDA and a neural
PLDA network optimized with a differentiable detection-cost loss.
"""

__version__ = "0.1.0"
