"""heaprlab: a desk-scale laboratory for second-order pruning of toy MoE language models.

The package decomposes gated feed-forward experts into per-channel atomic
units, estimates each unit's contribution to the loss with a shared-gradient
covariance (one extra forward pass and one backward pass over a calibration
set), and prunes the least important units globally across layers.  Every
estimate is backed by an independent measurement oracle (finite differences,
explicit ablation) so the approximations can be audited end to end.
"""

from . import baselines, bench, core_math, heapr, model, oracle

__version__ = "0.1.0"

__all__ = ["core_math", "model", "heapr", "baselines", "oracle", "bench", "__version__"]
