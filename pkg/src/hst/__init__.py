"""Hierarchical side-tuning of a frozen vision transformer.

A frozen plain-ViT backbone is extended with trainable meta tokens and
LayerNorm parameters; per-block activations flow through a shared-weight
feature bridge into a four-stage side network that emits a stride-
{4,8,16,32} feature pyramid and the classification output.
"""

__version__ = "0.1.0"
