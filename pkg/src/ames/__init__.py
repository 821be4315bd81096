"""Asymmetric, memory-efficient similarity between sets of local descriptors.

Modules:

* ``numerics``: erf, GELU, layer norm and masked multi-head attention.
* ``model``: the transformer that scores a pair of descriptor sets.
* ``codec``: fp and binary projections, ITQ, product quantization.
* ``training``: losses, analytic gradients, AdamW and the training loop.
* ``store``: the on-disk descriptor database.
* ``retrieval``: global ranking, ensemble re-ranking and its tuning.
* ``evaluation``: mAP variants, memory accounting, trade-off export.
* ``synthgen``: deterministic synthetic datasets.
"""

__version__ = "0.1.0"
