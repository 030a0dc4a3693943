"""Single-stage weakly supervised segmentation with feature self-reinforcement.

Modules: ``synthdata`` (toy dataset), ``encoder`` (ViT), ``cam``, ``masking``,
``aggregation``, ``distill``, ``decoderlosses``, ``trainer``, ``evalkit`` and
the ``fsr`` command line in ``cli``.
"""

__version__ = "0.1.0"
