"""Target-speaker-conditioned masked prediction pre-training at desk scale.

Modules: ``numerics`` (primitives and gradient checks), ``mixsim`` (synthetic
mixtures), ``frontend``, ``masking``, ``spkemb``, ``sate`` (speaker adapted
encoder), ``quantizer`` (k-means pseudo-labels), ``objective``, ``model``,
``trainer``, ``evalsuite`` and ``cli``.
"""
from .config import RunConfig, load_config

__all__ = ["RunConfig", "load_config"]
__version__ = "0.1.0"
