"""spherecloud: a desk-scale lab for hyperspherical embeddings in
encoder-decoder point-cloud completion."""

__version__ = "0.1.0"

from .gradcore import Tensor, Tape, backward, finite_diff_check  # noqa: F401
from .hypersphere import (  # noqa: F401
    EmbeddingBatch,
    HypersphereConfig,
    normalize,
    normalize_backward_l2,
    sgd_norm_trace,
)
