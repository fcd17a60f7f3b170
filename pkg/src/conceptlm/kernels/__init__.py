"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The backend is chosen once at import time from the CONCEPTLM_BACKEND
environment variable:

    auto   (default)  use numba when importable, else numpy
    numba             require numba, fail loudly if missing
    numpy             force the pure-numpy fallback

`BACKEND` records the active choice. Both implementation modules stay
importable side by side so the benchmark suite can compare them directly.
"""

import os

from . import numpy_impl
from ..errors import ConfigError

_requested = os.environ.get("CONCEPTLM_BACKEND", "auto").lower()
if _requested not in ("auto", "numba", "numpy"):
    raise ConfigError(
        f"CONCEPTLM_BACKEND must be auto, numba, or numpy, got {_requested!r}"
    )

if _requested in ("auto", "numba"):
    try:
        from . import numba_impl as _impl
        BACKEND = "numba"
    except ImportError:
        if _requested == "numba":
            raise
        _impl = numpy_impl
        BACKEND = "numpy"
else:
    _impl = numpy_impl
    BACKEND = "numpy"

layernorm_fwd = _impl.layernorm_fwd
layernorm_bwd = _impl.layernorm_bwd
gelu_fwd = _impl.gelu_fwd
gelu_bwd = _impl.gelu_bwd
causal_softmax = _impl.causal_softmax
causal_softmax_bwd = _impl.causal_softmax_bwd
softmax_rows = _impl.softmax_rows
ntp_terms = _impl.ntp_terms
concept_losses = _impl.concept_losses
concept_dlogits = _impl.concept_dlogits
embedding_grad = _impl.embedding_grad
adam_step = _impl.adam_step
bootstrap_means = _impl.bootstrap_means

KERNEL_NAMES = [
    "layernorm_fwd", "layernorm_bwd", "gelu_fwd", "gelu_bwd",
    "causal_softmax", "causal_softmax_bwd", "softmax_rows", "ntp_terms",
    "concept_losses", "concept_dlogits", "embedding_grad", "adam_step",
    "bootstrap_means",
]
