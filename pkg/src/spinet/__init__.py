"""spinet: permutation-invariant super-resolved segmentation of image stacks.

The package is organized as a small numpy-based library:

  tensor   autodiff engine (Tensor, Tape, backward, Adam)
  ops      network primitives (conv, batch-norm, attention, resampling, BCE)
  blocks   equivariant building blocks and the fusion heads
  model    the assembled network, its config and checkpoints
  data     synthetic scenes, frame selection, patches, sample files
  metrics  confusion counts, MCC, the NDVI baseline, reports
  trainer  deterministic training loop and evaluation
  cli      the `spinet` command-line entry point

Setting the SPINET_THREADS environment variable before the first import caps
the BLAS thread pools used for the heavy linear algebra.
"""

import os as _os

if _os.environ.get("SPINET_THREADS"):
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["SPINET_THREADS"])

from . import blocks, data, metrics, ops, trainer  # noqa: E402
from .errors import SpinetError  # noqa: E402
from .model import SPInet, SPInetConfig, load_checkpoint, parameter_count, restore_model, save_checkpoint  # noqa: E402
from .tensor import Parameter, Tape, Tensor, adam_step, backward, no_grad  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "SPInet",
    "SPInetConfig",
    "SpinetError",
    "Parameter",
    "Tape",
    "Tensor",
    "adam_step",
    "backward",
    "blocks",
    "data",
    "load_checkpoint",
    "metrics",
    "no_grad",
    "ops",
    "parameter_count",
    "restore_model",
    "save_checkpoint",
    "trainer",
    "__version__",
]
