"""Select the compiled kernels when importable, else the pure-Python twins.

Set ``FUSIONFORGE_PURE=1`` to force the fallback.
"""

import logging
import os

logger = logging.getLogger(__name__)

NAME = "python"

if os.environ.get("FUSIONFORGE_PURE", "") not in ("", "0"):
    from ._fallback import (  # noqa: F401
        logistic_loss_grad,
        lstm_layer_backward,
        lstm_layer_forward,
        soft_threshold,
        xoshiro_noise,
        xoshiro_uniform,
    )
else:
    try:
        from ._kernels import (  # noqa: F401
            logistic_loss_grad,
            lstm_layer_backward,
            lstm_layer_forward,
            soft_threshold,
            xoshiro_noise,
            xoshiro_uniform,
        )

        NAME = "cython"
    except ImportError:
        logger.debug("compiled kernels unavailable, using pure-Python fallback")
        from ._fallback import (  # noqa: F401
            logistic_loss_grad,
            lstm_layer_backward,
            lstm_layer_forward,
            soft_threshold,
            xoshiro_noise,
            xoshiro_uniform,
        )

