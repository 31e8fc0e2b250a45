"""Multi-modal in-context regression with linear attention stacks."""

import logging

__version__ = "0.1.0"

# library convention: stay silent unless the application configures logging
logging.getLogger(__name__).addHandler(logging.NullHandler())

from .datagen import (  # noqa: E402
    DataConfig,
    MDistribution,
    Prompt,
    PromptBatch,
    TaskParams,
    bayes_predict,
    sample_batch,
    sample_prompt,
    sample_prompts,
    sample_task,
)
from .attention import (  # noqa: E402
    CaParams,
    LsaParams,
    SampleMean,
    frozen_readout,
    lca_embed,
    lca_embed_closed_form,
    lsa_forward,
    predict,
    predict_batch,
)
from .losses import QuadratureSpec, ZMoments  # noqa: E402
from .optim import OptimConfig, Trajectory, fit_single_lsa, minimize_1d, train  # noqa: E402
