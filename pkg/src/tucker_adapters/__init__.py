"""Tensor-factorized adapters with a lifelong-learning pipeline.

The library decomposes per-scenario weight updates for a frozen backbone
into a shared Tucker core with scene- and environment-expert rows, trains
them sequentially with consolidation losses, selects experts at inference
by cosine retrieval, synthesizes degraded imagery with physical models, and
scores navigation episodes with success and forgetting metrics.
"""

from .adapters import (
    AbcLoraAdapter,
    AdapterBase,
    LoraAdapter,
    Selection,
    SharedAMoeAdapter,
    Tucker3Adapter,
    Tucker5Adapter,
    TuckerAdapter,
    init_adapter,
)
from .config import ConfigError, ExperimentConfig
from .metrics import (
    EpisodeRecord,
    TaskScore,
    forgetting_rate,
    oracle_success,
    spl,
    success_rate,
)
from .retrieval import FeatureStore, cosine_sim
from .tasks import (
    SyntheticEpisode,
    TaskDescriptor,
    ToyBackbone,
    World,
    WorldConfig,
    gen_episode,
    gen_stream,
)
from .tensor_ops import (
    contract_adapter,
    frobenius_norm_sq,
    hadamard,
    mode_n_product,
    row_normalize,
    tucker_reconstruct,
)
from .training import AdamState, Hyper, adam_step, fisher_ema, fisher_estimate

__version__ = "0.1.0"
