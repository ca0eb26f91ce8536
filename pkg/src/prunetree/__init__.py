"""CKA-guided structured pruning: choose between dropping a residual block and
dropping filters at every step by comparing recovered candidates to their parent."""

from .nn import (
    ConvSpec, BlockSpec, Stage, NetworkSpec, ModelState, TrainConfig,
    resnet_spec, dense_spec, init_model, forward, train, evaluate,
    extract_representation, count_flops,
)
from .similarity import RepMatrix, LinearCKA, RbfCKA, gram, hsic, cka
from .structures import LayerBlock, FilterGroup
from .criteria import kl_score, l1_score, rank_structures
from .surgery import remove_block, remove_filters, make_candidates
from .engine import EngineConfig, prune_step, run, run_random_walk, summarize_trace

__version__ = "0.1.0"
