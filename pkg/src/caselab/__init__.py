"""Few-shot adaptation of a frozen convolutional body with contextual channel scaling."""
from .adapters import CaseBlock, CaseConfig, FilmLiteGenerator, SeBlock, count_adapter_params
from .backbone import Backbone, BackboneSpec, StageSpec, dump_gamma_stats, pretrain
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import SyntheticCostTask, adaptation_cost
from .episodes import SamplerConfig, SyntheticDomain, Task, TaskSampler, default_domains
from .heads import EmbeddingBuffer, LinearHead, fit_head, fit_mahalanobis, fit_proto, predict
from .tensor import Tensor
from .trainer import BaselineConfig, TrainerConfig, evaluate, meta_train

__version__ = "0.1.0"
