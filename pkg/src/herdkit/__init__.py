"""Peer-group self-distillation of randomly initialized networks, with probing tools."""

from .config import ExperimentConfig, MetricsLog, ProbeConfig, derive_seed, load_config
from .herd import PeerPool, sample_roles, sgd_step, train, train_batch
from .losses import cosine_loss, mse_loss, salient_loss
from .models import embed, init_model, load_checkpoint, param_count, save_checkpoint

__version__ = "0.1.0"
