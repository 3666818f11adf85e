"""Optimizers, checkpoints, run configs, training loops and command implementations."""

from .checkpoint import Checkpoint, CheckpointError, CheckpointNotFoundError, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, save_config
from .optim import SGD, Adam, make_optimizer
from .trainer import NonFiniteLossError, evaluate, pretrain_backbone, train
