from .checkpoint import CheckpointError, load_net, net_from_bytes, net_to_bytes, save_net
from .network import NoiseNet, net_forward, time_embedding
from .sampling import denoise_one_step, sample_ddim, sample_em
from .schedule import Schedule, perturb, schedule_eval
from .training import NonFiniteLoss, TrainConfig, dsm_loss, loss_and_grad, loss_weight, train, train_step

__all__ = [
    "CheckpointError",
    "load_net",
    "save_net",
    "net_from_bytes",
    "net_to_bytes",
    "NoiseNet",
    "net_forward",
    "time_embedding",
    "denoise_one_step",
    "sample_ddim",
    "sample_em",
    "Schedule",
    "perturb",
    "schedule_eval",
    "NonFiniteLoss",
    "TrainConfig",
    "dsm_loss",
    "loss_and_grad",
    "loss_weight",
    "train",
    "train_step",
]
