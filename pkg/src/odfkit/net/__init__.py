from .checkpoint import load_checkpoint, save_checkpoint
from .model import MiniOdfNet, NetConfig, forward, init_net, loss_and_grads, prepare_input
from .train import TrainConfig, contribution_map, evaluate, predict_with_voting, train

__all__ = [
    "load_checkpoint", "save_checkpoint", "MiniOdfNet", "NetConfig", "forward", "init_net",
    "loss_and_grads", "prepare_input", "TrainConfig", "contribution_map", "evaluate",
    "predict_with_voting", "train",
]
