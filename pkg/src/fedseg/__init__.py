"""Cross-domain federated U-Net training: FedAvg rounds over in-process or TCP transports."""

from .data import Dataset, DomainSpec, generate, load, save, split
from .federation import FedConfig, FedMessage, Kind, decode, diff_norm, encode, fedavg
from .metrics import EvalReport, bbox, binarize, dice, evaluate, overlap_similarity
from .params import ParameterSet
from .runtime import run_client, run_server, simulate, train_local
from .tensor import Rng
from .unet import UNet, UNetConfig, train_step

__version__ = "0.1.0"

__all__ = [
    "Dataset", "DomainSpec", "EvalReport", "FedConfig", "FedMessage", "Kind", "ParameterSet",
    "Rng", "UNet", "UNetConfig", "bbox", "binarize", "decode", "dice", "diff_norm", "encode",
    "evaluate", "fedavg", "generate", "load", "overlap_similarity", "run_client", "run_server",
    "save", "simulate", "split", "train_local", "train_step",
]
