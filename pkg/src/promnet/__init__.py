"""PROM-Net: encoder-decoder ConvLSTM video prediction in plain numpy."""
from .model import FcLstm, FcLstmConfig, PromNet, PromNetConfig, build_model, param_count, predict_sequence

__version__ = "0.1.0"

__all__ = ["FcLstm", "FcLstmConfig", "PromNet", "PromNetConfig", "build_model", "param_count",
           "predict_sequence", "__version__"]
