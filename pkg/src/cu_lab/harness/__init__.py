from .config import EvalConfig, RunConfig, TrainConfig, load_config, parse_config, preset_names
from .train import RunRecord, evaluate, make_splits, train

__all__ = ["EvalConfig", "RunConfig", "TrainConfig", "load_config", "parse_config", "preset_names",
           "RunRecord", "evaluate", "make_splits", "train"]
