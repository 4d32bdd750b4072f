"""Multi-perspective feedback-attention coupling for continuous-time dynamic graphs."""

from .events import EventStream, SplitPlan, chronological_split, inductive_mask, load_csv, synth_recurrent
from .model import MPFA, ModelConfig
from .state import TemporalState
from .training import EvalReport, TrainConfig, evaluate_linkpred, node_classification, train

__all__ = [
    "EventStream", "SplitPlan", "chronological_split", "inductive_mask", "load_csv", "synth_recurrent",
    "MPFA", "ModelConfig", "TemporalState",
    "EvalReport", "TrainConfig", "evaluate_linkpred", "node_classification", "train",
]

__version__ = "0.1.0"
