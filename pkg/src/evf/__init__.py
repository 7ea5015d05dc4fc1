__all__ = [
    "Graph",
    "ParamStore",
    "ObjectSpec",
    "DatasetFile",
    "generate_dataset",
    "generate_corpus",
    "read_dataset",
    "load_split",
    "ModelConfig",
    "SupportSet",
    "Batch",
    "VisualForesight",
    "TrainConfig",
    "train_loop",
    "EvalReport",
    "best_of_k_eval",
    "embedding_separation",
    "pca_project",
    "PlanConfig",
    "cem_plan",
    "make_task",
    "mpc_run",
    "report_control",
]

from evf.autodiff import Graph, ParamStore
from evf.pushworld import ObjectSpec, DatasetFile, generate_dataset, generate_corpus
from evf.pushworld import read_dataset, load_split
from evf.model import ModelConfig, SupportSet, Batch, VisualForesight
from evf.training import TrainConfig, train_loop
from evf.metrics import EvalReport, best_of_k_eval, embedding_separation, pca_project
from evf.planner import PlanConfig, cem_plan, make_task, mpc_run, report_control

try:
    from importlib import metadata
except ImportError:  # for Python<3.8
    import importlib_metadata as metadata
try:
    __version__ = metadata.version("evf")
except Exception:
    __version__ = "999"
