"""Train, compress and benchmark a small gesture-recognition CNN for edge deployment."""

__version__ = "0.1.0"

from .estimator import GestureCNNClassifier, QuantizedClassifier  # noqa: E402
from .model import (Checkpoint, DeployedModel, ModelGraph, build, export_deployed,  # noqa: E402
                    infer, load_checkpoint, load_deployed, param_count, save_checkpoint,
                    save_deployed)

__all__ = ["GestureCNNClassifier", "QuantizedClassifier", "Checkpoint", "DeployedModel",
           "ModelGraph", "build", "export_deployed", "infer", "load_checkpoint", "load_deployed",
           "param_count", "save_checkpoint", "save_deployed"]
