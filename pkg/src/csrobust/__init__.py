"""Cost-sensitive certified robustness for ReLU classifiers."""

from .cost import CostMatrix, make_task
from .estimator import CertifiedRobustClassifier
from .model import Network, load, save

__all__ = ["CertifiedRobustClassifier", "CostMatrix", "Network", "load", "make_task", "save"]
__version__ = "0.1.0"
