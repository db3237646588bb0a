"""Sparse variational Gaussian process classification from crowdsourced labels."""
from .crowd import AnnotationSet, CrowdPosterior, LabelPosterior
from .kernel import SEKernelParams
from .likelihood import RobustMax
from .simulator import AnnotatorSpec, controlled_annotators, generate_annotations, make_toy_dataset
from .sparse_gp import VariationalGP
from .trainer import SVGPCR, ElboBreakdown, TrainConfig, Trainer, predict_proba, train

__version__ = "0.1.0"
