"""Fairness-aware training of dense networks with variance, invariance and
covariance loss terms, plus group and counterfactual fairness evaluation."""

from fairvic.data import Dataset, DatasetSchema, builtin_schema, load_builtin, load_csv
from fairvic.losses import LambdaWeights, LossBreakdown, VarianceConfig
from fairvic.metrics import MetricReport, counterfactual_report, evaluate
from fairvic.nn import Network, forward, init_network
from fairvic.train import TrainConfig, train

__version__ = "0.1.0"
