"""Cross-silo federated learning simulation and benchmark harness."""

from .data import (
    ClientDataset,
    ClientSpec,
    DirichletSplitConfig,
    FederatedDataset,
    Split,
    SynthSpec,
    dirichlet_resplit,
    gen_synthetic_classification,
    gen_synthetic_survival,
    load_csv,
    pooled_view,
    save_csv,
)
from .models import FocalConfig, LinearModel, LocalUpdateConfig, sgd_local_update
from .strategies import (
    StrategyConfig,
    compute_round_budget,
    evaluate_federated,
    personalize,
    train_local,
    train_pooled,
    train_strategy,
)

__version__ = "0.1.0"
