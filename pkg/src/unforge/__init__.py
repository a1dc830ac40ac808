"""Machine unlearning driven by dataset condensation.

The pipeline reduces the retain set through per-class feature clustering,
cluster condensation, and a collection protocol, then unlearns through a
three-segment modular training schedule with full instrumentation.
"""

__version__ = "0.1.0"

from .data import (DatasetBundle, ForgetSpec, LabeledDataset, SplitView, class_view,
                   load_dataset, make_synthetic_gaussians, split_forget_retain)
from .nnkit import (PartitionedModel, Snapshot, TrainConfig, build_model, features,
                    load_snapshot, restore, save_snapshot, snapshot, train_segments)
from .clustering import ClusterIndex, cluster_per_class
from .condense import CondensedSet, InverterNet, condense_fdm, condense_inversion
from .collect import (EtaEstimate, ReducedRetainSet, collect_reduced_retain,
                      coupon_collector_first_coverage, eta_analytic, eta_monte_carlo,
                      min_retain_threshold)
from .modular import (ModularSchedule, OfflineSchedule, OnlineSchedule, RemembranceSet,
                      draw_remembrance, eta_epoch_rule, intermediate_gradient_profile,
                      offline_phase, online_phase)
from .metrics import (MiaPopulation, RbeTable, UnlearnReport, accuracy,
                      hessian_eigen_diagnostic, layer_gradient_profile, mia_logistic,
                      mia_shadow, overfitting_metric, rbe, unlearning_metric,
                      unlearning_metric_from_grads)
from .baselines import BaselineConfig, run_baseline
from .applications import (CondensedModel, OverfitPartition, condensed_model_unlearn,
                           invert_unlearned, mia_defense, otsu_threshold)
