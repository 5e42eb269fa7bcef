"""Causal forests with two-way fixed effects for country panels.

The usual entry points::

    from cffe import load_panel, fit_forest, dynamic_att
    ds = load_panel(open("panel.csv", "rb").read(), PanelSchema(features=("gdp_pc",)))
    model = fit_forest(ds, ForestConfig(n_trees=500))
    curve = dynamic_att(model, ds)
"""

from .dgp import DgpSpec, generate_panel, true_att
from .effects import (counterfactual_predict, country_trajectories, cumulative_effects, dynamic_att,
                      group_att, median_split)
from .errors import CffeError
from .estimators import callaway_santanna, interactive_fe, sun_abraham, twfe_did, twfe_event_study
from .forest import ForestConfig, ForestModel, feature_importance, fit_forest, predict_cate
from .inference import (block_bootstrap, cluster_robust_var, leave_one_out, placebo_fake_dates,
                        placebo_nontreated, pretrends_test)
from .panel import PanelDataset, PanelSchema, load_panel

__all__ = [
    "CffeError", "DgpSpec", "ForestConfig", "ForestModel", "PanelDataset", "PanelSchema",
    "block_bootstrap", "callaway_santanna", "cluster_robust_var", "counterfactual_predict",
    "country_trajectories", "cumulative_effects", "dynamic_att", "feature_importance", "fit_forest",
    "generate_panel", "group_att", "interactive_fe", "leave_one_out", "load_panel", "median_split",
    "placebo_fake_dates", "placebo_nontreated", "predict_cate", "pretrends_test", "sun_abraham",
    "true_att", "twfe_did", "twfe_event_study",
]
