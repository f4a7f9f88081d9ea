"""Adaptive early-exit classification of 1-D spectral curves."""

from .dataset import (ClassRecipe, DatasetError, DatasetParseError,
                      DegenerateCurveError, Peak, SpectralCurve, build_dataset,
                      default_recipes, load_dataset, load_recipes, normalize,
                      peak_positions, save_dataset, save_recipes, split_dataset,
                      synth_curve)
from .halting import (HaltingParams, HaltingTrace, halting_schedule, halting_score,
                      pa_block_forward, ponder_cost_block, write_traces_csv)
from .network import (ExitOutcome, ExitStage, ScaiConfig, ScaiModel, block_widths,
                      build_model, clone_config, forward_all_outcomes,
                      forward_to_exit, iter_exit_stages, load_checkpoint,
                      save_checkpoint, static_cost_table, write_cost_table_csv)
from .optim import AdamState, adam_step, init_adam, zero_grads
from .policy import (BudgetPlan, InfeasibleBudgetError, Prediction,
                     accuracy_vs_budget_curve, anytime_predict,
                     budgeted_batch_predict, calibrate_thresholds,
                     collect_confidences, exit_probabilities, load_thresholds,
                     plan_budget, save_thresholds, solve_budget, truncated_predict,
                     write_budget_curve_csv)
from .simulate import (BudgetModel, ChecksumError, DeviceProfile, SimResult,
                       deserialize_features, latency_report, load_scenario,
                       run_query, save_scenario, serialize_features, simulate,
                       write_sim_csv)
from .tensor import (NonFiniteError, ShapeError, Tensor, conv1d, cross_entropy,
                     global_avg_pool, kl_div, linear, no_grad, relu, sigmoid,
                     softmax)
from .training import (TrainReport, evaluate_exits, hyper_sweep, task_loss,
                       total_loss, train, write_report_csv, write_sweep_csv)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
