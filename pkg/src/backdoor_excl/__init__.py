"""Backdoor exclusivity: poisoned training with cover samples, trigger upper-bound
measurement and desk-scale defenses."""

__version__ = "0.1.0"

from .datasets import LabeledDataset, load_dataset, make_synthetic_dataset, write_packed
from .errors import (ConfigError, ContractViolation, DatasetLoadError, DegenerateNormError,
                     DegenerateTriggerError, TrainingDivergedError, UninitializedCenterError)
from .exclusivity import (BoundResult, ExclConfig, ExclReport, ObjectiveMode, line_search_bound,
                          measure_exclusivity, optimize_trigger_upper_bound, run_ablation,
                          sample_exclusivity)
from .model import (FeatureSplitClassifier, ModelConfig, build_model, load_checkpoint,
                    predict_from_logits, save_checkpoint)
from .poisoning import PoisonConfig, PoisonedDataset, build_poisoned_dataset
from .training import (CenterBank, TrainConfig, TrainReport, evaluate_asr, evaluate_cda, loss_do,
                       loss_mc, loss_mo, train_backdoored_model, update_centers)
from .triggers import (CoverMethod, CoverTrigger, PerturbationBoundary, TriggerKind, TriggerSpec,
                       apply_perturbed_trigger, apply_trigger, make_cover_trigger,
                       perturbation_boundary, trigger_from_dict, trigger_to_dict)
