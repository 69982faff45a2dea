"""Meta-surrogate training and transfer-attack evaluation.

Train a surrogate classifier so that white-box attacks crafted on it transfer
to unseen black-box models, and measure transfer success against a locally
trained model zoo.
"""

from .attacks import (AttackConfig, GradientEnsemble, cross_entropy,
                      customized_pgd, diverse_input_pgd, fgsm,
                      gradient_ensemble, input_gradient, momentum_pgd, pgd)
from .batch import ExampleBatch
from .datasets import dataset_available, dataset_info, load_dataset
from .errors import (CheckpointError, ConfigError, DataError,
                     MetaSurrogateError, NumericError)
from .evaluate import (EnsembleClassifier, EvalSpec, SurrogateSpec,
                       TransferReport, ensemble_logits, filter_correct,
                       sweep, targeted_eval, transfer_eval)
from .meta import (MetaTrainConfig, MetaTrainLog, epsilon_c_schedule,
                   meta_step, train_msm)
from .models import ArchitectureSpec, Classifier, build_model, resnet13_spec
from .zoo import (AdversarialRecipe, Checkpoint, CheckpointMetadata,
                  TrainRecipe, adversarial_train, load_checkpoint,
                  save_checkpoint, train_classifier)

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "GradientEnsemble", "cross_entropy", "customized_pgd",
    "diverse_input_pgd", "fgsm", "gradient_ensemble", "input_gradient",
    "momentum_pgd", "pgd", "ExampleBatch", "dataset_available", "dataset_info",
    "load_dataset", "CheckpointError", "ConfigError", "DataError",
    "MetaSurrogateError", "NumericError", "EnsembleClassifier", "EvalSpec",
    "SurrogateSpec", "TransferReport", "ensemble_logits", "filter_correct",
    "sweep", "targeted_eval", "transfer_eval", "MetaTrainConfig",
    "MetaTrainLog", "epsilon_c_schedule", "meta_step", "train_msm",
    "ArchitectureSpec", "Classifier", "build_model", "resnet13_spec",
    "AdversarialRecipe", "Checkpoint", "CheckpointMetadata", "TrainRecipe",
    "adversarial_train", "load_checkpoint", "save_checkpoint",
    "train_classifier",
]
