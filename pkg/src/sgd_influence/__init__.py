"""Training-data influence by backward linear influence estimation over logged
SGD, with a final-parameters-only cache variant, and influence-based data
cleansing."""
__version__ = "0.1.0"

from ._backend import BACKEND
from .cache import CheckpointPolicy, InfluenceCache, cache_stats, read_cache, write_cache
from .dataset import Dataset, Instance, NoiseReport, gen_blobs, inject_label_noise, load_csv, split
from .influence import InfluenceMode, InfluenceScores, QueryVector, lie_backward, query_from_validation, rank_instances
from .model import ModelSpec, batch_grad, grad, hvp, hvp_fd, init_params, loss, predict_accuracy
from .oracle import LOOResult, exhaustive_loo, loo_true_influence, rank_agreement
from .pipeline import BlobsProtocol, CleanseConfig, Strategy, cleanse_once, cleanse_sweep
from .trainer import Schedule, TrainConfig, counterfactual_train, make_schedule, steps_per_epoch, train
