"""fedgeo: a deterministic, desk-scale federated-learning simulator.

Clients distill a frozen teacher encoder from augmented student encoders, then
train a student network under a composite objective that combines plain
cross-entropy, teacher distillation, geometry-guided embedding augmentation, a
multi-prototype regularizer, and an additive angular-margin loss.  The server
pools per-class covariance statistics into global geometric shapes, averages
models, and aggregates prototypes.  Every run is a pure function of its
configuration and master seed.
"""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config, save_config
from .data import (Augmentation, Partition, Sample, augment, dirichlet_partition,
                   load_csv, make_synthetic, write_partition_csv)
from .distill import (PretrainConfig, PretrainResult, combine_students, kd_loss,
                      pretrain_ce_loss, pretrain_teacher)
from .eig import EigenPairs, sym_eig
from .errors import (ContractError, DomainError, FedGeoError, NumericError,
                     ParseError, ShapeError)
from .federation import (ClientState, DownlinkMessage, RunLog, ServerState,
                         UplinkMessage, client_update, evaluate_params, fedavg,
                         run_round, run_training, select_clients)
from .geometry import (ClassStats, GeometricShape, augment_embedding,
                       ce_loss_augmented, local_class_stats, make_global_vector,
                       pool_global_cov)
from .harness import compare, partition_audit, run_experiment
from .metrics import MetricsRow, compute_metrics
from .models import (EncoderConfig, ModelParams, classifier_forward,
                     encoder_forward, init_params, load_checkpoint,
                     projection_forward, save_checkpoint, sgd_step)
from .objective import LossWeights, arcface_loss, ce_original, total_loss
from .prototypes import (KMeansResult, PrototypeSet, aggregate_prototypes, kmeans,
                         local_prototypes, proto_regularizer)
from .seeds import derive_seed
from .tensor import GradTape, Tensor, backward, softmax_with_temperature
