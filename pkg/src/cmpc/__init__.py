"""Cross-modal prototype contrastive learning on a synthetic benchmark."""

__version__ = "0.1.0"

from .clustering import PrototypeSet, build_prototypes, kmeans
from .data import (
    DatasetSplit,
    InstanceRecord,
    TrainingData,
    WorldConfig,
    generate,
    load_dataset,
    save_dataset,
    split_by_identity,
    training_arrays,
)
from .losses import (
    LossBreakdown,
    LossConfig,
    SimilarityBatch,
    cid_loss,
    cmpc_loss,
    prototype_loss,
    similarity_batch,
    similarity_gradients,
)
from .memory import MemoryBank
from .nn import Adam, LrSchedule, MlpEncoder
from .protocols import (
    EmbeddingSet,
    EvalReport,
    build_trials,
    embed_instances,
    evaluate,
    matching_accuracy,
    retrieval_map,
    verification_auc,
)
from .recalibration import (
    RecalibrationState,
    build_recalibration,
    deviation_scores,
    recalibration_weight,
    weighted_loss,
)
from .trainer import (
    TrainConfig,
    TrainState,
    load_checkpoint,
    run_training,
    save_checkpoint,
    train,
)
