"""Outlier-fusion cleaning pipeline and training kernels.

Layers:

* ``numeric``   - quantiles, SPD solves, kNN, 2-D convolution, seedable RNG
* ``detectors`` - IQR / LOF / one-class SVM / isolation forest / elliptic
  envelope plus the 3-of-5 vote fusion
* ``metadata``  - chest X-ray metadata parsing, label cleaning, outlier removal
* ``images``    - resize / normalize / rotate / scale transforms
* ``dgmp``      - generalized max-pooling forward and backward
* ``focal``     - softmax focal loss with logit gradients
* ``attention`` - channel / spatial / coordinate heads and their fusion
* ``trainer``   - deterministic toy CNN trainer
* ``metrics``   - confusion metrics and data splitting
* ``cli``       - the ``outlier-fusion`` command
"""

from .attention import (AttentionConfig, AttentionHead, Placement,
                        channel_attention, coordinate_attention,
                        multi_head_attention, spatial_attention)
from .detectors import (DetectorConfig, DetectorKind, OutlierVerdict,
                        detect_outliers, fuse_votes, iforest_scores, iqr_detect,
                        lof_scores, mcd_fit_score, ocsvm_fit_score,
                        threshold_by_contamination)
from .dgmp import DgmpSolution, dgmp_backward, dgmp_forward
from .errors import (ConfigError, ConvergenceError, DataSchemaError,
                     DegenerateDataError, DomainError, FusionError,
                     NotPositiveDefiniteError, NumericError, ShapeMismatchError,
                     SingularGramError, TrainingDivergedError)
from .focal import FocalLossConfig, focal_loss, focal_loss_batch, softmax
from .images import AugmentConfig, augment, resize_bilinear
from .metadata import (CleanDataset, DiseaseLabel, MetadataRecord,
                       StageCounts, apply_outlier_removal, build_features,
                       clean_labels, label_counts, parse_metadata_csv,
                       run_clean_pipeline)
from .metrics import (ConfusionCounts, MetricsReport, confusion_counts,
                      evaluate, holdout_split, metrics_report, stratified_kfold)
from .numeric import (QuantileSummary, RngStream, conv2d, knn_distances,
                      quantile, solve_spd)
from .trainer import (ToyModelConfig, TrainConfig, make_shape_dataset,
                      train_toy)

__version__ = "0.1.0"
