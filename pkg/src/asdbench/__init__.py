"""asdbench: a workbench for unsupervised anomalous sound detection under domain shift.

Synthesizes domain-shifted machine-sound corpora, trains anomaly detectors
from normal-only recordings, and evaluates them with ranked AUC/pAUC metrics
and a harmonic-mean summary score.
"""

from .corpus import (
    AudioClip,
    ClipMeta,
    ClipPathError,
    ClippingWarning,
    DatasetIndex,
    DegenerateSignalError,
    DomainSpec,
    OutputTreeError,
    default_domain_shift,
    default_section_spec,
    format_clip_path,
    load_clip,
    mix_at_snr,
    parse_clip_path,
    save_clip,
    scan_dataset,
    synth_clip,
    synth_corpus,
)
from .detectors import (
    AnomalyDetector,
    AutoencoderDetector,
    DiagonalGmm,
    EnsembleDetector,
    FeaturePipeline,
    GaussianMixtureDetector,
    InsufficientSectionsError,
    NearestNeighborDetector,
    SectionClassifierDetector,
    SerialHybridDetector,
    TrainOptions,
    fit_detector,
    k_nearest_distances,
    load_detector,
    save_detector,
    score_dataset,
    windowed_logit_score,
)
from .features import (
    FeatureWindows,
    LogMelSpectrogram,
    StftParams,
    ae_frames,
    frame_windows,
    hertz_to_mel,
    log_mel,
    mel_filterbank,
    mel_to_hertz,
    read_feature_cache,
    stft_power,
    write_feature_cache,
)
from .metrics import (
    Decision,
    MetricCell,
    MetricsReport,
    ScoreRecord,
    ScoreValidationError,
    UndefinedMetricError,
    auc,
    brute_force_auc,
    decide,
    evaluate,
    harmonic_mean,
    official_score,
    pauc,
)
from .nnet import (
    AdamState,
    DenseNet,
    TrainConfig,
    TrainingDivergedError,
    adam_step,
    load_model,
    save_model,
    train,
)

__version__ = "0.1.0"
