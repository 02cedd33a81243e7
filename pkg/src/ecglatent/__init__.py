"""ecglatent: compress multi-lead ECG representative beats into
30-dimensional latent encodings with a family of variational
autoencoders and an incremental-PCA baseline.
"""

from .signal_io import (
    EcgRecord,
    SyntheticBeatParams,
    WaveParams,
    generate_synthetic_ecg,
    random_beat_params,
    read_dataset,
    write_dataset,
)
from .preprocess import (
    ScalingParams,
    XyzBeat,
    detect_qrs_onsets,
    extract_representative_beat,
    kors_transform,
    load_kors_matrix,
    record_to_xyz_beat,
    scale_dataset,
)
from .latent_models import (
    BetaSchedule,
    IncrementalPca,
    LatentEncoding,
    LossBreakdown,
    LossWeights,
    VaeNetwork,
    VariantConfig,
    beta_at,
    build_network,
    elbo_loss,
    kl_divergence,
    reparameterize,
    train,
    weighted_reconstruction_loss,
)
from .metrics import (
    MeasurementSet,
    ProbeReport,
    ReconstructionReport,
    auroc,
    dtw_distance,
    evaluate_probe,
    fit_linear_probe,
    fit_logistic_probe,
    measure_beat,
    measure_dataset,
    reconstruction_metrics,
    sensitivity_at_specificity,
    split_by_id,
)

__version__ = "0.1.0"
