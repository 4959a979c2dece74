"""Per-subject CNN classification of EEG sleep A-phases from log-spectrograms."""

from .data import (
    AnnotationEvent,
    EdfRecording,
    Segment,
    SubjectDataset,
    extract_segments,
    parse_cap_annotations,
    parse_edf,
    read_dataset,
    synthesize_subject,
    write_dataset,
)
from .dsp import SpectrogramConfig, cubic_spline_resample, log_spectrogram
from .experiments import (
    ExperimentResult,
    SplitConfig,
    aggregate_report,
    run_fraction_sweep,
    run_retraining_experiment,
    simulate_validation,
    split_dataset,
)
from .network import (
    TASK_AN,
    TASK_SUBTYPE,
    Network,
    init_network,
    load_checkpoint,
    save_checkpoint,
)
from .train import (
    ConfusionMatrix,
    ImageSet,
    TrainConfig,
    balanced_batch,
    evaluate,
    oversample_balance,
    sgd_momentum_step,
    train_network,
)

__version__ = "0.1.0"
