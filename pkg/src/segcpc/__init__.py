"""Joint frame- and segment-level contrastive speech representation learning.

The package trains a convolutional frame encoder and a segment branch
together from raw audio, detects phone- and word-like boundaries without
supervision, and ships the evaluation, analysis, and variable-rate feature
tooling around that model. See the ``segcpc`` command-line entry point for
the end-to-end workflows.
"""

from .boundary import (
    BoundaryThreshold,
    BoundaryVector,
    DissimilarityVector,
    adjacent_dissimilarity,
    detect_boundaries,
    peak_scores,
    segment_count,
    straight_through_bounds,
)
from .corpus import (
    HOP_S,
    SAMPLE_RATE,
    CorpusManifest,
    LabeledInterval,
    LabelFoldTable,
    ManifestEntry,
    Utterance,
    chunk_long_recording,
    default_fold_table,
    fold_phone_label,
    load_manifest,
    load_utterance,
    parse_alignment,
    serialize_alignment,
    split_validation,
)
from .errors import DataError, RuntimeFailure, SegcpcError
from .evaluation import (
    EvalReport,
    MatchCounts,
    compute_metrics,
    f1_score,
    match_boundaries,
    pair_confusion,
    r_value,
    reference_boundaries,
)
from .frames import (
    ConvFrameEncoder,
    FeedForwardFrameEncoder,
    FrameEncoderConfig,
    FrameMatrix,
    NegativeSamplingPolicy,
    nfc_loss,
    sample_negatives,
)
from .inference import (
    ProminenceSetting,
    phone_boundaries,
    pick_peaks,
    tune_prominence,
    word_boundaries,
)
from .model import ModelConfig, SegmentalCPC, load_checkpoint, save_checkpoint
from .segments import (
    ContextAggregator,
    SegmentContext,
    SegmentEncoder,
    SegmentSet,
    build_weight_matrix,
    nsc_loss,
    pool_segments,
)
from .training import TrainConfig, combined_loss, train
from .varrate import (
    ContextualFramePredictor,
    FeatureReader,
    ProbeResult,
    SegmentFeatures,
    average_sampling_rate,
    expand_to_frames,
    extract_segment_features,
    linear_probe,
    multistep_nfc_loss,
    write_feature_file,
)

__version__ = "0.1.0"
