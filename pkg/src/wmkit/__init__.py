"""Toolkit for green/red-list watermarking of token-sequence generators.

Decoders couple the model's next-token distribution with a keyed
restriction so the token marginal is unchanged while keyed pivot uniforms
become detectably small.  The package bundles the decoders, the detection
tests (sum, higher criticism, order-statistic max, plus scheme-specific
baselines), key handling, post-generation attacks, synthetic model
sources, and the sparse-mixture power-study harness behind the ``wmkit``
command-line tool.
"""

from .core import (
    GOLDEN,
    EmptyVector,
    GeneratedText,
    NegativeEntry,
    NotNormalized,
    NtpDistribution,
    RngStream,
    fold64,
    make_ntp,
    mix64,
)
from .keying import (
    KeyFormatError,
    MaskLedger,
    WatermarkKey,
    derive_seed,
    derive_zeta,
    format_key,
    green_mask,
    is_green,
    keyed_permutation,
    parse_key,
)
from .decoders import (
    Branch,
    CouplingOutcome,
    DecoderConfig,
    GenerationResult,
    Scheme,
    StepResult,
    VocabMismatch,
    ZeroGreenMass,
    generate,
    sample_maximal_coupling,
    sample_rejection_coupling,
    text_from_record,
    to_record,
)
from .detection import (
    DetectionReport,
    HcDenom,
    NullCalibration,
    ScoredToken,
    Side,
    Statistic,
    calibrate_null,
    detect,
    detect_baseline,
    extract_scores,
    hc_statistic,
    irwin_hall_cdf,
    max_test,
    sum_test,
)
from .lm import (
    EndOfTrace,
    MalformedTrace,
    MarkovSource,
    NtpSource,
    NtpTrace,
    TraceSource,
    load_trace,
    parse_model_spec,
    replay_next,
    save_trace,
)
from .attacks import (
    AttackConfig,
    AttackKind,
    SpecDecStats,
    specdec_one_step,
    specdec_postprocess,
    substitute,
)
from .simulation import (
    PowerCurve,
    Regime,
    RegimeConfig,
    boundary_scan,
    null_histogram,
    run_power,
    sample_alternative,
)

__version__ = "0.1.0"
