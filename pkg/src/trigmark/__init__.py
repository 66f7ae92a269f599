"""Differential-evolution trigger patterns for black-box classifier watermarking."""

from .core import (
    KeyPattern,
    LabeledDataset,
    LogoPattern,
    Message,
    decode_message,
    encode_message,
    key_embed,
    logo_embed,
    rasterize_key,
)
from .de import (
    DEParams,
    FitnessParams,
    KeyCandidate,
    evolve_key_closest,
    evolve_key_random,
    evolve_logo,
    fitness_location,
    fitness_location_value,
    pair_closest,
    run_de,
)
from .pipeline import (
    TriggerSet,
    VerificationResult,
    build_trigger_set,
    detection_probability,
    embed_watermark,
    false_positive_rate,
    verify_watermark,
)

__version__ = "0.1.0"
