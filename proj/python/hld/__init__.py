"""Python interface to the hld library."""

from ._hld import (
    IMAGE_SIDE,
    AdapterSet,
    Checkpoint,
    FormatError,
    HldError,
    MetricSuite,
    NumericalError,
    Schedule,
    UsageError,
    cfg_eps,
    class_prior,
    finetune,
    forward_diffuse,
    hmcfg_eps,
    oracle_verify,
    pretrain,
    sample,
    spearman,
    subject_images,
)

__all__ = [
    "IMAGE_SIDE",
    "AdapterSet",
    "Checkpoint",
    "FormatError",
    "HldError",
    "MetricSuite",
    "NumericalError",
    "Schedule",
    "UsageError",
    "cfg_eps",
    "class_prior",
    "finetune",
    "forward_diffuse",
    "hmcfg_eps",
    "oracle_verify",
    "pretrain",
    "sample",
    "spearman",
    "subject_images",
]
