"""Layer-wise multi-task distillation of speech encoders (C++ core)."""

from ._dkd import (
    Encoder,
    Error,
    ValidationError,
    checkpoint_digest,
    count_flops,
    count_params,
    distill_loss,
    encoder_config,
    generate_corpus,
    grad_battery,
    lr_at,
    run_cli,
    strip_heads,
)

__all__ = [
    "Encoder",
    "Error",
    "ValidationError",
    "checkpoint_digest",
    "count_flops",
    "count_params",
    "distill_loss",
    "encoder_config",
    "generate_corpus",
    "grad_battery",
    "lr_at",
    "run_cli",
    "strip_heads",
]
