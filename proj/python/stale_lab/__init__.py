"""Deterministic simulator for staleness-gated outer optimizers."""

import json as _json

from ._core import (
    NO_CUTOFF,
    AdamMoments,
    OuterConfig,
    bound_terms,
    cgad_step,
    cosine_gate,
    max_tau_sigma,
    quantize,
    round_trip,
    staleness_weight,
    tau_decay_peak,
    verify,
)
from . import _core

__all__ = [
    "NO_CUTOFF",
    "AdamMoments",
    "OuterConfig",
    "bound_terms",
    "canonical_config",
    "cgad_step",
    "config_hash",
    "cosine_gate",
    "max_tau_sigma",
    "quantize",
    "round_trip",
    "run",
    "staleness_weight",
    "tau_decay_peak",
    "verify",
]


def _text(config):
    return config if isinstance(config, str) else _json.dumps(config)


def run(config):
    """Run a config (dict or JSON text) and return the result document as a dict."""
    return _json.loads(_core.run_json(_text(config)))


def config_hash(config):
    return _core.config_hash(_text(config))


def canonical_config(config):
    return _json.loads(_core.canonical_config(_text(config)))
