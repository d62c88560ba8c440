"""Python access to the quietread core: data packing, loss masks, synthetic corpora and the CLI."""

import json

from ._quietread import (
    BOS,
    EOS,
    PAD,
    VOCAB_SIZE,
    ConfigError,
    IoError,
    NumericError,
    decode,
    encode,
    loss_mask,
    mask_stats,
    pack,
    render_mask,
    run_cli,
    synth_kv,
    synth_reverse,
)


def resolved_config(path):
    from ._quietread import resolved_config as _resolved

    return json.loads(_resolved(str(path)))


def cli(*args):
    """Runs a CLI subcommand; raises RuntimeError on a nonzero exit."""
    code, out, err = run_cli([str(a) for a in args])
    if code != 0:
        raise RuntimeError(f"quietread {' '.join(map(str, args))} exited {code}: {err.strip()}")
    return out


__all__ = [
    "BOS", "EOS", "PAD", "VOCAB_SIZE", "ConfigError", "IoError", "NumericError",
    "cli", "decode", "encode", "loss_mask", "mask_stats", "pack", "render_mask",
    "resolved_config", "run_cli", "synth_kv", "synth_reverse",
]
