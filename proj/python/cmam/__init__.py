"""Memory-augmented handwritten line recognizer."""

from ._core import (
    ConfigError,
    FormatError,
    InfeasibleAlignment,
    Model,
    ShapeError,
    collapse_path,
    ctc_brute_force,
    ctc_loss,
    ctc_loss_grad,
    ctc_min_frames,
    edit_ops,
    emit_dataset,
    evaluate,
    generate,
    glyph_names,
    gradcheck_suite,
    greedy_decode,
    load_dataset,
    make_corpus,
    parse_config,
    read_pgm,
    report,
    train,
    write_pgm,
)

__all__ = [name for name in dir() if not name.startswith("_")]
