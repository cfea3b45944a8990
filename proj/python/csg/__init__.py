"""Synthetic ultrasound pipeline: phantoms, guided diffusion, editing, metrics."""

from ._core import (
    NUM_CLASSES,
    Config,
    CsgError,
    EditProgram,
    StageOutcome,
    __version__,
    apply_edit,
    apply_override,
    class_names,
    config_json,
    default_run_root,
    dry_run,
    execution_plan,
    load_config,
    parse_config,
    parse_edit,
    phantom,
    pipeline_stages,
    print_edit,
    quality,
    read_image,
    read_mask,
    run_id,
    run_pipeline,
    seg_scores,
    write_image,
    write_mask,
)

__all__ = [
    "NUM_CLASSES",
    "Config",
    "CsgError",
    "EditProgram",
    "StageOutcome",
    "__version__",
    "apply_edit",
    "apply_override",
    "class_names",
    "config_json",
    "default_run_root",
    "dry_run",
    "execution_plan",
    "load_config",
    "parse_config",
    "parse_edit",
    "phantom",
    "pipeline_stages",
    "print_edit",
    "quality",
    "read_image",
    "read_mask",
    "run_id",
    "run_pipeline",
    "seg_scores",
    "write_image",
    "write_mask",
]
