"""Unsupervised temporal action localization by iterative clustering,
reciprocal-neighbour re-ranking, self-paced selection and a contrastive
localization head."""
from .pipeline import PipelineConfig, PipelineResult, emit_reports, run_pipeline

__all__ = ["PipelineConfig", "PipelineResult", "emit_reports", "run_pipeline"]
__version__ = "0.1.0"
