"""Toolkit for improving and certifying image-caption alignment.

Subpackages cover the full loop: structured caption modeling and
model-free checks (`core_model`), gold-set construction by clustering
precomputed embeddings (`embedding_sampler`), character-consistency
scoring (`grounded_metrics`), prompt building and endpoint orchestration
(`vlm_gateway`), paired t-test certification (`stats`), finetuning data
export (`sft_export`), and report emission (`reports`).
"""

__version__ = "0.1.0"
