"""Incomplete-multimodal learning with combination-aware low-rank adapters.

The package trains a small frozen multimodal base model, then fine-tunes
per-modality low-rank adapter banks (one private adapter per modality
combination plus one shared adapter) under a dynamic combination-sampling
schedule, and evaluates under fixed/random missing-modality protocols.
"""

__version__ = "0.1.0"
