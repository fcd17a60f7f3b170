"""Concept-level language model training toolkit.

Trains a small decoder-only transformer with a next-token loss
interpolated against a synonym-set concept loss, on a synthetic corpus
with known concept structure, and evaluates content-word perplexity,
embedding geometry, semantic alignment, and paired-bootstrap significance.
"""

__version__ = "0.1.0"
