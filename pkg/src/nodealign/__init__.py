"""Cross-domain graph node alignment: sampling, memory-bank completion,
contrastive refinement, covariance style masking and message passing."""

__version__ = "0.1.0"
