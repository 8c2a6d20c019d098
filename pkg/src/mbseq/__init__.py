"""Multi-behavior sequential recommendation with graph encoders, cross-slot memory and contrastive training."""

__version__ = "0.1.0"
