"""Text + vision transformer classifier with cross-attention fusion and LoRA, on numpy."""

__version__ = "0.1.0"
