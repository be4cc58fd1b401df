"""Desk-scale fine-tuning lab: VFT, pattern-based FT, LoRA and context distillation on a toy transformer."""

__version__ = "0.1.0"
