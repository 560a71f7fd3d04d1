"""Desk-scale reference implementation of a dual-encoder music LLM's
fusion block, token budgeting, GRPO stage and evaluation arithmetic."""

__version__ = "0.1.0"
