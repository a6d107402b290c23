"""Affordance-foresight vision-language-action policy with progress-aware subtask switching."""

__version__ = "0.1.0"
