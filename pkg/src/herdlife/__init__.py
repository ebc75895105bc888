"""Herd-life prediction toolkit: synthetic herd data, ingestion, sequencing,
an attention encoder with its own autograd core, tabular baselines and
evaluation."""

__version__ = "0.1.0"
