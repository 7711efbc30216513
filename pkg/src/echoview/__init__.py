"""Echocardiogram view classification: a small numpy CNN engine with training,
evaluation, video voting and interpretability tools."""

__version__ = "0.1.0"
