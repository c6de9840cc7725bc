"""Knowledge-grounded augmentation of clinical tabular data.

Stages: ``ingest`` (reference documents) -> ``kstore`` (chunk index) ->
``augment`` (expert-question knowledge, feature discovery, value
generation) -> ``evaluation`` (MSE tables and classifier reports).
"""

__version__ = "0.1.0"
