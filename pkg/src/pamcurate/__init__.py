"""Curation pipeline turning hydrophone window embeddings and AIS vessel
tracks into a balanced, diverse training manifest."""

__version__ = "0.1.0"
