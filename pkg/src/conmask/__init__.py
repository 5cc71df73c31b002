"""Open-world knowledge graph completion toolkit.

Relationship-dependent content masking, a fully-convolutional target
fusion encoder, semantic averaging, a partial list-wise ranking loss,
plus data ingestion, split generation, training, and ranking evaluation.
"""

__version__ = "0.1.0"
