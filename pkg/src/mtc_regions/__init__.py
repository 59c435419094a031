"""Urban region embeddings from service-level mobile traffic."""

__version__ = "0.1.0"
