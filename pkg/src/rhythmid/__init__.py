"""Speaker identification from speech rhythm (frame-aligned character sequences)."""

__version__ = "0.1.0"
