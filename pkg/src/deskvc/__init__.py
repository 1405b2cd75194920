"""deskvc: desk-scale any-to-any voice conversion with audio/text prompts."""

__version__ = "0.1.0"
