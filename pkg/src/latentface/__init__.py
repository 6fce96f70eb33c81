"""Joint text-to-audio-visual synthesis on a self-contained procedural corpus."""

__version__ = "0.1.0"
