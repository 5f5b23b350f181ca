"""Flow-guided deformable frame prediction engine."""

__version__ = "0.1.0"
