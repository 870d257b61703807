"""2D/3D megavoltage image registration: classical and CNN-regression engines."""

__version__ = "0.1.0"
