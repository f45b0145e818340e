"""Dynamic-effort CNN inference on the CPU with exact scalar-op accounting."""

__version__ = "0.1.0"
