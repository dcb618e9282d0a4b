"""Safe switching for switched LQR systems with unknown per-mode dynamics."""

__version__ = "0.1.0"
