"""Learnable camera-ISP adapters bridging RAW sensor data into staged vision backbones."""

__version__ = "0.1.0"
