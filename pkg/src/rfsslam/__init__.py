"""Random-finite-set SLAM filters for mmWave vehicular scenarios."""

__version__ = "0.1.0"
