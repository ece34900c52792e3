"""Real-time coupling bridge between a TraCI traffic server and 3D/audio clients."""

__version__ = "0.1.0"
