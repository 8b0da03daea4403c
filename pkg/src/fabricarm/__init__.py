"""Real-time motion generation: geometric fabrics blended with a learned task-space policy."""

__version__ = "0.1.0"
