"""Asset Administration Shell runtime with containerized service execution."""
from .runtime import Runtime, SimClock

__all__ = ["Runtime", "SimClock"]
__version__ = "0.1.0"
