"""Regional traffic-signal control: star-region partitioning, a queue-based
signal simulator, and branching dueling Q-network agents."""

__version__ = "0.1.0"
