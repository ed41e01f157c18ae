"""EEG attention and sleep-state detection, sleep-quality scoring and LLM prompt tooling."""

__version__ = "0.1.0"
