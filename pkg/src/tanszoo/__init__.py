"""Task-adaptive retrieval of pretrained networks from a synthetic model zoo."""

__version__ = "0.1.0"
