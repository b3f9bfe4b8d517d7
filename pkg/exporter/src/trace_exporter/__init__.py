"""trace_exporter: hub causal LMs to the memaudit trace format."""

__version__ = "0.1.0"
