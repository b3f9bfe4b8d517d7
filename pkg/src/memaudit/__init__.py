"""memaudit: membership-inference auditing from transformer activation traces."""

__version__ = "0.1.0"
