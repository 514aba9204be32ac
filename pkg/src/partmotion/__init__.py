"""Part-aware hierarchical text-to-motion generation at desk scale."""

__version__ = "0.1.0"
