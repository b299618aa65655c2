"""Gas purity estimation and cascade control for an alkaline electrolyzer gas train."""

__version__ = "0.1.0"
