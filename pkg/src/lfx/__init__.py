"""Light-field multi-view encoding with two-step angular adapters, at desk scale."""

__version__ = "0.1.0"
