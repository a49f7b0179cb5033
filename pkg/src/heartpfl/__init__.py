"""Desk-scale simulator for adapter-based personalized federated learning with
hierarchical directional alignment (client) and adversarial knowledge
transfer (server)."""

__version__ = "0.1.0"
