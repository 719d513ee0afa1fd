"""Multimodal world-model racing agents."""
