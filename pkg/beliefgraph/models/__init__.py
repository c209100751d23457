"""Graph, text and decoder networks and their pretraining tasks."""
