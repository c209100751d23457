"""Relation-prediction probing and adjacency heatmaps."""
