"""Game engine, graph representations and corpora."""
