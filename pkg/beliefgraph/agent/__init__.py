"""Action selector, prioritized replay and the training loop."""
