"""Dataset loading, saving and point-map filters."""
