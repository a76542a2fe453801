"""Early-exit inference for a toy tabular in-context-learning transformer."""
