"""Command-line surface for SCGA."""
