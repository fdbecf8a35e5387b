"""SCGA - structured co-reference graph attention for video-grounded dialogue."""
