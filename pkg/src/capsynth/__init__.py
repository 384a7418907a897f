"""Synthetic training data for tube-cap detection from a robot-held depth sensor.

The pipeline plans observation poses, captures (or simulates) point frames of
a held tube, cuts the cap out with a hand-frame annotation box, and composes
labelled images by copy-paste onto rack backgrounds.
"""

__version__ = "0.1.0"
