"""Two-stage multi-modal mixing alignment of a point-cloud encoder.

Synthetic shapes stand in for the 3D corpus and seeded anchor models stand in
for the frozen image/text towers, so every quantity has a known ground truth.
"""

__version__ = "0.1.0"
