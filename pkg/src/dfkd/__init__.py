"""Data-free knowledge distillation with class-balanced arbitrary transfer sets.

A small teacher network labels streams of noise, synthetic shapes, or
unrelated images; a class-balanced subset of those samples is composed from
the teacher's own predictions and a half-width student is trained to match
the teacher's softened outputs. Everything numerical runs on float64 numpy.
"""

__version__ = "0.1.0"
