"""Fairness transfer under distribution shift: synthetic factor worlds, numpy
networks with fairness adversaries, fair self-training and exact finite-world
certification of the accompanying bounds."""

__version__ = "0.1.0"
