"""Closed-form simulation of a Lambda atom in two Kerr fields with intensity-dependent
coupling, plus delay-embedding, recurrence and recurrence-network analysis of the
resulting photon-number series."""

__version__ = "0.1.0"
