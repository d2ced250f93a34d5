"""Antibody CDR co-design with a conjoined neural ODE over residue graphs."""

__version__ = "0.1.0"
