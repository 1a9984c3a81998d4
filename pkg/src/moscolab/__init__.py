"""Numerical lab for optimal control in coefficients of monotone elliptic
equations with a Hammerstein-type constraint, and its stability under
domain perturbations."""

__version__ = "0.1.0"
