"""Perturbative RG engine for the tricritical |φ|⁶ model on Z³."""
__version__ = "0.1.0"
