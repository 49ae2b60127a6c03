"""Numerical laboratory for McKean-Vlasov SDEs: particle simulation,
parametrix transition densities and propagation-of-chaos rate studies."""

__version__ = "0.1.0"
