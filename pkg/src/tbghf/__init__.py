"""Projected Hartree-Fock for relaxed and unrelaxed twisted bilayer graphene."""
__version__ = "0.1.0"
