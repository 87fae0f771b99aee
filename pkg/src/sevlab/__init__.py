"""sevlab: a numerical laboratory for semilinear stochastic evolution equations.

The package simulates mild solutions of equations of the form

    du(t) + A u(t) dt + f(u(t)) dt = B(u(t-)) dM(t)        (martingale noise)
    du(t) + A u(t) dt + f(u(t)) dt = int_Z G(z, u(t-)) mu~(dt, dz)   (Poisson noise)

on finite spectral truncations, and measures how solutions respond to
perturbations of the generator A (bounded regularizations, compressions,
spectral shifts), of the coefficients f, B, G and of the initial datum.
"""
from __future__ import annotations

__version__ = "0.1.0"
