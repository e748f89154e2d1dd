"""Parabolic Anderson model with a voter-model catalyst.

Submodules
----------
kernels      random-walk kernels, return probabilities, transience classification
voter        voter model on a torus through its graphical representation
graphical    lazily generated graphical representation on Z^d or a torus
coalescing   coalescing random walks born at the origin, labels, chi(t), densities
feynman_kac  Monte Carlo moments and finite-time Lyapunov functionals
exact        exact small-torus oracle
cli          command-line front end
"""

__version__ = "0.1.0"
