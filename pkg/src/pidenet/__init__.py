"""Deep solver for semi-linear parabolic PIDEs.

The solver simulates the forward jump-diffusion process with an
Euler-Maruyama scheme, approximates the value function with a single
multilayer perceptron, obtains the diffusion term from the network's
input gradient and the non-local jump integral from network
re-evaluations at jumped states, and trains by minimizing the squared
one-step residuals of the backward recursion plus the terminal misfit.
"""

__version__ = "0.1.0"
