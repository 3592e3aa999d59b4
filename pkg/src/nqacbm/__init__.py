"""Boltzmann-machine training through nested annealing-code encodings.

The pipeline: a logical Ising model is replicated into a repetition code
(nesting), chain-embedded onto a Chimera-style hardware graph, sampled with
classical annealer stand-ins (or an exact Gibbs oracle), decoded back by
majority vote, and the decoded samples drive gradient updates and the
diagnostic metrics (effective inverse temperature, distance from Gibbs,
distance from data, empirical log-likelihood, classification accuracy).
"""

__version__ = "0.1.0"
