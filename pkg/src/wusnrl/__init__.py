"""Adaptive transmission policies for wireless underground sensors.

Soil dielectric time series are turned into path loss, a Gaussian HMM learns
the channel states, value iteration solves the queued-transmission MDP and a
trace-driven simulator compares the learned policy to fixed-modulation
sense-then-transmit baselines.
"""

__version__ = "0.1.0"
