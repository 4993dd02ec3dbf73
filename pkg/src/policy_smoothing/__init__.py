"""Policy smoothing for reinforcement learning agents.

Train DQN/DDPG agents on Gaussian-noised observations, certify lower bounds on
their expected episode reward against l2-budgeted adaptive observation
adversaries, attack them, and check the bound empirically.
"""

__version__ = "0.1.0"
