"""Hand-written actor-critic learner: MLPs, Adam and PPO."""
