"""roadrl: lattice trajectory planning with a safety-gated RL planner.

Subpackages:
  geometry     Cartesian / curvilinear / cell coordinate transforms
  environment  lattice driving world (reset/step state machine)
  cost         trajectory cost terms, rewards, driving metrics
  safety       feasible-set enumeration and action projection
  search       exhaustive discrete baseline planner
  policy       PPO-trained Gaussian trajectory policy
  cli          train / compare / bench / plot / replay commands
"""

__version__ = "0.1.0"
