"""Goal-conditioned iterative imitation learning on a simulated table tennis task.

The pipeline: a scripted (or ES-trained) demonstrator seeds a cache of
hit-and-landed episodes; a goal-conditioned recurrent policy is behavior-cloned
on hindsight-relabeled windows; the policy then practices against random goals,
with every good attempt relabeled and appended to the same cache.
"""

__version__ = "0.1.0"

from . import bootstrap, config, dataset, env, evaluation, goals, physics, plots, policy, robot, ssp  # noqa: E402,F401
