"""Failure-aware subgoal planning over a node/edge option model.

Submodules: ``smdp`` (nodes, edges, contexts, returns), ``scenario``
(stochastic YAML environments), ``demos`` (datasets), ``proposal`` and
``value`` (learned models), ``search`` (tree search and baselines),
``executor`` (execution and replanning), ``oracle`` (exact ground truth),
``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
