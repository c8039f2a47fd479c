"""Amortized sampling of ancestral graphs with expert-guided refinement.

Subpackages split along the pipeline: ``graphs`` (structures and edge
actions), ``scm`` (simulation), ``scoring`` (model fit and reward),
``policy``/``autodiff``/``training`` (the learned sampler), ``oracle``
(exact small-n ground truth), ``elicitation`` (noisy-expert belief
refinement), ``service`` (HTTP API), and ``cli``.
"""

from .graphs import (  # noqa: F401
    AncestralGraph,
    Action,
    STOP,
    add_action,
    apply_action,
    is_ancestral,
    node_pairs,
    shd,
    valid_actions,
)

__version__ = "0.1.0"
