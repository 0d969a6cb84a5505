"""Federated few-shot meta-learning simulator.

Submodules: ``nn`` (MLP with exact gradients and Hessian-vector products),
``episodes``, ``meta`` (Meta-SGD, its private variant, MAML), ``privacy``,
``federation``, ``data_io``, ``metrics`` and ``cli``.
"""

__version__ = "0.1.0"
