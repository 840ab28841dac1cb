"""Balanced admission control for quasi-reversible queueing systems.

Subpackages:

- ``qrcore``: state spaces, kernels, stationary solves, partial-balance checks
- ``balance``: balance functions, balanced policies, polytope decomposition
- ``oiqueue``: order-independent queues and the redundancy model
- ``whittle``: multi-class Whittle networks and the OI equivalence
- ``control``: admission problems, optimal and best-balanced policies, LP export
- ``simenv``: exact jump-chain simulation and the arrival-embedded environment
- ``rl``: gradient-based and tabular learning on the embedded environment
- ``cli``: batch experiment commands
"""

__version__ = "0.1.0"
