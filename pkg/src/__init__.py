"""
Folded attention kernels and their verification tools.

Modules:
- tensor_core: fold/unfold, deterministic matmul, softmax, op counting
- attention: self-attention, sub-affinities, cascaded folded attention, rank-one oracle
- autodiff: reverse-mode tape and finite-difference checker
- cost_model: analytic FLOPs and affinity-memory accounting
- harness: verification suites used by main.py
"""

__version__ = "1.0.0"
