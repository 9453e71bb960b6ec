"""Desk-scale global-context block laboratory.

Non-local, simplified non-local, global context (GC) and squeeze-excitation
blocks on top of a small f64 reverse-mode autodiff engine, plus attention
degeneracy statistics, an execution-free cost model and a toy training
harness.
"""

__version__ = "0.1.0"
