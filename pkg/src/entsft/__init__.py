"""Entropy-preserving supervised fine-tuning for tiny language models.

Core pieces: tempered-softmax distribution math, entropy-guided per-token
temperature search, SFT/entropy/KL/self-distillation losses with analytic
gradients, a from-scratch decoder-only model with hand-derived backward
passes, synthetic verifiable datasets, a deterministic trainer, and
brute-force verification oracles.
"""

__version__ = "0.1.0"
