"""Training-loop helpers shared by both subnetworks."""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from .autodiff import Parameter


class EarlyStopping:
    """Stop after ``patience`` epochs without a strictly better monitored value."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.counter = 0

    def update(self, epoch: int, value: float) -> bool:
        """Record ``value`` for ``epoch``; True when this is a new best."""
        if value < self.best:
            self.best = value
            self.best_epoch = epoch
            self.counter = 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.counter >= self.patience


def minibatch_slices(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Shuffled index blocks covering 0..n-1 once.

    A trailing block of one row is merged into the previous block so
    batch-norm never sees a single-row batch mid-epoch.
    """
    perm = rng.permutation(n)
    blocks = [perm[i : i + batch_size] for i in range(0, n, batch_size)]
    if len(blocks) > 1 and len(blocks[-1]) == 1:
        blocks[-2] = np.concatenate([blocks[-2], blocks[-1]])
        blocks.pop()
    return blocks


@contextmanager
def frozen(params: list[Parameter]):
    """Temporarily freeze ``params``; gradient still flows through them."""
    prior = [p.frozen for p in params]
    for p in params:
        p.frozen = True
    try:
        yield
    finally:
        for p, was in zip(params, prior):
            p.frozen = was
