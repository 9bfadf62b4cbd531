"""Error-signal functions eps_t mapping outputs f in R^N to chi in R^N.

Batch masks and train/test splits live here: an input whose mask entry is 0
at step t contributes no gradient at that step.
"""
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from widthlab.rng import make_rng

REDUCTIONS = ("mean", "sum")


@dataclass(frozen=True)
class MSESignal:
    """eps_t(f) = (f - y) * mask_t / |mask_t| (mean) or (f - y) * mask_t (sum).

    Args:
        targets: Regression targets y, one per input
        reduction: 'mean' divides by the number of active inputs
        train_mask: Fixed 0/1 mask; zeros mark held-out (tracked) inputs
        batch_size: Optional minibatch size drawn from the training inputs
        seed: Seed for the minibatch draws
    """
    targets: np.ndarray = field(compare=False)
    reduction: str = "mean"
    train_mask: Optional[np.ndarray] = field(default=None, compare=False)
    batch_size: Optional[int] = None
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "targets", np.asarray(self.targets, dtype=float).reshape(-1))
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"reduction must be one of {', '.join(REDUCTIONS)}")
        if self.train_mask is not None:
            mask = np.asarray(self.train_mask, dtype=float).reshape(-1)
            if mask.shape != self.targets.shape:
                raise ValueError("train_mask must have one entry per target")
            object.__setattr__(self, "train_mask", mask)
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    @property
    def size(self) -> int:
        return self.targets.shape[0]

    def mask(self, t: int) -> np.ndarray:
        """0/1 mask of inputs that contribute at step t."""
        base = np.ones(self.size) if self.train_mask is None else self.train_mask.copy()
        if self.batch_size is None:
            return base
        active = np.flatnonzero(base)
        if self.batch_size >= active.size:
            return base
        chosen = make_rng(self.seed, "batch", t).choice(active, size=self.batch_size, replace=False)
        out = np.zeros(self.size)
        out[chosen] = 1.0
        return out

    def __call__(self, t: int, f: np.ndarray) -> np.ndarray:
        f = np.asarray(f, dtype=float)
        if f.shape != self.targets.shape:
            raise ValueError(f"expected {self.size} outputs, got shape {f.shape}")
        mask = self.mask(t)
        chi = (f - self.targets) * mask
        if self.reduction == "mean":
            active = mask.sum()
            if active > 0:
                chi = chi / active
        return chi


SIGNALS = {"mse": MSESignal}


def make_signal(kind: str, targets: Sequence[float], **kwargs) -> MSESignal:
    """Build a registered error signal by name."""
    if kind not in SIGNALS:
        raise ValueError(f"Unknown loss '{kind}' (known: {', '.join(sorted(SIGNALS))})")
    return SIGNALS[kind](np.asarray(targets, dtype=float), **kwargs)
