"""Per-example clipped, noised gradient releases and the training loops
built on them.

One release: clip every per-sequence gradient to L2 norm C, average the
clipped gradients over the batch, then add i.i.d. Gaussian noise per
coordinate. The noise level comes from the mean's sensitivity (C/B under
add/remove adjacency, 2C/B under replace) at the configured per-step
(epsilon, delta), unless ``noise_override`` pins sigma directly. Every
noisy release charges its step parameters to the account ledger before
any noise is drawn; a refused charge emits nothing.

``warm_start`` is the same loop with no clipping and no noise: plain
mini-batch gradient descent on the mean per-example gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import BudgetExceeded, EmptyDataset, InvalidGradient, InvalidValue, ShapeError
from .network import Network, apply_update, per_example_gradients
from .privacy import (
    ZERO_SPEND,
    AccountLedger,
    Adjacency,
    PrivacyParams,
    Sensitivity,
    compose,
    gaussian_sigma,
)
from .rng import RandomSource


@dataclass(frozen=True)
class DpSgdConfig:
    """Knobs for one worker's release pipeline."""

    clip_bound: float
    step_params: PrivacyParams
    learning_rate: float
    batch_size: int
    adjacency: Adjacency = Adjacency.ADD_REMOVE
    noise_override: float | None = None
    noisy: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.clip_bound) and self.clip_bound > 0.0):
            raise InvalidValue(f"clip bound must be finite and positive, got {self.clip_bound}")
        if not (math.isfinite(self.learning_rate) and self.learning_rate > 0.0):
            raise InvalidValue(f"learning rate must be finite and positive, got {self.learning_rate}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise InvalidValue(f"batch size must be a positive integer, got {self.batch_size}")
        if self.noise_override is not None and not (
            math.isfinite(self.noise_override) and self.noise_override >= 0.0
        ):
            raise InvalidValue(f"noise override must be finite and >= 0, got {self.noise_override}")
        if self.noisy and self.noise_override is None and self.step_params.delta <= 0.0:
            raise InvalidValue("calibrated Gaussian noise needs step delta > 0")
        if self.noisy and self.step_params.epsilon <= 0.0:
            raise InvalidValue("noisy releases need step epsilon > 0")


@dataclass(eq=False)
class GradientRelease:
    """What a worker hands to the coordinator for one step."""

    step_id: int
    vector: np.ndarray
    spent: PrivacyParams
    clip_bound: float
    batch_size: int
    noisy: bool

    def __eq__(self, other):
        if not isinstance(other, GradientRelease):
            return NotImplemented
        return (
            self.step_id == other.step_id
            and np.array_equal(self.vector, other.vector)
            and self.spent == other.spent
            and self.clip_bound == other.clip_bound
            and self.batch_size == other.batch_size
            and self.noisy == other.noisy
        )


def l2_clip(grad: np.ndarray, clip_bound: float) -> np.ndarray:
    """Scale grad down to L2 norm clip_bound if it exceeds it, else return it as is."""
    if not (math.isfinite(clip_bound) and clip_bound > 0.0):
        raise InvalidValue(f"clip bound must be finite and positive, got {clip_bound}")
    g = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise InvalidGradient("gradient contains NaN or infinite entries")
    norm = float(np.linalg.norm(g))
    if norm <= clip_bound:
        return g
    return g * (clip_bound / norm)


def noise_sigma(cfg: DpSgdConfig, batch_size: int) -> float:
    """The Gaussian sigma a release with this config and batch size will use."""
    if not cfg.noisy:
        return 0.0
    if cfg.noise_override is not None:
        return cfg.noise_override
    per_record = cfg.clip_bound if cfg.adjacency is Adjacency.ADD_REMOVE else 2.0 * cfg.clip_bound
    sens = Sensitivity(per_record / batch_size, cfg.adjacency)
    return gaussian_sigma(sens, cfg.step_params)


def dp_gradient_release(
    per_example: Sequence[np.ndarray],
    cfg: DpSgdConfig,
    ledger: AccountLedger,
    rng: RandomSource,
    step_id: int,
    clip_hook: Callable[[np.ndarray], None] | None = None,
) -> tuple[GradientRelease, AccountLedger]:
    """Clip, average, account, noise: one private release from raw gradients.

    The budget is charged before noise is sampled, so a BudgetExceeded
    leaves both the ledger and the rng stream untouched and no release
    escapes. ``clip_hook`` sees each clipped gradient, for norm audits.
    """
    if len(per_example) == 0:
        raise EmptyDataset("release needs at least one gradient")
    n = len(per_example[0])
    clipped = []
    for g in per_example:
        c = l2_clip(g, cfg.clip_bound)
        if len(c) != n:
            raise ShapeError("per-example gradients must all have the same length")
        if clip_hook is not None:
            clip_hook(c)
        clipped.append(c)
    batch = len(clipped)
    acc = np.zeros(n)
    for c in clipped:  # fixed index order keeps the sum bit-deterministic
        acc += c
    acc /= batch

    if cfg.noisy:
        new_ledger = compose(ledger, f"release step {step_id}", cfg.step_params)
        sigma = noise_sigma(cfg, batch)
        if sigma > 0.0:
            acc = acc + rng.normals(n) * sigma
        spent = cfg.step_params
    else:
        new_ledger = ledger
        spent = ZERO_SPEND

    release = GradientRelease(
        step_id=step_id,
        vector=acc,
        spent=spent,
        clip_bound=cfg.clip_bound,
        batch_size=batch,
        noisy=cfg.noisy,
    )
    return release, new_ledger


def train_step(
    net: Network,
    batch: Sequence,
    cfg: DpSgdConfig,
    ledger: AccountLedger,
    rng: RandomSource,
    step_id: int,
    clip_hook: Callable[[np.ndarray], None] | None = None,
) -> tuple[GradientRelease, AccountLedger]:
    """Per-example gradients for the batch, then one private release."""
    grads = per_example_gradients(net, batch)
    return dp_gradient_release(grads, cfg, ledger, rng, step_id, clip_hook)


class BatchSampler:
    """Cycles through sequences in shuffled epochs, one batch at a time.

    Reshuffles from the given stream whenever an epoch is exhausted; the
    final batch of an epoch may be smaller than batch_size.
    """

    def __init__(self, sequences: Sequence, batch_size: int, rng: RandomSource):
        if len(sequences) == 0:
            raise EmptyDataset("sampler needs at least one sequence")
        if batch_size < 1:
            raise InvalidValue("batch size must be positive")
        self._sequences = list(sequences)
        self._batch_size = batch_size
        self._rng = rng
        self._queue: list[int] = []

    def next_batch(self) -> list:
        if not self._queue:
            self._queue = list(self._rng.permutation(len(self._sequences)))
        take, self._queue = self._queue[: self._batch_size], self._queue[self._batch_size :]
        return [self._sequences[i] for i in take]


def warm_start(
    net: Network,
    sequences: Sequence,
    epochs: int,
    learning_rate: float,
    batch_size: int,
    rng: RandomSource,
) -> Network:
    """Non-private mini-batch gradient descent, used to pre-train on public data.

    Each epoch shuffles once and walks the data in batches; the update is
    the unclipped, unnoised mean of per-example gradients. epochs = 0
    returns the network unchanged.
    """
    if len(sequences) == 0:
        raise EmptyDataset("warm start needs at least one sequence")
    if epochs < 0:
        raise InvalidValue("epochs must be >= 0")
    if batch_size < 1:
        raise InvalidValue("batch size must be positive")
    seqs = list(sequences)
    for _ in range(epochs):
        order = rng.permutation(len(seqs))
        for start in range(0, len(seqs), batch_size):
            batch = [seqs[i] for i in order[start : start + batch_size]]
            grads = per_example_gradients(net, batch)
            acc = np.zeros_like(grads[0])
            for g in grads:
                acc += g
            acc /= len(grads)
            net = apply_update(net, acc, learning_rate)
    return net
