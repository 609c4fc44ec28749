"""Split-half gradient grouping and the cosine variance proxy.

Given per-sample gradients r_1..r_b of a mini-batch, the two half means are
G1 = mean(r_1, r_3, ...) and G2 = mean(r_2, r_4, ...) (1-indexed odd and
even positions). Per module, phi = eta^2 * (1 - cos(G1, G2)) measures how
much of the mini-batch gradient is sampling noise: 0 when the halves agree,
eta^2 when they are orthogonal. The full sampling-variance estimate scales
phi by the squared gradient norm and a finite-population factor
(n-b)/(2n-b); both it and the brute-force oracle report variance per
parameter so modules of different sizes are comparable.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .models import ModulePartition
from .tensor import ShapeError, gradients


class GroupingError(ValueError):
    """The per-sample gradients cannot be split as requested."""


@dataclass(frozen=True)
class GroupedGradients:
    """Per-module half-batch mean gradients plus the full mean.

    ``g1[name]``/``g2[name]`` are the odd/even half means for that module's
    flat slice, ``g[name]`` the full mini-batch mean, ``b`` the batch size.
    """

    names: tuple
    g1: dict
    g2: dict
    g: dict
    b: int

    @classmethod
    def from_flat(cls, g1_flat: np.ndarray, g2_flat: np.ndarray, g_flat: np.ndarray,
                  partition: ModulePartition, b: int) -> "GroupedGradients":
        idx = partition.flat_indices()
        names = partition.names
        return cls(
            names=names,
            g1={n: g1_flat[idx[n]] for n in names},
            g2={n: g2_flat[idx[n]] for n in names},
            g={n: g_flat[idx[n]] for n in names},
            b=b,
        )

    @classmethod
    def from_half_means(cls, g1_flat: np.ndarray, g2_flat: np.ndarray,
                        partition: ModulePartition, b: int) -> "GroupedGradients":
        """Build from two half-batch mean gradients; g = (g1 + g2) / 2."""
        return cls.from_flat(g1_flat, g2_flat, (g1_flat + g2_flat) / 2.0, partition, b)


@dataclass(frozen=True)
class PhiEstimate:
    """Per-module variance proxy phi = eta^2 * (1 - cosine), in partition order."""

    eta: float
    names: tuple
    phi: np.ndarray
    cosine: np.ndarray

    def phi_of(self, name: str) -> float:
        return float(self.phi[self.names.index(name)])


def split_groups(per_sample_grads, partition: ModulePartition) -> GroupedGradients:
    """Split per-sample flat gradients into odd/even half means per module.

    ``per_sample_grads`` is a sequence (or [b, d] array) of flat full-network
    gradients, one per sample, in batch order. The batch size must be even.
    """
    arr = np.asarray(per_sample_grads, dtype=np.float64)
    if arr.ndim != 2:
        raise GroupingError(f"per-sample gradients must be a list of flat vectors, got shape {arr.shape}")
    b = arr.shape[0]
    if b < 2 or b % 2 != 0:
        raise GroupingError(
            f"batch size must be even and >= 2 to split into halves, got {b}; "
            "drop or pad the final sample")
    if arr.shape[1] != partition.total_size:
        raise GroupingError(
            f"gradient length {arr.shape[1]} does not match partition size {partition.total_size}")
    g1 = arr[0::2].mean(axis=0)
    g2 = arr[1::2].mean(axis=0)
    g = arr.mean(axis=0)
    return GroupedGradients.from_flat(g1, g2, g, partition, b)


def cosine_similarity(a: np.ndarray, b: np.ndarray, eps_norm: float = 1e-12) -> float:
    """dot(a,b) / (|a||b|); defined as 0 when either norm is below eps_norm,
    so a module with vanishing gradient signal reads as maximally noisy."""
    a = np.asarray(a, dtype=np.float64).reshape(-1)
    b = np.asarray(b, dtype=np.float64).reshape(-1)
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: lengths differ: {a.size} vs {b.size}")
    # rescale huge vectors so the squared sums cannot overflow
    ma = float(np.max(np.abs(a), initial=0.0))
    mb = float(np.max(np.abs(b), initial=0.0))
    if ma > 1e150:
        a = a / ma
    if mb > 1e150:
        b = b / mb
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na < eps_norm or nb < eps_norm or not (np.isfinite(na) and np.isfinite(nb)):
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def phi_estimate(groups: GroupedGradients, eta: float) -> PhiEstimate:
    """Per-module phi = eta^2 * (1 - cos(G1, G2)); eta=1 omits the learning rate."""
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    cos = np.array([cosine_similarity(groups.g1[n], groups.g2[n]) for n in groups.names])
    return PhiEstimate(eta=eta, names=groups.names, phi=(eta * eta) * (1.0 - cos), cosine=cos)


def full_variance_estimate(groups: GroupedGradients, n: int, eta: float) -> np.ndarray:
    """Per-module, per-parameter sampling-variance estimate.

    (n-b)/(2n-b) * phi * |g|^2 / d_module, with the single-iteration phi and
    squared norm standing in for their expectations. Zero when b == n (a
    full-batch gradient has no sampling variance); the leading factor tends
    to 1/2 as n grows.
    """
    if n < groups.b:
        raise ValueError(f"dataset size n={n} must be >= batch size b={groups.b}")
    factor = (n - groups.b) / (2.0 * n - groups.b)
    est = phi_estimate(groups, eta)
    norms = np.array([np.dot(groups.g[m], groups.g[m]) for m in groups.names])
    dims = np.array([max(1, groups.g[m].size) for m in groups.names], dtype=np.float64)
    return factor * est.phi * norms / dims


def per_sample_gradients(model, inputs, targets, mask_seed: int,
                         workers: int = 1, mask_fraction=None) -> np.ndarray:
    """[batch, d] per-sample flat gradients via one backward per sample.

    Sample j is evaluated on its own single-sample graph using row j of the
    iteration's masks and feature noise, so the mean over any subset of rows
    equals the gradient of that subset's mean loss.
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    batch = inputs.shape[0]
    masks, noise = model.draw_noise(mask_seed, batch, mask_fraction)
    params = model.params

    def one(j):
        m = None if masks is None else masks[j:j + 1]
        nz = None if noise is None else noise[:, :, j:j + 1, :]
        loss = model.loss_given_noise(inputs[j:j + 1], targets[j:j + 1], m, nz)
        return np.concatenate(gradients(loss, params))

    if workers <= 1:
        rows = [one(j) for j in range(batch)]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(batch)))
    return np.stack(rows)


def brute_force_variance_oracle(model, dataset, w, b: int, resamples: int, seed: int,
                                replace: bool = True, mask_seed: int = 0) -> np.ndarray:
    """Per-module, per-parameter gradient sampling variance by enumeration.

    Computes the exact full-dataset gradient, then averages
    |g_batch - grad_full|^2 / d_module over ``resamples`` mini-batches of
    size b (drawn with replacement by default). Independent of the cosine
    estimator by construction.
    """
    inputs, targets = dataset
    n = np.asarray(inputs).shape[0]
    if b > n:
        raise ValueError(f"batch size b={b} exceeds dataset size n={n}")
    if resamples < 100:
        raise ValueError(f"resamples must be >= 100, got {resamples}")
    if w is not None:
        from .tensor import load_params
        load_params(model.params, np.asarray(w, dtype=np.float64))

    per_sample = per_sample_gradients(model, inputs, targets, mask_seed)
    grad_full = per_sample.mean(axis=0)

    idx = model.partition.flat_indices()
    names = model.partition.names
    rng = np.random.default_rng(seed)
    acc = np.zeros(len(names))
    for _ in range(resamples):
        if replace:
            pick = rng.integers(0, n, size=b)
        else:
            pick = rng.permutation(n)[:b]
        g = per_sample[pick].mean(axis=0)
        diff = g - grad_full
        acc += np.array([np.dot(diff[idx[m]], diff[idx[m]]) / max(1, idx[m].size)
                         for m in names])
    return acc / resamples
