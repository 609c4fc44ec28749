"""Synthetic multi-module regression models.

A trunk MLP feeds N pyramid branches. Branch i pair-averages the trunk
features i-1 times (so deeper branches see coarser, smoother inputs),
projects them to a common width with a branch-specific lateral matrix, and
a prediction head maps them to the output. The head is either one parameter
set shared by every branch or an independent set per branch: sharing
multiplies the number of gradient-contributing evaluations the head sees
per optimization step, which is the mechanism these models exist to expose.

Optional per-step randomness: a fraction of output elements can be masked
out of the loss (at least one survives per sample), and each branch can be
evaluated ``proposals`` times on independently noised copies of its
features.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (Tensor, add, masked_select, matmul, multiply, relu,
                     squared_error)


class ConfigError(ValueError):
    """A configuration violates one of its declared constraints."""


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int = 32
    trunk_widths: tuple = (32,)
    levels: int = 4
    head_width: int = 16
    output_dim: int = 4
    head_mode: str = "shared"
    pyramid: bool = True
    mask_fraction: float = 0.0
    proposals: int = 1
    proposal_noise_std: float = 0.0

    def validate(self):
        bad = []
        if self.input_dim < 1:
            bad.append(f"input_dim must be >= 1, got {self.input_dim}")
        if not self.trunk_widths or any(w < 1 for w in self.trunk_widths):
            bad.append(f"trunk_widths must be non-empty positive, got {self.trunk_widths}")
        if self.levels < 1:
            bad.append(f"levels must be >= 1, got {self.levels}")
        if self.head_width < 1:
            bad.append(f"head_width must be >= 1, got {self.head_width}")
        if self.output_dim < 1:
            bad.append(f"output_dim must be >= 1, got {self.output_dim}")
        if self.head_mode not in ("shared", "independent"):
            bad.append(f"head_mode must be 'shared' or 'independent', got {self.head_mode!r}")
        if not 0.0 <= self.mask_fraction < 1.0:
            bad.append(f"mask_fraction must lie in [0, 1), got {self.mask_fraction}")
        if self.proposals < 1:
            bad.append(f"proposals must be >= 1, got {self.proposals}")
        if self.proposal_noise_std < 0:
            bad.append(f"proposal_noise_std must be >= 0, got {self.proposal_noise_std}")
        if not self.pyramid and self.levels != 1:
            bad.append(f"pyramid=false feeds a single level; set levels=1 (got {self.levels})")
        if self.pyramid and self.levels >= 1 and self.trunk_widths:
            depth = self.levels - 1
            trunk_out = self.trunk_widths[-1]
            if trunk_out % (1 << depth) != 0 or trunk_out < (1 << depth):
                bad.append(
                    f"trunk output width {trunk_out} must be divisible by 2^(levels-1)={1 << depth} "
                    "so every branch can pair-average it")
        if bad:
            raise ConfigError("invalid model config: " + "; ".join(bad))


@dataclass(frozen=True)
class ModulePartition:
    """Ordered named parameter groups with a designated anchor module.

    ``modules`` maps each name to the indices of its parameter tensors in
    the owning model's parameter list; ``param_sizes`` gives the flat length
    of every parameter so module slices of a packed gradient vector can be
    resolved.
    """

    modules: tuple            # ((name, (param ids...)), ...)
    param_sizes: tuple
    anchor_index: int = 0

    def __post_init__(self):
        if self.h < 2:
            raise ConfigError(f"partition needs at least 2 modules, got {self.h}")
        if not 0 <= self.anchor_index < self.h:
            raise ConfigError(f"anchor_index {self.anchor_index} out of range for {self.h} modules")
        seen = [i for _, ids in self.modules for i in ids]
        if sorted(seen) != list(range(len(self.param_sizes))):
            raise ConfigError("every parameter must belong to exactly one module")

    @property
    def h(self) -> int:
        return len(self.modules)

    @property
    def names(self) -> tuple:
        return tuple(name for name, _ in self.modules)

    @property
    def anchor_name(self) -> str:
        return self.modules[self.anchor_index][0]

    @property
    def total_size(self) -> int:
        return int(sum(self.param_sizes))

    def flat_indices(self) -> dict:
        """Index array into the packed flat vector for each module."""
        offsets = np.concatenate([[0], np.cumsum(self.param_sizes)]).astype(np.intp)
        out = {}
        for name, ids in self.modules:
            parts = [np.arange(offsets[i], offsets[i + 1], dtype=np.intp) for i in ids]
            out[name] = np.concatenate(parts) if parts else np.zeros(0, dtype=np.intp)
        return out


def _halving_matrix(width: int) -> np.ndarray:
    """[width, width/2] constant matrix averaging adjacent pairs."""
    half = width // 2
    m = np.zeros((width, half))
    for j in range(half):
        m[2 * j, j] = 0.5
        m[2 * j + 1, j] = 0.5
    return m


class SyntheticModel:
    """Trunk + pyramid branches + shared/independent heads, with MSE loss."""

    def __init__(self, config: ModelConfig, seed: int):
        config.validate()
        self.config = config
        rng = np.random.default_rng(seed)
        self.params: list[Tensor] = []
        ids = {"trunk": [], "pyramid": [], "heads": [[] for _ in range(config.levels)]}

        def linear(fan_in, fan_out, bucket):
            w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(fan_in), (fan_in, fan_out)),
                       requires_grad=True)
            b = Tensor(np.zeros(fan_out), requires_grad=True)
            bucket.append(len(self.params))
            self.params.append(w)
            bucket.append(len(self.params))
            self.params.append(b)
            return w, b

        self._trunk = []
        fan = config.input_dim
        for width in config.trunk_widths:
            self._trunk.append(linear(fan, width, ids["trunk"]))
            fan = width
        trunk_out = fan

        self._laterals = []
        if config.pyramid:
            for lvl in range(config.levels):
                self._laterals.append(linear(trunk_out >> lvl, config.head_width, ids["pyramid"]))
            head_in = config.head_width
        else:
            head_in = trunk_out

        self._heads = []
        n_heads = config.levels if config.head_mode == "independent" else 1
        for h in range(n_heads):
            bucket = ids["heads"][h]
            h1 = linear(head_in, config.head_width, bucket)
            h2 = linear(config.head_width, config.output_dim, bucket)
            self._heads.append((h1, h2))

        groups = [("trunk", tuple(ids["trunk"]))]
        if config.pyramid:
            groups.append(("pyramid", tuple(ids["pyramid"])))
        if config.head_mode == "independent":
            for lvl in range(config.levels):
                groups.append((f"head_{lvl + 1}", tuple(ids["heads"][lvl])))
        else:
            groups.append(("head", tuple(ids["heads"][0])))
        self.partition = ModulePartition(
            modules=tuple(groups),
            param_sizes=tuple(p.size for p in self.params),
            anchor_index=0,
        )

        self._halvers = {}
        w = trunk_out
        for _ in range(config.levels - 1):
            self._halvers[w] = Tensor(_halving_matrix(w))
            w //= 2

    @property
    def elements_per_sample(self) -> int:
        """Output elements a single sample contributes to the loss (pre-mask)."""
        c = self.config
        return c.levels * c.proposals * c.output_dim

    def draw_noise(self, mask_seed: int, batch: int, mask_fraction: Optional[float] = None):
        """Per-iteration randomness: boolean keep-masks [batch, E] (or None when
        nothing is masked) and head-input noise [levels, K, batch, head_in]
        (or None when the jitter std is 0). Row j belongs to batch position
        j, so slicing rows yields the exact randomness of a sub-batch."""
        c = self.config
        p = c.mask_fraction if mask_fraction is None else mask_fraction
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"mask_fraction must lie in [0, 1), got {p}")
        rng = np.random.default_rng(np.random.SeedSequence([int(mask_seed) & 0xFFFFFFFF]))
        masks = None
        if p > 0.0:
            e = self.elements_per_sample
            kept = max(1, int(np.floor((1.0 - p) * e)))
            order = np.argsort(rng.random((batch, e)), axis=1)
            masks = np.zeros((batch, e), dtype=bool)
            np.put_along_axis(masks, order[:, :kept], True, axis=1)
        noise = None
        if c.proposal_noise_std > 0.0:
            head_in = c.head_width if c.pyramid else c.trunk_widths[-1]
            noise = rng.normal(0.0, c.proposal_noise_std,
                               (c.levels, c.proposals, batch, head_in))
        return masks, noise

    def _branch_features(self, trunk_feat: Tensor, level: int) -> Tensor:
        f = trunk_feat
        width = self.config.trunk_widths[-1]
        for _ in range(level):
            f = matmul(f, self._halvers[width])
            width //= 2
        if self.config.pyramid:
            w, b = self._laterals[level]
            f = relu(add(matmul(f, w), b))
        return f

    def _head_output(self, feat: Tensor, level: int) -> Tensor:
        (w1, b1), (w2, b2) = self._heads[level if self.config.head_mode == "independent" else 0]
        hidden = relu(add(matmul(feat, w1), b1))
        return add(matmul(hidden, w2), b2)

    def loss_given_noise(self, inputs, targets, masks, noise) -> Tensor:
        """Scalar loss from explicit per-iteration randomness (see draw_noise)."""
        c = self.config
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        t = targets if isinstance(targets, Tensor) else Tensor(targets)
        if x.ndim != 2 or t.ndim != 2 or x.shape[0] != t.shape[0]:
            raise ConfigError(f"inputs {x.shape} and targets {t.shape} must be 2-D with equal batch")
        batch = x.shape[0]

        h = x
        for w, b in self._trunk:
            h = relu(add(matmul(h, w), b))

        terms = []          # (scalar mean of squared errors, element count)
        for lvl in range(c.levels):
            feat = self._branch_features(h, lvl)
            for k in range(c.proposals):
                fin = feat if noise is None else add(feat, Tensor(noise[lvl, k]))
                out = self._head_output(fin, lvl)
                if masks is None:
                    terms.append((squared_error(out, t), batch * c.output_dim))
                else:
                    col = (lvl * c.proposals + k) * c.output_dim
                    block = masks[:, col:col + c.output_dim]
                    kept = int(block.sum())
                    if kept == 0:
                        continue
                    terms.append((squared_error(masked_select(out, block),
                                                masked_select(t, block)), kept))
        total = sum(n for _, n in terms)
        if total == 0:
            raise ConfigError("all output elements are masked; nothing contributes to the loss")
        acc = multiply(terms[0][0], Tensor(terms[0][1] / total))
        for se, n in terms[1:]:
            acc = add(acc, multiply(se, Tensor(n / total)))
        return acc

    def loss(self, inputs, targets, mask_seed: int,
             mask_fraction: Optional[float] = None) -> Tensor:
        """Scalar MSE over the kept output elements of every branch evaluation."""
        batch = np.asarray(inputs).shape[0]
        masks, noise = self.draw_noise(mask_seed, batch, mask_fraction)
        return self.loss_given_noise(inputs, targets, masks, noise)


def build_model(config: ModelConfig, seed: int):
    """Construct a model; returns (parameters, partition, forward closure).

    The closure maps (inputs, targets, mask_seed) to the scalar loss.
    """
    model = SyntheticModel(config, seed)
    return model.params, model.partition, model.loss


def forward_loss(model: SyntheticModel, inputs, targets,
                 mask_fraction: float, mask_seed: int) -> Tensor:
    """Loss with an explicit mask fraction overriding the model config."""
    return model.loss(inputs, targets, mask_seed, mask_fraction=mask_fraction)


class TwoBlockLinearModel:
    """x @ A @ B regression split into 'trunk' (A) and 'head' (B) modules.

    The benchmark model for variance-estimator checks: per-sample gradients
    are cheap and far from zero at a random initialization.
    """

    def __init__(self, input_dim: int, hidden_dim: int, output_dim: int, seed: int,
                 init_scale: float = 1.0):
        rng = np.random.default_rng(seed)
        a = Tensor(rng.normal(0.0, init_scale / np.sqrt(input_dim), (input_dim, hidden_dim)),
                   requires_grad=True)
        b = Tensor(rng.normal(0.0, init_scale / np.sqrt(hidden_dim), (hidden_dim, output_dim)),
                   requires_grad=True)
        self.params = [a, b]
        self.partition = ModulePartition(
            modules=(("trunk", (0,)), ("head", (1,))),
            param_sizes=(a.size, b.size),
            anchor_index=0,
        )

    def draw_noise(self, mask_seed, batch, mask_fraction=None):
        return None, None

    def loss_given_noise(self, inputs, targets, masks, noise) -> Tensor:
        x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
        t = targets if isinstance(targets, Tensor) else Tensor(targets)
        return squared_error(matmul(matmul(x, self.params[0]), self.params[1]), t)

    def loss(self, inputs, targets, mask_seed: int, mask_fraction=None) -> Tensor:
        return self.loss_given_noise(inputs, targets, None, None)


def make_dataset(n: int, input_dim: int, output_dim: int, noise_std: float, seed: int):
    """Inputs ~ N(0,1) and targets = fixed random linear map + gaussian noise."""
    if n < 2:
        raise ConfigError(f"dataset size must be >= 2, got {n}")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    inputs = rng.normal(0.0, 1.0, (n, input_dim))
    mapping = rng.normal(0.0, 1.0 / np.sqrt(input_dim), (input_dim, output_dim))
    targets = inputs @ mapping
    if noise_std > 0:
        targets = targets + rng.normal(0.0, noise_std, (n, output_dim))
    return inputs, targets
