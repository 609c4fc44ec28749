"""Experiment runner: simulated data-parallel batching, learning-rate
schedules, variance tracing, ablation arms, and CSV emission.

A run draws even-sized mini-batches from a synthetic dataset, trains a
multi-module model with one of the modulated optimizers, and every tau
iterations (aligned with modulation) records per-module rows of the
learning-rate-free variance proxy, the current multiplier, the effective
learning rate, the loss, and the squared gradient norm. The two half-batch
gradients feeding the proxy are obtained from one backward pass per half,
which equals the mean of that half's per-sample gradients.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from .models import (ConfigError, ModelConfig, SyntheticModel,
                     TwoBlockLinearModel, make_dataset)
from .optim import AgvmAdamW, AgvmSgd, Modulator, OptimizerError, force_unit_mu
from .tensor import gradients, load_params, pack_params
from .variance import (GroupedGradients, brute_force_variance_oracle,
                       full_variance_estimate, per_sample_gradients,
                       phi_estimate, split_groups)

PHI_EPS = 1e-12


@dataclass(frozen=True)
class LrSchedule:
    base_lr: float = 0.04
    base_batch: int = 32
    warmup_iters: int = 0
    scaling: str = "linear-then-sqrt"
    decay: str = "multistep"
    milestones: tuple = ()
    decay_factor: float = 0.1
    poly_power: float = 0.9
    total_iterations: int = 1

    def peak(self, b: int) -> float:
        """Peak learning rate after batch-size scaling: linear up to batch
        128, square-root growth beyond it (in linear-then-sqrt mode)."""
        if self.scaling == "linear":
            return self.base_lr * (b / self.base_batch)
        if self.scaling == "linear-then-sqrt":
            if b <= 128:
                return self.base_lr * (b / self.base_batch)
            return self.base_lr * (128 / self.base_batch) * math.sqrt(b / 128)
        raise ConfigError(f"unknown lr scaling mode {self.scaling!r}")


def lr_at(schedule: LrSchedule, t: int, b: int) -> float:
    """Learning rate after t completed iterations at batch size b.

    Linear warmup from peak/warmup_iters to the peak, then multistep or
    polynomial decay.
    """
    if t < 0 or t > schedule.total_iterations:
        raise ConfigError(f"iteration {t} outside [0, {schedule.total_iterations}]")
    peak = schedule.peak(b)
    if schedule.warmup_iters > 0 and t < schedule.warmup_iters:
        return peak * (t + 1) / schedule.warmup_iters
    if schedule.decay == "multistep":
        drops = sum(1 for m in schedule.milestones if t >= m)
        return peak * schedule.decay_factor ** drops
    if schedule.decay == "poly":
        frac = t / max(1, schedule.total_iterations)
        return peak * (1.0 - frac) ** schedule.poly_power
    raise ConfigError(f"unknown lr decay mode {schedule.decay!r}")


ABLATIONS = ("none", "independent_heads", "no_pyramid", "mask", "proposals")


@dataclass(frozen=True)
class ExperimentConfig:
    """Flat run configuration; every field is a config-file / CLI key."""

    # model
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
    # dataset
    n_samples: int = 2048
    noise_std: float = 0.1
    dataset_seed: int = 7
    # optimizer
    optimizer: str = "sgd"
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    weight_decay: float = 1e-4
    # schedule
    base_lr: float = 0.04
    base_batch: int = 32
    warmup_iters: int = 50
    lr_scaling: str = "linear-then-sqrt"
    lr_decay: str = "multistep"
    milestones: tuple = ()
    decay_factor: float = 0.1
    poly_power: float = 0.9
    # run
    batch_size: int = 256
    total_iterations: int = 2000
    seed: int = 1
    workers: int = 1
    # modulation (tau=0 picks the default: 10, or 5 above batch 1024)
    agvm_enabled: bool = True
    tau: int = 0
    alpha: float = 0.97
    clip_lo: float = 0.1
    clip_hi: float = 10.0
    eps_ratio: float = 1e-12
    anchor: int = 0
    # ablation arm applied on top of the model fields
    ablation: str = "none"

    def validate(self):
        bad = []
        if self.batch_size < 2 or self.batch_size % 2 != 0:
            bad.append(f"batch_size must be even and >= 2, got {self.batch_size}")
        if self.batch_size > self.n_samples:
            bad.append(f"batch_size {self.batch_size} exceeds n_samples {self.n_samples}")
        if self.total_iterations < 0:
            bad.append(f"total_iterations must be >= 0, got {self.total_iterations}")
        if self.warmup_iters >= max(1, self.total_iterations) and self.warmup_iters > 0:
            bad.append(f"warmup_iters {self.warmup_iters} must be < total_iterations "
                       f"{self.total_iterations}")
        if self.optimizer not in ("sgd", "adamw"):
            bad.append(f"optimizer must be 'sgd' or 'adamw', got {self.optimizer!r}")
        if self.ablation not in ABLATIONS and not self._parse_ablation_ok():
            bad.append(f"unknown ablation {self.ablation!r}; expected one of {ABLATIONS} "
                       "or mask:<fraction> / proposals:<count>")
        if self.tau < 0:
            bad.append(f"tau must be >= 0 (0 = default), got {self.tau}")
        if self.workers < 1:
            bad.append(f"workers must be >= 1, got {self.workers}")
        if bad:
            raise ConfigError("invalid experiment config: " + "; ".join(bad))
        self.model_config().validate()

    def _parse_ablation_ok(self) -> bool:
        try:
            self._ablation_fields()
            return True
        except ConfigError:
            return False

    def _ablation_fields(self) -> dict:
        """Model-field overrides implied by the ablation arm."""
        a = self.ablation
        if a == "none":
            return {}
        if a == "independent_heads":
            return {"head_mode": "independent"}
        if a == "no_pyramid":
            return {"pyramid": False, "levels": 1}
        if a == "mask":
            return {"mask_fraction": 0.75}
        if a.startswith("mask:"):
            return {"mask_fraction": float(a.split(":", 1)[1])}
        if a == "proposals":
            a = "proposals:8"
        if a.startswith("proposals:"):
            # replica evaluations only matter through the feature jitter they
            # average, so the proposal arms always run with it enabled
            std = self.proposal_noise_std if self.proposal_noise_std > 0 else 0.25
            return {"proposals": int(a.split(":", 1)[1]), "proposal_noise_std": std}
        raise ConfigError(f"unknown ablation {a!r}")

    def model_config(self) -> ModelConfig:
        base = dict(
            input_dim=self.input_dim, trunk_widths=tuple(self.trunk_widths),
            levels=self.levels, head_width=self.head_width, output_dim=self.output_dim,
            head_mode=self.head_mode, pyramid=self.pyramid,
            mask_fraction=self.mask_fraction, proposals=self.proposals,
            proposal_noise_std=self.proposal_noise_std,
        )
        base.update(self._ablation_fields())
        return ModelConfig(**base)

    def schedule(self) -> LrSchedule:
        return LrSchedule(
            base_lr=self.base_lr, base_batch=self.base_batch,
            warmup_iters=self.warmup_iters, scaling=self.lr_scaling,
            decay=self.lr_decay, milestones=tuple(self.milestones),
            decay_factor=self.decay_factor, poly_power=self.poly_power,
            total_iterations=max(1, self.total_iterations),
        )

    def effective_tau(self) -> int:
        if self.tau > 0:
            return self.tau
        return 5 if self.batch_size > 1024 else 10


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _coerce(name: str, kind, raw: str):
    raw = raw.strip()
    if kind is bool:
        word = raw.lower()
        if word not in _BOOL_WORDS:
            raise ConfigError(f"key {name}: expected a boolean, got {raw!r}")
        return _BOOL_WORDS[word]
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if kind is tuple:
        if not raw:
            return ()
        return tuple(int(part) for part in raw.split(","))
    return raw


_FIELD_TYPES = {f.name: (tuple if f.name in ("trunk_widths", "milestones") else f.type)
                for f in fields(ExperimentConfig)}
_TYPE_LOOKUP = {"int": int, "float": float, "bool": bool, "str": str, "tuple": tuple,
                int: int, float: float, bool: bool, str: str, tuple: tuple}


def config_from_pairs(pairs: dict, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Apply key=value overrides to a config; unknown keys are a hard error."""
    cfg = base or ExperimentConfig()
    updates = {}
    for key, raw in pairs.items():
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        kind = _TYPE_LOOKUP[_FIELD_TYPES[key]]
        updates[key] = _coerce(key, kind, str(raw))
    return replace(cfg, **updates)


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None,
                env: Optional[dict] = None) -> ExperimentConfig:
    """Config resolution order: defaults < file < AGVM_SEED env < CLI overrides."""
    pairs = {}
    if path is not None:
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                text = line.split("#", 1)[0].strip()
                if not text:
                    continue
                if "=" not in text:
                    raise ConfigError(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
                key, raw = text.split("=", 1)
                pairs[key.strip()] = raw.strip()
    cfg = config_from_pairs(pairs)
    env = os.environ if env is None else env
    if env.get("AGVM_SEED"):
        cfg = config_from_pairs({"seed": env["AGVM_SEED"]}, cfg)
    if overrides:
        cfg = config_from_pairs(overrides, cfg)
    cfg.validate()
    return cfg


@dataclass(frozen=True)
class TraceRow:
    iter: int
    module: str
    phi: float          # learning-rate-free proxy, 1 - cos(G1, G2)
    mu: float
    eff_lr: float
    loss: float
    grad_norm_sq: float


@dataclass
class RunResult:
    final_loss: float
    trace: list
    summary: dict


def _pool_map(fn, items, workers: int):
    if workers <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _mask_seed(seed: int, t: int) -> int:
    return int(np.random.SeedSequence([seed & 0xFFFFFFFF, t]).generate_state(1)[0])


class _Runner:
    """Shared machinery for training runs and update-free variance traces."""

    def __init__(self, config: ExperimentConfig):
        config.validate()
        self.config = config
        self.inputs, self.targets = make_dataset(
            config.n_samples, config.input_dim, config.output_dim,
            config.noise_std, config.dataset_seed)
        self.model = SyntheticModel(config.model_config(), seed=config.seed)
        self.partition = self.model.partition
        self.schedule = config.schedule()
        self.tau = config.effective_tau()
        self.batch_rng = np.random.default_rng(
            np.random.SeedSequence([config.seed & 0xFFFFFFFF, 0x5EED]))
        self.w = pack_params(self.model.params)
        mod = Modulator(self.partition.h, anchor=config.anchor, tau=self.tau,
                        alpha=config.alpha, clip_lo=config.clip_lo,
                        clip_hi=config.clip_hi, eps_ratio=config.eps_ratio)
        if not config.agvm_enabled:
            force_unit_mu(mod)
        if config.optimizer == "adamw":
            self.opt = AgvmAdamW(self.partition, beta1=config.beta1, beta2=config.beta2,
                                 eps=config.eps_adam, weight_decay=config.weight_decay,
                                 modulator=mod)
        else:
            self.opt = AgvmSgd(self.partition, beta1=config.beta1,
                               weight_decay=config.weight_decay, modulator=mod)

    def draw_batch(self) -> np.ndarray:
        return self.batch_rng.choice(self.config.n_samples, size=self.config.batch_size,
                                     replace=False)

    def batch_loss_and_grad(self, idx: np.ndarray, t: int):
        """One forward/backward over the whole mini-batch; (loss, flat grad)."""
        x, y = self.inputs[idx], self.targets[idx]
        masks, noise = self.model.draw_noise(_mask_seed(self.config.seed, t), len(idx))
        loss = self.model.loss_given_noise(x, y, masks, noise)
        grad = np.concatenate(gradients(loss, self.model.params))
        return float(loss.data[0]), grad

    def grouped_loss_and_grad(self, idx: np.ndarray, t: int):
        """Two half-batch backwards; (loss, flat grad, GroupedGradients).

        Half k's gradient equals the mean of its per-sample gradients, so
        the pair is exactly the odd/even split of the batch.
        """
        x, y = self.inputs[idx], self.targets[idx]
        masks, noise = self.model.draw_noise(_mask_seed(self.config.seed, t), len(idx))

        def half(offset):
            m = None if masks is None else masks[offset::2]
            nz = None if noise is None else noise[:, :, offset::2, :]
            loss = self.model.loss_given_noise(x[offset::2], y[offset::2], m, nz)
            return float(loss.data[0]), np.concatenate(gradients(loss, self.model.params))

        (l1, g1), (l2, g2) = _pool_map(half, (0, 1), self.config.workers)
        groups = GroupedGradients.from_half_means(g1, g2, self.partition, len(idx))
        grad = (g1 + g2) / 2.0
        return 0.5 * (l1 + l2), grad, groups

    def trace_rows(self, t: int, loss: float, groups: GroupedGradients,
                   mu: np.ndarray, eta: float) -> list:
        est = phi_estimate(groups, eta=1.0)
        rows = []
        for i, name in enumerate(self.partition.names):
            g = groups.g[name]
            rows.append(TraceRow(iter=t, module=name, phi=float(est.phi[i]),
                                 mu=float(mu[i]), eff_lr=eta * float(mu[i]),
                                 loss=loss, grad_norm_sq=float(np.dot(g, g))))
        return rows


def run_experiment(config: ExperimentConfig) -> RunResult:
    """Train per the config; deterministic in (config, seed).

    The trace has per-module rows at iteration 0 and every tau iterations
    thereafter, aligned with modulation events. A non-finite loss or
    gradient halts the run and flags the summary with status=NaN.
    """
    r = _Runner(config)
    cfg = config
    trace = []
    status, diverged_at = "ok", -1
    final_loss = math.nan

    idx0 = r.draw_batch()
    loss0, _, groups0 = r.grouped_loss_and_grad(idx0, t=0)
    trace.extend(r.trace_rows(0, loss0, groups0, r.opt.modulator.mu, lr_at(r.schedule, 0, cfg.batch_size)))
    final_loss = loss0

    for t in range(1, cfg.total_iterations + 1):
        idx = r.draw_batch()
        eta = lr_at(r.schedule, t - 1, cfg.batch_size)
        is_trace = t % r.tau == 0
        if is_trace:
            loss, grad, groups = r.grouped_loss_and_grad(idx, t)
        else:
            loss, grad = r.batch_loss_and_grad(idx, t)
            groups = None
        if not math.isfinite(loss):
            status, diverged_at = "NaN", t
            break
        final_loss = loss
        try:
            r.opt.step(r.w, grad, eta, groups=groups)
        except OptimizerError:
            status, diverged_at = "NaN", t
            break
        load_params(r.model.params, r.w)
        if is_trace:
            trace.extend(r.trace_rows(t, loss, groups, r.opt.modulator.mu, eta))

    summary = summarize(trace, r.partition.names, r.partition.anchor_name)
    summary["status"] = status
    summary["diverged_at"] = diverged_at
    summary["final_loss"] = final_loss
    summary["iterations_run"] = cfg.total_iterations if status == "ok" else diverged_at
    return RunResult(final_loss=final_loss, trace=trace, summary=summary)


def variance_trace(config: ExperimentConfig) -> RunResult:
    """Observe per-module variance without updating: forward/backward only."""
    r = _Runner(config)
    trace = []
    loss = math.nan
    for t in range(0, config.total_iterations + 1):
        if t % r.tau != 0 and t != 0:
            continue
        idx = r.draw_batch()
        loss, _, groups = r.grouped_loss_and_grad(idx, t)
        eta = lr_at(r.schedule, max(0, t - 1), config.batch_size)
        trace.extend(r.trace_rows(t, loss, groups, r.opt.modulator.mu, eta))
    summary = summarize(trace, r.partition.names, r.partition.anchor_name)
    summary["status"] = "ok"
    summary["final_loss"] = loss
    return RunResult(final_loss=loss, trace=trace, summary=summary)


def summarize(trace: list, names: tuple, anchor_name: str) -> dict:
    """Per-module time averages over the post-warmstart trace (iter >= 1)."""
    rows = [row for row in trace if row.iter >= 1]
    out = {}
    by_module = {n: [row for row in rows if row.module == n] for n in names}
    for n in names:
        series = by_module[n]
        if not series:
            continue
        phis = np.array([row.phi for row in series])
        mus = np.array([row.mu for row in series])
        out[f"phi_avg_{n}"] = float(phis.mean())
        out[f"mean_abs_log_mu_{n}"] = float(np.abs(np.log(mus)).mean())
        half = len(phis) // 2
        if half >= 1:
            first = max(phis[:half].mean(), PHI_EPS)
            out[f"phi_late_ratio_{n}"] = float(phis[half:].mean() / first)
    gap = phi_gap(trace, anchor_name)
    if gap is not None:
        out["phi_gap"] = gap
    return out


def phi_gap(trace: list, anchor_name: str = "trunk") -> Optional[float]:
    """Time-averaged log(phi_anchor / phi_head) over iterations >= 1.

    Head phi is the mean over the modules named head*; positive gaps mean
    the heads see less gradient noise than the anchor.
    """
    per_iter = {}
    for row in trace:
        if row.iter >= 1:
            per_iter.setdefault(row.iter, {})[row.module] = row.phi
    logs = []
    for t, mods in sorted(per_iter.items()):
        heads = [v for k, v in mods.items() if k.startswith("head")]
        if not heads or anchor_name not in mods:
            continue
        logs.append(math.log((mods[anchor_name] + PHI_EPS) / (float(np.mean(heads)) + PHI_EPS)))
    return float(np.mean(logs)) if logs else None


ABLATION_ARMS = ("shared", "independent_heads", "no_pyramid", "mask_75", "proposals_1",
                 "proposals_8")

_ARM_TO_ABLATION = {
    "shared": "none",
    "independent_heads": "independent_heads",
    "no_pyramid": "no_pyramid",
    "mask_75": "mask:0.75",
    "proposals_1": "proposals:1",
    "proposals_8": "proposals:8",
}


def ablation_suite(base_config: ExperimentConfig, train: bool = False) -> dict:
    """Run every ablation arm with identical seeds; per-arm summaries.

    The base config must be the shared-head pyramid baseline so the arms
    isolate one mechanism each. By default the arms are compared as
    update-free variance traces at their (seed-matched) initial parameters:
    arms train at different speeds, and over a trained trajectory that speed
    difference swamps the architectural effect the phi-gap is meant to
    expose. Pass train=True to train each arm instead.
    """
    if base_config.head_mode != "shared" or not base_config.pyramid:
        raise ConfigError("ablation_suite needs a shared-head pyramid base config")
    if base_config.ablation != "none":
        raise ConfigError("ablation_suite applies its own arms; set ablation=none")
    runner = run_experiment if train else variance_trace
    results = {}
    for arm in ABLATION_ARMS:
        cfg = replace(base_config, ablation=_ARM_TO_ABLATION[arm])
        results[arm] = runner(cfg).summary
    return results


def emit_csv(trace: list, path: str):
    """Write trace rows with 17-significant-digit reals and LF endings."""
    try:
        with open(path, "w", newline="\n") as fh:
            fh.write("iter,module,phi,mu,eff_lr,loss,grad_norm_sq\n")
            for row in trace:
                fh.write(f"{row.iter},{row.module},{row.phi:.17g},{row.mu:.17g},"
                         f"{row.eff_lr:.17g},{row.loss:.17g},{row.grad_norm_sq:.17g}\n")
    except OSError as exc:
        raise OSError(f"cannot write trace CSV to {path}: {exc}") from exc


def read_csv(path: str) -> list:
    """Parse a trace CSV back into rows (inverse of emit_csv)."""
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "iter,module,phi,mu,eff_lr,loss,grad_norm_sq":
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            it, module, phi, mu, eff_lr, loss, gns = line.rstrip("\n").split(",")
            rows.append(TraceRow(int(it), module, float(phi), float(mu),
                                 float(eff_lr), float(loss), float(gns)))
    return rows


def summary_text(summary: dict) -> str:
    """Flat key=value block, one pair per line."""
    lines = []
    for key in sorted(summary):
        val = summary[key]
        if isinstance(val, float):
            lines.append(f"{key}={val:.17g}")
        else:
            lines.append(f"{key}={val}")
    return "\n".join(lines)


# The estimator is derived under near-isotropic per-sample gradient
# fluctuations with a dominant common component; wide layers and inputs
# concentrated around a nonzero mean put the benchmark in that regime.
BENCHMARK = dict(n=512, b=32, input_dim=64, hidden_dim=48, output_dim=64,
                 input_mean=1.0, input_std=0.3, noise_std=0.2, resamples=200)


def oracle_check(seed: int = 0, n: Optional[int] = None, b: Optional[int] = None,
                 resamples: Optional[int] = None) -> dict:
    """Compare the analytic variance estimate against the brute-force oracle
    on the two-block linear regression benchmark.

    Returns per-module estimates, oracle values and relative errors.
    """
    p = dict(BENCHMARK)
    if n is not None:
        p["n"] = n
    if b is not None:
        p["b"] = b
    if resamples is not None:
        p["resamples"] = resamples
    model = TwoBlockLinearModel(p["input_dim"], p["hidden_dim"], p["output_dim"],
                                seed=seed + 1)
    rng = np.random.default_rng(seed + 2)
    inputs = rng.normal(p["input_mean"], p["input_std"], (p["n"], p["input_dim"]))
    mapping = rng.normal(0.0, 1.0 / np.sqrt(p["input_dim"]),
                         (p["input_dim"], p["output_dim"]))
    targets = inputs @ mapping + rng.normal(0.0, p["noise_std"],
                                            (p["n"], p["output_dim"]))

    per_sample = per_sample_gradients(model, inputs, targets, mask_seed=0)
    rng = np.random.default_rng(seed + 3)
    names = model.partition.names
    estimates = np.zeros(len(names))
    for _ in range(p["resamples"]):
        pick = rng.integers(0, p["n"], size=p["b"])
        groups = split_groups(per_sample[pick], model.partition)
        estimates += full_variance_estimate(groups, n=p["n"], eta=1.0)
    estimates /= p["resamples"]

    oracle = brute_force_variance_oracle(model, (inputs, targets), w=None, b=p["b"],
                                         resamples=p["resamples"], seed=seed + 4)
    rel = np.abs(estimates - oracle) / oracle
    out = {}
    for i, name in enumerate(names):
        out[f"estimate_{name}"] = float(estimates[i])
        out[f"oracle_{name}"] = float(oracle[i])
        out[f"rel_err_{name}"] = float(rel[i])
    out["max_rel_err"] = float(rel.max())
    return out
