"""Dataset splitting, the optimiser and schedule, the epoch loop and evaluation."""
from __future__ import annotations

import csv
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from . import metrics
from .errors import ConfigError, DataError, DivergenceError, NumericError
from .model import DeepCap, infer_probs
from .preprocess import InputStack, Pullback, Sample, assemble_input


# --- splitting -------------------------------------------------------------

@dataclass
class SplitSpec:
    ratios: tuple = (0.7, 0.2, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative values summing to 1, got {self.ratios}")


def split_dataset(pullbacks: Sequence, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    """Assign whole pullbacks to (train, val, test), tracking the image-count ratios.

    Pullbacks are visited largest first (ties in a seeded random order);
    each goes to the subset furthest below its target image count, ties to
    the earlier subset. If a subset ends up empty it takes the smallest
    pullback from the subset holding the most pullbacks.
    """
    if len(pullbacks) < 3:
        raise DataError(f"need at least 3 pullbacks for three non-empty subsets, got {len(pullbacks)}")
    sizes = [len(pb) for pb in pullbacks]
    total = sum(sizes)
    rng = np.random.default_rng(spec.seed)
    order = rng.permutation(len(pullbacks)).tolist()
    order.sort(key=lambda i: -sizes[i])          # stable: random order among equal sizes
    targets = [r * total for r in spec.ratios]
    filled = [0, 0, 0]
    groups: list[list[int]] = [[], [], []]
    for i in order:
        need = [targets[s] - filled[s] for s in range(3)]
        s = max(range(3), key=lambda s: (need[s], -s))
        groups[s].append(i)
        filled[s] += sizes[i]
    for s in range(3):
        if not groups[s]:
            donor = max(range(3), key=lambda d: (len(groups[d]), -d))
            smallest = min(groups[donor], key=lambda i: (sizes[i], i))
            groups[donor].remove(smallest)
            groups[s].append(smallest)
    return tuple([pullbacks[i] for i in sorted(g)] for g in groups)


# --- schedule and optimiser ------------------------------------------------

@dataclass
class ScheduleSpec:
    peak_lr: float = 1e-3
    total_steps: int = 100
    warmup_fraction: float = 0.1
    start_div: float = 25.0
    final_div: float = 1e4

    def __post_init__(self):
        if not 0 < self.warmup_fraction < 1 or not self.peak_lr > 0 or self.total_steps < 1:
            raise ConfigError("schedule needs 0 < warmup_fraction < 1, peak_lr > 0, total_steps >= 1")

    @property
    def warmup_steps(self) -> int:
        return min(max(1, round(self.warmup_fraction * self.total_steps)), self.total_steps - 1)


def one_cycle_lr(step: int, spec: ScheduleSpec) -> float:
    """Cosine ramp from ``peak/start_div`` up to ``peak``, then cosine anneal to ``peak/final_div``."""
    if not 0 <= step < spec.total_steps:
        raise ValueError(f"step {step} outside [0, {spec.total_steps})")
    peak = spec.peak_lr
    start, final = peak / spec.start_div, peak / spec.final_div
    if spec.total_steps == 1:
        return peak
    w, last = spec.warmup_steps, spec.total_steps - 1
    if step == w:
        return peak
    if step < w:
        return start + (peak - start) * (1.0 - math.cos(math.pi * step / w)) / 2.0
    frac = (step - w) / (last - w)
    return final + (peak - final) * (1.0 + math.cos(math.pi * frac)) / 2.0


@dataclass
class OptimState:
    m: list
    v: list
    step: int = 0
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kw) -> "OptimState":
        return cls([torch.zeros_like(p) for p in params], [torch.zeros_like(p) for p in params], **kw)


def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor],
              state: OptimState, lr: float) -> None:
    """One bias-corrected Adam update, in place. Non-finite gradients abort the step."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser moments differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} has shape {tuple(g.shape)}, parameter {tuple(params[i].shape)}")
        if not bool(torch.isfinite(g).all()):
            raise NumericError(f"non-finite gradient for parameter {i}; step skipped")
    b1, b2 = state.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    with torch.no_grad():
        for p, g, m, v in zip(params, grads, state.m, state.v):
            m.mul_(b1).add_((1.0 - b1) * g)
            v.mul_(b2).add_((1.0 - b2) * g * g)
            m_hat = m / c1
            v_hat = v / c2
            p.sub_(lr * m_hat / (torch.sqrt(v_hat) + state.eps))


def clip_global_norm(grads: Sequence[torch.Tensor], max_norm: float) -> float:
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / total
        for g in grads:
            g.mul_(scale)
    return total


# --- training loop ---------------------------------------------------------

@dataclass
class TrainConfig:
    batch: int = 24
    micro_batch: int = 8
    lam: float = metrics.LOSS_LAMBDA
    epochs: int = 30
    seed: int = 0
    patience: int = 10
    min_delta: float = 1e-4
    variant: str = "ALL"
    peak_lr: float = 1e-3
    warmup_fraction: float = 0.1
    clip_norm: float = 5.0
    augment: bool = True
    precision: str = "float32"

    def __post_init__(self):
        if self.batch < 1 or self.micro_batch < 1 or self.epochs < 1 or self.patience < 1:
            raise ConfigError("batch, micro_batch, epochs and patience must be >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_sds: float
    lr: float


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    stop_reason: str = ""
    best_epoch: int = -1
    wall_clock_s: float = 0.0
    seed: int = 0
    hyper: dict = field(default_factory=dict)

    CSV_FIELDS = ("epoch", "train_loss", "val_loss", "val_sds", "lr")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_FIELDS)
            for r in self.epochs:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_sds), repr(r.lr)])

    def summary_text(self) -> str:
        lines = [f"{k} = {v}" for k, v in sorted(self.hyper.items())]
        lines += [f"seed = {self.seed}", f"epochs_run = {len(self.epochs)}",
                  f"best_epoch = {self.best_epoch}", f"stop_reason = {self.stop_reason}",
                  f"wall_clock_s = {self.wall_clock_s:.1f}"]
        return "\n".join(lines) + "\n"


def dtype_of(precision: str) -> torch.dtype:
    return torch.float64 if precision == "float64" else torch.float32


def stack_batch(stacks: Sequence[InputStack], dtype: torch.dtype) -> tuple[torch.Tensor, torch.Tensor]:
    x = torch.from_numpy(np.stack([s.channels for s in stacks])).to(dtype)
    y = torch.from_numpy(np.stack([s.mask for s in stacks])).to(dtype)
    return x, y


def samples_of(data) -> list[Sample]:
    out = []
    for item in data:
        out.extend(item.samples() if isinstance(item, Pullback) else [item])
    return out


def validation_pass(model: DeepCap, stacks: Sequence[InputStack], lam: float,
                    chunk: int = 4) -> tuple[float, float]:
    """Mean loss and mean Dice of the binarised prediction over un-augmented samples."""
    losses, dices = [], []
    for i in range(0, len(stacks), chunk):
        x, y = stack_batch(stacks[i:i + chunk], model.dtype)
        probs = infer_probs(model, x, chunk)
        for j in range(x.shape[0]):
            losses.append(float(metrics.combined_loss(probs[j, 1], y[j], lam)))
            pred = (probs[j, 1] > probs[j, 0]).to(y.dtype)
            dices.append(float(metrics.soft_dice(pred, y[j])))
    return float(np.mean(losses)), float(np.mean(dices))


def _snapshot(model: DeepCap) -> list[torch.Tensor]:
    return [p.detach().clone() for p in model.parameters()]


def _restore(model: DeepCap, snapshot: list[torch.Tensor]) -> None:
    with torch.no_grad():
        for p, s in zip(model.parameters(), snapshot):
            p.copy_(s)


def train(model: DeepCap, train_data, val_data, cfg: TrainConfig = TrainConfig(),
          validate: Callable[[DeepCap, int], tuple[float, float]] | None = None,
          log: Callable[[str], None] | None = None) -> tuple[DeepCap, TrainReport]:
    """Fit ``model`` on ``train_data`` with early stopping on ``val_data``.

    Both data arguments are pullbacks or samples. ``validate(model, epoch)``
    may replace the built-in validation pass and must return
    ``(val_loss, val_sds)``. The returned model holds the parameters of the
    best validation epoch.
    """
    train_samples, val_samples = samples_of(train_data), samples_of(val_data)
    if not train_samples or (validate is None and not val_samples):
        raise DataError("training and validation subsets must be non-empty")
    if model.config.input_channels != {"IM": 1, "2DG": 2, "ADM": 2, "ALL": 3}[cfg.variant]:
        raise ConfigError(f"model takes {model.config.input_channels} channels, variant {cfg.variant} needs a different count")
    t0 = time.perf_counter()
    dtype = dtype_of(cfg.precision)
    model.to(dtype)
    params = list(model.parameters())
    state = OptimState.for_params(params)
    n = len(train_samples)
    steps_per_epoch = math.ceil(n / cfg.batch)
    sched = ScheduleSpec(cfg.peak_lr, cfg.epochs * steps_per_epoch, cfg.warmup_fraction)
    val_stacks = [assemble_input(s, cfg.variant) for s in val_samples]
    report = TrainReport(seed=cfg.seed, hyper={**asdict(cfg), "model": model.config.name,
                                               "upsample": model.config.upsample,
                                               "parameters": model.parameter_count})
    best_loss, best_params, since_best = math.inf, _snapshot(model), 0
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total_loss = 0.0
        lr = sched.peak_lr
        for b in range(steps_per_epoch):
            idx = order[b * cfg.batch:(b + 1) * cfg.batch]
            stacks = [assemble_input(train_samples[i], cfg.variant,
                                     cfg.seed if cfg.augment else None, epoch) for i in idx]
            for p in params:
                p.grad = None
            batch_loss = 0.0
            for m0 in range(0, len(stacks), cfg.micro_batch):
                x, y = stack_batch(stacks[m0:m0 + cfg.micro_batch], dtype)
                probs = model(x)[:, 1]
                loss = metrics.combined_loss(probs, y, cfg.lam) * (x.shape[0] / len(stacks))
                loss.backward()
                batch_loss += float(loss.detach())
            if not math.isfinite(batch_loss):
                _restore(model, best_params)
                report.stop_reason = f"diverged at epoch {epoch} step {b}"
                report.wall_clock_s = time.perf_counter() - t0
                raise DivergenceError(report.stop_reason)
            grads = [p.grad if p.grad is not None else torch.zeros_like(p) for p in params]
            clip_global_norm(grads, cfg.clip_norm)
            lr = one_cycle_lr(step, sched)
            adam_step(params, grads, state, lr)
            step += 1
            total_loss += batch_loss * len(idx)
        if validate is not None:
            val_loss, val_sds = validate(model, epoch)
        else:
            val_loss, val_sds = validation_pass(model, val_stacks, cfg.lam, cfg.micro_batch)
        rec = EpochRecord(epoch, total_loss / n, float(val_loss), float(val_sds), lr)
        report.epochs.append(rec)
        if log:
            log(f"epoch {epoch:3d}  train_loss {rec.train_loss:.5f}  val_loss {rec.val_loss:.5f}  "
                f"val_sds {rec.val_sds:.4f}  lr {lr:.2e}")
        if val_loss < best_loss - cfg.min_delta:
            best_loss, best_params, since_best = val_loss, _snapshot(model), 0
            report.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= cfg.patience:
                report.stop_reason = f"validation loss stagnated for {cfg.patience} epochs"
                break
    else:
        report.stop_reason = "max epochs reached"
    _restore(model, best_params)
    report.wall_clock_s = time.perf_counter() - t0
    return model, report


# --- evaluation ------------------------------------------------------------

def evaluate(model, data, pixel_spacing_um: float, variant: str = "ALL",
             chunk: int = 4) -> tuple[list[metrics.MetricsRecord], dict]:
    """Per-image metric records and their summary for un-augmented samples.

    ``model`` is a :class:`DeepCap` or any callable mapping a list of
    ``Sample`` objects to a list of 256x256 binary masks.
    """
    samples = samples_of(data)
    if not samples:
        raise DataError("evaluation subset is empty")
    records = []
    for i in range(0, len(samples), chunk):
        part = samples[i:i + chunk]
        stacks = [assemble_input(s, variant) for s in part]
        if isinstance(model, DeepCap):
            x, _ = stack_batch(stacks, model.dtype)
            probs = infer_probs(model, x, chunk)
            masks = (probs[:, 1] > probs[:, 0]).to(torch.uint8).numpy()
        else:
            masks = model(part)
        for s, st, pred in zip(part, stacks, masks):
            records.append(metrics.score_mask(pred, st.mask, pixel_spacing_um, s.pullback_id, s.frame_index))
    return records, metrics.summarize(records)


def write_metrics_csv(path, records: Sequence[metrics.MetricsRecord]) -> None:
    fields = ("pullback_id", "frame_index") + metrics.METRIC_FIELDS
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(fields)
        for r in records:
            writer.writerow([getattr(r, f) if isinstance(getattr(r, f), (str, int)) else repr(getattr(r, f))
                             for f in fields])
