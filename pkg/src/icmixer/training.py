"""Supervised training loop, gate/head fine-tuning, metrics, gradient checks.

Training minimizes MSE in instance-normalized space; reported metrics are
computed on dataset-standardized values (the benchmark convention). Runs are
deterministic for a fixed seed under single-threaded execution.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .attention import ConfigError
from .data import MultivariateSeries, make_windows
from .encoder import INSTANCE_NORM_EPS, EncoderConfig, ForecastEncoder
from .mixers import MixerKind
from .tensor import DimensionError, Parameter, Tensor, no_grad


class TrainingDiverged(RuntimeError):
    pass


# -- metrics ------------------------------------------------------------------

def _paired(pred, target):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"metric shape mismatch: {pred.shape} vs {target.shape}")
    return pred, target


def mse(pred, target) -> Tensor:
    pred, target = _paired(pred, target)
    diff = pred - target
    return (diff * diff).mean()


def mae(pred, target) -> Tensor:
    pred, target = _paired(pred, target)
    return (pred - target).abs().mean()


@dataclass
class MetricReport:
    """Test metrics per (dataset, horizon), with arithmetic horizon averages."""

    entries: dict = field(default_factory=dict)

    def add(self, dataset: str, horizon: int, mse_value: float, mae_value: float):
        self.entries[(dataset, horizon)] = {"mse": float(mse_value), "mae": float(mae_value)}

    def merge(self, other: "MetricReport"):
        self.entries.update(other.entries)

    def datasets(self):
        return sorted({ds for ds, _ in self.entries})

    def average(self, dataset: str) -> dict:
        rows = [v for (ds, _), v in self.entries.items() if ds == dataset]
        if not rows:
            raise KeyError(dataset)
        return {key: sum(r[key] for r in rows) / len(rows) for key in ("mse", "mae")}

    def to_records(self) -> list:
        recs = [{"dataset": ds, "horizon": h, **v}
                for (ds, h), v in sorted(self.entries.items())]
        for ds in self.datasets():
            recs.append({"dataset": ds, "horizon": "avg", **self.average(ds)})
        return recs


# -- optimizer ----------------------------------------------------------------

class Adam:
    """Adaptive-moment estimation with bias correction."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr, self.betas, self.eps = lr, betas, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.betas
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    precision: str = "f32"
    patience: int = 3
    freeze_mask: object = None      # predicate over parameter name paths, or None
    train_stride: int = 1
    max_train_windows: int | None = None  # seeded subsample cap, for desk-scale runs

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.learning_rate}")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


def _stack_batch(windows, idx):
    x = np.stack([windows[i].input for i in idx])
    y = np.stack([windows[i].target for i in idx])
    return x, y


def _normalized_targets(x: np.ndarray, y: np.ndarray):
    mean = x.mean(axis=-1, keepdims=True)
    std = x.std(axis=-1, keepdims=True)
    return (y - mean) / (std + INSTANCE_NORM_EPS)


def evaluate(model: ForecastEncoder, windows, horizon: int, batch_size: int = 64):
    """(MSE, MAE) of denormalized forecasts over a window list."""
    if not windows:
        raise ConfigError("no evaluation windows")
    sq_sum = abs_sum = count = 0.0
    with no_grad():
        for start in range(0, len(windows), batch_size):
            x, y = _stack_batch(windows, range(start, min(start + batch_size, len(windows))))
            pred = model.forecast(x, horizon).data
            err = pred.astype(np.float64) - y
            sq_sum += float((err * err).sum())
            abs_sum += float(np.abs(err).sum())
            count += err.size
    return sq_sum / count, abs_sum / count


def train_supervised(model: ForecastEncoder, series: MultivariateSeries,
                     config: TrainConfig, horizon: int, log=None):
    """Train on MSE, select by validation MSE, report test metrics.

    Returns (model, MetricReport, loss_curve) where loss_curve is the list of
    per-epoch mean training losses. `series` should already be standardized.
    """
    lookback = model.config.lookback
    train_windows = make_windows(series, lookback, horizon, stride=config.train_stride,
                                 split="train")
    val_windows = make_windows(series, lookback, horizon, split="val")
    test_windows = make_windows(series, lookback, horizon, split="test")
    if not train_windows:
        raise ConfigError(f"{series.name}: no training windows for horizon {horizon}")

    rng = np.random.default_rng(config.seed)
    if config.max_train_windows is not None and len(train_windows) > config.max_train_windows:
        keep = np.sort(rng.choice(len(train_windows), config.max_train_windows, replace=False))
        train_windows = [train_windows[i] for i in keep]

    params = model.parameters()
    trainable = [p for p in params.values()
                 if p.trainable and (config.freeze_mask is None or config.freeze_mask(p.name))]
    if not trainable:
        raise ConfigError("freeze mask admits no trainable parameters")
    frozen = [p for p in params.values() if p not in trainable]
    optimizer = Adam(trainable, lr=config.learning_rate)

    best_val = np.inf
    best_state = None
    patience_left = config.patience
    loss_curve = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_windows))
        epoch_losses = []
        for start in range(0, len(order), config.batch_size):
            x, y = _stack_batch(train_windows, order[start:start + config.batch_size])
            pred_norm, _ = model.forecast_normalized(x.astype(model.dtype), horizon)
            loss = mse(pred_norm, Tensor(_normalized_targets(x, y).astype(model.dtype)))
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(
                    f"non-finite training loss at epoch {epoch}, batch offset {start} "
                    f"(lr={config.learning_rate}, horizon={horizon})")
            optimizer.zero_grad()
            loss.backward()
            optimizer.step()
            epoch_losses.append(loss.item())
        loss_curve.append(float(np.mean(epoch_losses)))

        if val_windows:
            val_mse, _ = evaluate(model, val_windows, horizon, config.batch_size)
        else:
            val_mse = loss_curve[-1]
        if log is not None:
            log({"dataset": series.name, "horizon": horizon, "epoch": epoch,
                 "train_loss": loss_curve[-1], "val_mse": val_mse})
        if val_mse < best_val:
            best_val = val_mse
            best_state = {p.name: p.data.copy() for p in trainable}
            patience_left = config.patience
        else:
            patience_left -= 1
            if patience_left <= 0:
                break

    if best_state is not None:
        for p in trainable:
            p.data = best_state[p.name]
    for p in frozen:  # masking contract: frozen parameters are never written
        assert params[p.name] is p

    report = MetricReport()
    if test_windows:
        test_mse, test_mae = evaluate(model, test_windows, horizon, config.batch_size)
        report.add(series.name, horizon, test_mse, test_mae)
    return model, report, loss_curve


def beta_and_head_mask(name: str) -> bool:
    """Freeze mask admitting only forecasting heads and the memory gate scalars."""
    return name.startswith("head.") or name.endswith(".beta")


def head_only_mask(name: str) -> bool:
    return name.startswith("head.")


def finetune_beta_and_head(model: ForecastEncoder, series: MultivariateSeries,
                           config: TrainConfig, horizon: int,
                           tune_beta: bool = True, log=None):
    """Fine-tune the forecasting head (and optionally the gate scalars) only."""
    mask = beta_and_head_mask if tune_beta else head_only_mask
    cfg = TrainConfig(**{**config.__dict__, "freeze_mask": mask})
    return train_supervised(model, series, cfg, horizon, log=log)


# -- gradient verification ----------------------------------------------------

def shrunken_config(mixer: MixerKind) -> EncoderConfig:
    """Small double-precision-friendly configuration for finite differences."""
    return EncoderConfig(n_blocks=1, d_model=16, n_heads=2, d_ff=32, patch_len=8,
                         lookback=32, mixer=mixer, horizons=(8,), max_channels=4)


@dataclass
class GradcheckReport:
    mixer: str
    tolerance: float
    max_rel_err: dict        # parameter name -> worst relative error
    failures: list

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        worst = max(self.max_rel_err.values())
        status = "PASS" if self.passed else "FAIL"
        lines = [f"[{status}] mixer={self.mixer} worst rel err {worst:.3e} (tol {self.tolerance:g})"]
        lines += [f"  exceeded: {name} ({err:.3e})"
                  for name, err in sorted(self.max_rel_err.items()) if name in self.failures]
        return "\n".join(lines)


def gradcheck(config: EncoderConfig | None = None, tolerance: float = 1e-4,
              seed: int = 0, h: float = 1e-5, max_coords: int = 24,
              n_channels: int = 2) -> GradcheckReport:
    """Compare autodiff gradients of the MSE loss against central differences.

    Every parameter tensor is checked; within large tensors a seeded sample of
    at most `max_coords` coordinates is probed (exhaustive for small tensors).
    """
    if config is None:
        config = shrunken_config(MixerKind.ICM)
    model = ForecastEncoder(config, seed=seed, dtype=np.float64)
    horizon = config.horizons[0]
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-2, 2, (1, n_channels, config.lookback))
    y = rng.uniform(-2, 2, (1, n_channels, horizon))

    def loss_value() -> float:
        with no_grad():
            return mse(model.forecast(x, horizon), y).item()

    loss = mse(model.forecast(x, horizon), y)
    model.zero_grad()
    loss.backward()

    coord_rng = np.random.default_rng(seed + 2)
    max_rel_err, failures = {}, []
    for name, p in model.parameters().items():
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1) if p.grad is not None else np.zeros_like(flat)
        if flat.size <= max_coords:
            coords = range(flat.size)
        else:
            coords = coord_rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            denom = max(abs(fd), abs(grad[i]), 1e-6)
            worst = max(worst, abs(fd - grad[i]) / denom)
        max_rel_err[name] = worst
        if worst >= tolerance:
            failures.append(name)
    return GradcheckReport(mixer=config.mixer.value, tolerance=tolerance,
                           max_rel_err=max_rel_err, failures=failures)
