"""Linear flow-matching training.

The interpolant is x_t = t*x_data + (1-t)*eps with t=0 the pure-noise end,
so the regression target is the constant-in-t velocity x_data - eps. The
decoder learns that target directly; the encoder additionally regresses
its mid-stack tokens (through a small projection head) onto frozen teacher
features of the clean sample via a cosine alignment loss. One sampled t
per example per step is the Monte-Carlo treatment of the time integral.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .datasets import make_dataset
from .errors import NumericalError, UsageError
from .model import DDTModel
from .numcore import Tensor
from .rng import step_stream

__all__ = [
    "TrainBatch",
    "LossReport",
    "TrainConfig",
    "interpolate",
    "sample_timestep_lognorm",
    "alignment_loss",
    "loss_terms",
    "flow_matching_loss",
    "Adam",
    "train_step",
    "make_batch",
    "train",
    "parse_train_config",
    "write_metrics_csv",
    "T_CLAMP",
]

# endpoints excluded: t=0 and t=1 give degenerate conditionals
T_CLAMP = 1e-5


@dataclass
class TrainBatch:
    x_data: np.ndarray
    y: np.ndarray
    eps: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        if self.x_data.shape != self.eps.shape:
            raise ValueError("x_data and eps shapes differ")
        b = self.x_data.shape[0]
        if self.y.shape != (b,) or self.t.shape != (b,):
            raise ValueError("y and t must be per-sample vectors")
        if np.any(self.t <= 0.0) or np.any(self.t >= 1.0):
            raise ValueError("t must lie strictly inside (0,1)")


@dataclass
class LossReport:
    loss_dec: float
    loss_enc: float
    total: float
    alignment_weight: float
    skipped: bool = False


def interpolate(x_data, eps, t):
    """x_t = t*x_data + (1-t)*eps, v_target = x_data - eps."""
    x = np.asarray(x_data, dtype=np.float64)
    e = np.asarray(eps, dtype=np.float64)
    if x.shape != e.shape:
        raise ValueError("x_data and eps shapes differ")
    tt = np.asarray(t, dtype=np.float64)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ValueError("t must lie in [0,1]")
    while tt.ndim and tt.ndim < x.ndim:
        tt = tt[..., None]
    return tt * x + (1.0 - tt) * e, x - e


def sample_timestep_lognorm(rng: np.random.Generator, mean: float = 0.0,
                            std: float = 1.0, size=None):
    """t = logistic(u), u ~ Normal(mean, std^2), clamped away from {0,1}."""
    if std <= 0.0:
        raise ValueError("std must be positive")
    u = rng.normal(mean, std, size)
    t = 1.0 / (1.0 + np.exp(-u))
    return np.clip(t, T_CLAMP, 1.0 - T_CLAMP)


def alignment_loss(projected: Tensor, r_star: np.ndarray) -> Tensor:
    """Mean over batch and tokens of 1 - cos(r_*, h_phi(h)); range [0,2].

    A zero-norm projection gives cos 0 (loss 1) rather than an error,
    mirroring the cosine degenerate rule."""
    r = np.asarray(r_star, dtype=np.float64)
    if projected.shape != r.shape:
        raise ValueError(f"projected {projected.shape} vs teacher {r.shape}")
    r_t = Tensor(r)
    dot = (projected * r_t).sum(axis=-1)
    # 1e-24 inside the sqrt keeps zero-norm tokens finite and their cos at 0
    pn = ((projected * projected).sum(axis=-1) + 1e-24).sqrt()
    rn = ((r_t * r_t).sum(axis=-1) + 1e-24).sqrt()
    cos = dot / (pn * rn)
    return (1.0 - cos).mean()


def loss_terms(model: DDTModel, batch: TrainBatch,
               alignment_weight: float) -> tuple[Tensor, Tensor, Tensor]:
    """(loss_dec, loss_enc, total) as graph tensors, one encode per step."""
    x_t, v_target = interpolate(batch.x_data, batch.eps, batch.t)
    bundle, h_align = model.encode(x_t, batch.t, batch.y)
    v = model.decode(x_t, batch.t, bundle)
    if not np.all(np.isfinite(v.data)):
        bad = int(np.count_nonzero(~np.isfinite(v.data)))
        raise NumericalError(
            f"decoder produced {bad} non-finite values (t range "
            f"[{batch.t.min():.4g}, {batch.t.max():.4g}]); step aborted")
    diff = v - Tensor(v_target)
    loss_dec = (diff * diff).mean()
    projected = model.project_alignment(h_align)
    r_star = model.teacher_features(batch.x_data)
    loss_enc = alignment_loss(projected, r_star)
    total = loss_dec + float(alignment_weight) * loss_enc
    return loss_dec, loss_enc, total


def flow_matching_loss(model: DDTModel, batch: TrainBatch,
                       alignment_weight: float = 0.5) -> LossReport:
    loss_dec, loss_enc, total = loss_terms(model, batch, alignment_weight)
    return LossReport(loss_dec=loss_dec.item(), loss_enc=loss_enc.item(),
                      total=total.item(), alignment_weight=float(alignment_weight))


class Adam:
    """Adam with decoupled weight decay omitted (the training recipe uses
    weight decay 0), constant learning rate, no warmup, no clipping."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = float(eps)
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step_count = 0

    def step(self) -> None:
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.step_count
        bc2 = 1.0 - b2 ** self.step_count
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": v for k, v in self.m.items()}
        out.update({f"opt.v.{k}": v for k, v in self.v.items()})
        out["opt.step"] = np.array(float(self.step_count))
        return out

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        for name in self.params:
            mk, vk = f"opt.m.{name}", f"opt.v.{name}"
            if mk in arrays:
                self.m[name] = np.asarray(arrays[mk], dtype=np.float64).copy()
            if vk in arrays:
                self.v[name] = np.asarray(arrays[vk], dtype=np.float64).copy()
        if "opt.step" in arrays:
            self.step_count = int(round(float(np.ravel(arrays["opt.step"])[0])))


def train_step(model: DDTModel, optimizer: Adam, batch: TrainBatch,
               alignment_weight: float = 0.5) -> LossReport:
    """One gradient step; the frozen teacher is untouched by construction.
    Non-finite gradients skip the update and flag the report."""
    model.zero_grad()
    loss_dec, loss_enc, total = loss_terms(model, batch, alignment_weight)
    total.backward()
    report = LossReport(loss_dec=loss_dec.item(), loss_enc=loss_enc.item(),
                        total=total.item(), alignment_weight=float(alignment_weight))
    for _, p in model.named_parameters():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            report.skipped = True
            return report
    optimizer.step()
    return report


def make_batch(dataset, model_config, rng: np.random.Generator, batch_size: int,
               label_drop: float = 0.1) -> TrainBatch:
    """Assemble one batch; draw order (data, noise, t, drop mask) is fixed
    so a given stream always yields the same batch."""
    x, y = dataset.sample(rng, batch_size)
    eps = rng.standard_normal(x.shape)
    t = sample_timestep_lognorm(rng, 0.0, 1.0, size=batch_size)
    if label_drop > 0.0:
        drop = rng.random(batch_size) < label_drop
        y = np.where(drop, model_config.null_class, y)
    return TrainBatch(x_data=x, y=y.astype(np.int64), eps=eps, t=t)


def train(model: DDTModel, dataset, steps: int, batch_size: int, seed: int,
          alignment_weight: float = 0.5, lr: float = 1e-4,
          optimizer: Adam | None = None, start_step: int = 0,
          label_drop: float = 0.1,
          progress=None) -> tuple[list[LossReport], Adam]:
    """Run [start_step, steps); per-step RNG substreams make a resumed run
    continue bit-exactly where the first one stopped."""
    if optimizer is None:
        optimizer = Adam(dict(model.named_parameters()), lr=lr)
    history: list[LossReport] = []
    for step in range(start_step, steps):
        rng = step_stream(seed, "data", step)
        batch = make_batch(dataset, model.config, rng, batch_size, label_drop)
        report = train_step(model, optimizer, batch, alignment_weight)
        history.append(report)
        if progress is not None:
            progress(step, report)
    return history, optimizer


def write_metrics_csv(path, history: list[LossReport], start_step: int = 0) -> None:
    """step,loss_dec,loss_enc,total; temp-and-rename so readers never see
    a half-written file."""
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write("step,loss_dec,loss_enc,total\n")
        for i, rep in enumerate(history):
            fh.write(f"{start_step + i},{rep.loss_dec:.10g},"
                     f"{rep.loss_enc:.10g},{rep.total:.10g}\n")
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    preset: str = "desk"
    seed: int = 0
    steps: int = 500
    batch: int = 32
    alignment_weight: float = 0.5
    dataset: str = "bandlimited"
    lr: float = 1e-4
    label_drop: float = 0.1

    def validate(self) -> "TrainConfig":
        if self.steps < 1 or self.batch < 1:
            raise UsageError("steps and batch must be positive")
        if self.alignment_weight < 0:
            raise UsageError("alignment_weight must be >= 0")
        if self.lr <= 0:
            raise UsageError("lr must be positive")
        if not 0.0 <= self.label_drop <= 1.0:
            raise UsageError("label_drop must lie in [0, 1]")
        return self


_CONFIG_PARSERS = {
    "preset": str,
    "seed": int,
    "steps": int,
    "batch": int,
    "alignment_weight": float,
    "dataset": str,
    "lr": float,
    "label_drop": float,
}


def parse_train_config(text: str) -> TrainConfig:
    """key=value lines; '#' starts a comment; unknown keys are errors that
    name the offending field."""
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _CONFIG_PARSERS:
            raise UsageError(f"config line {lineno}: unknown key {key!r} "
                             f"(known: {', '.join(sorted(_CONFIG_PARSERS))})")
        try:
            values[key] = _CONFIG_PARSERS[key](value.strip())
        except ValueError as exc:
            raise UsageError(f"config line {lineno}: bad value for {key}: {exc}") from exc
    return TrainConfig(**values).validate()


def dataset_for(config: TrainConfig, model_config) -> object:
    return make_dataset(config.dataset, image_size=model_config.image_size,
                        channels=model_config.channels,
                        num_classes=model_config.num_classes)
