"""Split fine-tuning over the wire, plus the local (monolithic) trainer used as its oracle."""
from __future__ import annotations

import hashlib
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from cleanroom import privacy
from cleanroom.data import Dataset, batches
from cleanroom.model import AdaptedModel, BaseModel
from cleanroom.protocol import FeaturePartyClient, ProtocolError, SessionConfig, Transport, featureparty_step

log = logging.getLogger(__name__)

ALL_PARAMS = "all_params"


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, report: "TrainReport"):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "sgd"  # "sgd" | "adam"
    lr: float = 0.01
    momentum: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.kind!r}")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if not (0 <= self.momentum < 1 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("momentum and betas must lie in [0, 1)")

    def build(self) -> "Optimizer":
        return Adam(self) if self.kind == "adam" else SGD(self)


class Optimizer:
    def step(self, grad: np.ndarray) -> np.ndarray:
        """Return the parameter delta for ``grad``."""
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.velocity: np.ndarray | None = None

    def step(self, grad):
        if self.cfg.momentum:
            self.velocity = grad if self.velocity is None else self.cfg.momentum * self.velocity + grad
            grad = self.velocity
        return -self.cfg.lr * grad


class Adam(Optimizer):
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.m = self.v = None
        self.t = 0

    def step(self, grad):
        c = self.cfg
        if self.m is None:
            self.m, self.v = np.zeros_like(grad), np.zeros_like(grad)
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1 ** self.t)
        v_hat = self.v / (1 - c.beta2 ** self.t)
        return -c.lr * m_hat / (np.sqrt(v_hat) + c.adam_epsilon)


@dataclass
class TrainReport:
    steps: int = 0
    epochs: int = 0
    bytes_up: int = 0
    bytes_down: int = 0
    wall_time: float = 0.0
    loss_curve: list[float] = field(default_factory=list)
    checksum: str = ""
    partial: bool = False
    error: str = ""
    per_batch: list[dict] = field(default_factory=list)
    trajectory: list[np.ndarray] | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.pop("trajectory")
        return out

    def fingerprint(self) -> dict:
        """Everything except wall-clock time; equal across transports for a fixed seed."""
        out = self.to_dict()
        out.pop("wall_time")
        return out


def param_checksum(values: np.ndarray) -> str:
    return hashlib.sha256(np.asarray(values, dtype="<f8").tobytes()).hexdigest()


def sum_reduction_lr(lr_per_sample: float, batch_size: int) -> float:
    """Learning rate that keeps sum-reduced steps batch-size independent."""
    return lr_per_sample / batch_size


def split_train(
    model: AdaptedModel,
    adapter_id: str,
    data: Dataset,
    session: SessionConfig,
    opt: OptimizerConfig,
    transport: Transport,
    epochs: int = 1,
    batch_seed: int = 0,
    max_steps: int | None = None,
    record_trajectory: bool = False,
) -> TrainReport:
    """Feature-party training loop: only the adapter's parameters move.

    ``data`` may be a feature-only view; labels never leave the clean room.
    """
    if session.param_count != model.param_count(adapter_id):
        raise ValueError("session param_count does not match the adapter")
    optimizer = opt.build()
    client = FeaturePartyClient(transport, session)
    report = TrainReport(trajectory=[] if record_trajectory else None)
    t0 = time.perf_counter()
    base_sum = model.base.checksum()
    client.hello()
    try:
        for epoch in range(epochs):
            for batch in batches(data, session.batch_size, batch_seed, epoch):
                if max_steps is not None and report.steps >= max_steps:
                    break
                agg = featureparty_step(client, model, adapter_id, batch, report.steps)
                model.apply_update(adapter_id, optimizer.step(agg.gradient))
                if agg.loss_sum is not None:
                    report.loss_curve.append(agg.loss_sum)
                report.steps += 1
                if record_trajectory:
                    report.trajectory.append(model.flatten_params(adapter_id).values.copy())
            report.epochs = epoch + 1
        client.end()
    except (ProtocolError, ConnectionError, OSError) as e:
        report.partial, report.error = True, f"{type(e).__name__}: {e}"
        _finish(report, client, model, adapter_id, t0)
        client.transport.close()
        raise TrainingAborted(report.error, report) from e
    if model.base.checksum() != base_sum:
        raise AssertionError("base weights changed during split training")
    return _finish(report, client, model, adapter_id, t0)


def _finish(report, client, model, adapter_id, t0):
    report.bytes_up, report.bytes_down = client.report.bytes_up, client.report.bytes_down
    report.per_batch = [vars(t) for t in client.report.per_batch]
    report.wall_time = time.perf_counter() - t0
    report.checksum = param_checksum(model.flatten_params(adapter_id).values)
    return report


def batch_gradient(model: AdaptedModel, trainable: str, X, y, mode: privacy.LossMode) -> tuple[np.ndarray, np.ndarray]:
    """Return (gradient, logits) for one batch, computed in float64 on one machine."""
    if trainable == ALL_PARAMS:
        z = model.forward(X)
        return model.base_param_grad(X, privacy.loss_grad_wrt_logit(z, y, mode)), z
    z = model.forward(X, trainable)
    G = model.per_sample_grads(X, trainable).G
    return G.T @ privacy.loss_grad_wrt_logit(z, y, mode), z


def local_train(
    model: AdaptedModel,
    trainable: str,
    data: Dataset,
    opt: OptimizerConfig,
    loss_mode: privacy.LossMode = privacy.LossMode(),
    batch_size: int = 256,
    epochs: int = 1,
    batch_seed: int = 0,
    max_steps: int | None = None,
    record_trajectory: bool = False,
    labels: Sequence[int] | None = None,
) -> TrainReport:
    """Monolithic trainer with local labels (test oracle and full fine-tune baseline).

    ``trainable`` is an adapter id or :data:`ALL_PARAMS`; the latter needs an
    unfrozen base. ``labels`` overrides ``data.labels`` (e.g. flipped labels).
    """
    y_all = np.asarray(data.labels if labels is None else labels)
    if y_all is None or y_all.shape != (len(data),):
        raise ValueError("local training needs one label per sample")
    if trainable == ALL_PARAMS and model.base.frozen:
        raise ValueError("base model is frozen; use BaseModel.unfrozen_copy() for full fine-tuning")
    optimizer = opt.build()
    report = TrainReport(trajectory=[] if record_trajectory else None)
    t0 = time.perf_counter()
    ds = Dataset(data.sample_ids, data.X, y_all, data.domain)
    for epoch in range(epochs):
        for batch in batches(ds, batch_size, batch_seed, epoch):
            if max_steps is not None and report.steps >= max_steps:
                break
            grad, z = batch_gradient(model, trainable, batch.X, batch.labels, loss_mode)
            delta = optimizer.step(grad)
            if trainable == ALL_PARAMS:
                model.base.apply_update(delta)
            else:
                model.apply_update(trainable, delta)
            report.loss_curve.append(privacy.loss(z, batch.labels, loss_mode))
            report.steps += 1
            if record_trajectory:
                report.trajectory.append(_params(model, trainable).copy())
        report.epochs = epoch + 1
    report.wall_time = time.perf_counter() - t0
    report.checksum = param_checksum(_params(model, trainable))
    return report


def _params(model: AdaptedModel, trainable: str) -> np.ndarray:
    return model.base.flatten() if trainable == ALL_PARAMS else model.flatten_params(trainable).values


def pretrain(
    data: Dataset,
    hidden: Sequence[int] = (64, 32),
    seed: int = 0,
    epochs: int = 3,
    batch_size: int = 512,
    lr: float = 3e-3,
) -> BaseModel:
    """Train a base model on the platform's own (pretrain-domain) data and freeze it."""
    base = BaseModel.init(data.d, hidden, seed)
    model = AdaptedModel(base)
    local_train(
        model, ALL_PARAMS, data, OptimizerConfig("adam", lr=lr),
        privacy.LossMode.plain("mean"), batch_size=batch_size, epochs=epochs, batch_seed=seed,
    )
    return base.freeze()
