# -*- coding: utf-8 -*-
# training.py: SGD Nesterov, schedules de LR, gradiente de posición normalizado,
# warming-up y tareas de desplazamiento para ver cómo aprenden las posiciones
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, model_validator

from acu_ops import AcuLayer, ConvGeometry, PositionSet, _interpolate
from config import LOG_EVERY, MAX_TRAIN_WIDTH, _t, log_elapsed, logger
from errors import InvalidArgumentError, NonFiniteGradientError, TrainingDivergedError
from network import AcuModule, Parameter, ToyNetwork
from tensor_core import rng_for

# warming-up de 10k sobre 64k iteraciones
WARMUP_FRACTION = 1 / 6.4


class TrainConfig(BaseModel):
    base_lr: float = Field(0.1, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    nesterov: bool = True
    weight_decay: float = Field(5e-4, ge=0)
    position_lr: float = Field(1e-3, gt=0)
    position_grad_norm: Literal["l2", "none"] = "l2"
    position_norm_granularity: Literal["layer", "synapse"] = "layer"
    position_momentum: bool = False
    warmup_iters: int = Field(0, ge=0)
    auto_warmup: bool = False
    schedule: Literal["step", "linear"] = "step"
    milestones: List[int] = Field(default_factory=lambda: [32000, 48000])
    gamma: float = Field(0.1, gt=0)
    batch_size: int = Field(128, ge=1)
    total_iters: int = Field(64000, ge=0)
    seed: int = Field(0, ge=0)
    clamp_positions: bool = False
    freeze_positions: bool = False  # reentrenar con formas fijas
    log_every: int = Field(LOG_EVERY, ge=1)

    @model_validator(mode="after")
    def _check_warmup(self):
        if self.warmup_iters > self.total_iters:
            raise ValueError(f"warmup_iters ({self.warmup_iters}) > total_iters ({self.total_iters})")
        return self


@dataclass
class Dataset:
    inputs: np.ndarray  # (S, C, H, W)
    targets: np.ndarray  # (S, C', H', W') para MSE o (S,) labels para CE

    def __post_init__(self):
        if self.inputs.ndim != 4 or len(self.inputs) != len(self.targets) or len(self.inputs) == 0:
            raise InvalidArgumentError(
                f"dataset inconsistente: inputs {self.inputs.shape}, targets {self.targets.shape}"
            )

    def __len__(self) -> int:
        return len(self.inputs)


@dataclass
class TrainResult:
    network: ToyNetwork
    loss_trace: List[Tuple[int, float, float]] = field(default_factory=list)  # (iter, loss, lr)
    position_trace: List[Tuple[int, str, int, int, float, float]] = field(default_factory=list)


# =============================================================================
# Learning rate
# =============================================================================

def lr_at(cfg: TrainConfig, iteration: int) -> float:
    if iteration < 0 or iteration >= max(cfg.total_iters, 1):
        raise InvalidArgumentError(f"iter {iteration} fuera de [0, {cfg.total_iters})")
    if cfg.schedule == "linear":
        return cfg.base_lr * (1.0 - iteration / cfg.total_iters)
    passed = sum(1 for m in cfg.milestones if iteration >= m)
    return cfg.base_lr * cfg.gamma ** passed


def recommended_warmup_iters(network: ToyNetwork, total_iters: int) -> int:
    """Depthwise/agrupado: sin warming-up. Un ACU de forma única: total/6.4."""
    for m in network.acu_modules():
        layer = m.layer
        if not layer.geometry.is_depthwise and layer.positions.groups == 1:
            return int(total_iters * WARMUP_FRACTION)
    return 0


# =============================================================================
# Paso de optimización
# =============================================================================

def normalize_position_grad(grad: np.ndarray, cfg: TrainConfig) -> np.ndarray:
    if cfg.position_grad_norm == "none":
        return grad
    if cfg.position_norm_granularity == "synapse":
        norms = np.linalg.norm(grad, axis=-1, keepdims=True)
        return np.divide(grad, norms, out=np.zeros_like(grad), where=norms > 0)
    norm = float(np.linalg.norm(grad))
    return grad / norm if norm > 0 else grad


def _nesterov(velocity: np.ndarray, g: np.ndarray, momentum: float, nesterov: bool) -> np.ndarray:
    velocity *= momentum
    velocity += g
    return g + momentum * velocity if nesterov else velocity


def sgd_step(params: Sequence[Parameter], state: Dict[str, np.ndarray], cfg: TrainConfig, iteration: int):
    """Un paso in place. Weight decay sólo en weights/bias; las posiciones usan su propio LR."""
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NonFiniteGradientError(p.name, iteration)
    lr = lr_at(cfg, iteration)
    factor = lr / cfg.base_lr
    frozen = cfg.freeze_positions or iteration < cfg.warmup_iters

    for p in params:
        if p.kind == "position":
            if frozen:
                continue
            g = p.grad if p.mask is None else np.where(p.mask, p.grad, 0.0)
            g = normalize_position_grad(g, cfg)
            step_lr = cfg.position_lr * factor
            if cfg.position_momentum:
                v = state.setdefault(p.name, np.zeros_like(p.value, dtype=np.float64))
                g = _nesterov(v, g, cfg.momentum, cfg.nesterov)
            p.value -= step_lr * g
            if p.limit is not None:
                np.clip(p.value[..., 0], -p.limit[0], p.limit[0], out=p.value[..., 0])
                np.clip(p.value[..., 1], -p.limit[1], p.limit[1], out=p.value[..., 1])
        else:
            g = p.grad + cfg.weight_decay * p.value
            v = state.setdefault(p.name, np.zeros_like(p.value, dtype=np.float64))
            p.value -= (lr * _nesterov(v, g, cfg.momentum, cfg.nesterov)).astype(p.value.dtype)
    return params, state


# =============================================================================
# Loop de entrenamiento
# =============================================================================

def _record_positions(result: TrainResult, network: ToyNetwork, iteration: int) -> None:
    for m in network.acu_modules():
        offsets = m.layer.positions.offsets
        for g in range(offsets.shape[0]):
            for k in range(offsets.shape[1]):
                result.position_trace.append((iteration, m.name, g, k, float(offsets[g, k, 0]), float(offsets[g, k, 1])))


def train(network: ToyNetwork, dataset: Dataset, cfg: TrainConfig) -> TrainResult:
    """Determinístico para un seed fijo. Si la loss diverge levanta TrainingDivergedError
    con el último snapshot bueno."""
    if network.input_shape is not None and tuple(dataset.inputs.shape[1:]) != tuple(network.input_shape):
        raise InvalidArgumentError(
            f"el dataset tiene muestras {dataset.inputs.shape[1:]} y la red espera {network.input_shape}"
        )
    if network.max_width() > MAX_TRAIN_WIDTH:
        logger.warning(f"⚠️ ancho {network.max_width()} > {MAX_TRAIN_WIDTH}: la red no es de escala de escritorio")
    if cfg.auto_warmup:
        cfg = cfg.model_copy(update={"warmup_iters": recommended_warmup_iters(network, cfg.total_iters)})
        logger.info(f"warming-up automático: {cfg.warmup_iters} iteraciones")

    params = list(network.registry.values())
    h, w = dataset.inputs.shape[2], dataset.inputs.shape[3]
    for p in params:
        if p.kind == "position":
            p.limit = (h / 2, w / 2) if cfg.clamp_positions else None

    result = TrainResult(network)
    _record_positions(result, network, 0)
    rng = rng_for(cfg.seed, "batches")
    state: Dict[str, np.ndarray] = {}
    last_good = network.snapshot()
    t0 = _t()
    for it in range(cfg.total_iters):
        idx = rng.integers(0, len(dataset), size=cfg.batch_size)
        loss = network.loss_and_grads(dataset.inputs[idx], dataset.targets[idx])
        if not np.isfinite(loss):
            raise TrainingDivergedError(it, last_good)
        # parámetros con loss finita, antes del paso que los cambia
        last_good = network.snapshot()
        lr = lr_at(cfg, it)
        sgd_step(params, state, cfg, it)
        result.loss_trace.append((it, loss, lr))
        if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.total_iters:
            _record_positions(result, network, it + 1)
            logger.info(f"iter {it + 1}/{cfg.total_iters} loss={loss:.6g} lr={lr:.4g}")
    log_elapsed("train", t0)
    return result


def loss_window_fraction(trace: Sequence[Tuple[int, float, float]], window: int = 100, atol: float = 0.0) -> float:
    """Fracción de ventanas consecutivas cuya loss media no sube (con tolerancia atol)."""
    losses = np.array([t[1] for t in trace])
    n = len(losses) // window
    if n < 2:
        return 1.0
    means = losses[: n * window].reshape(n, window).mean(axis=1)
    return float(np.mean(means[1:] <= means[:-1] + atol))


def loss_csv(trace: Sequence[Tuple[int, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "loss", "lr"])
    for it, loss, lr in trace:
        writer.writerow([it, repr(float(loss)), repr(float(lr))])
    return buf.getvalue()


def trajectory_csv(trace: Sequence[Tuple[int, str, int, int, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["iter", "layer", "group", "synapse", "alpha", "beta"])
    for it, layer, g, k, a, b in trace:
        writer.writerow([it, layer, g, k, repr(a), repr(b)])
    return buf.getvalue()


# =============================================================================
# Tareas de desplazamiento
# =============================================================================

def _smooth_fields(rng: np.random.Generator, samples: int, channels: int, size: int, passes: int) -> np.ndarray:
    """Ruido blanco suavizado con la misma pasada de promedio 3x3, recortado sin bordes."""
    margin = passes
    x = rng.normal(0.0, 1.0, size=(samples, channels, size + 2 * margin, size + 2 * margin))
    for _ in range(passes):
        acc = np.zeros_like(x[:, :, 1:-1, 1:-1])
        for dr in range(3):
            for dc in range(3):
                acc += x[:, :, dr:dr + acc.shape[2], dc:dc + acc.shape[3]]
        x = acc / 9.0
    x = x / x.std()
    return x


def _shift(fields: np.ndarray, offsets: Sequence[Tuple[float, float]]) -> np.ndarray:
    """y(m, n) = x(m + dr, n + dc) por canal, bilineal con bordes en cero."""
    y = np.zeros_like(fields)
    geo = ConvGeometry(1, 1)
    size = fields.shape[2], fields.shape[3]
    for c, (dr, dc) in enumerate(offsets):
        y[:, c:c + 1] = _interpolate(fields[:, c:c + 1], float(dr), float(dc), geo, size)
    return y


def make_shift_task(offset: Tuple[float, float], samples: int, size: int, seed: int,
                    smoothing_passes: int = 3) -> Dataset:
    dr, dc = offset
    if abs(dr) > size / 4 or abs(dc) > size / 4:
        raise InvalidArgumentError(f"offset {offset} demasiado grande para size={size} (máx {size / 4})")
    x = _smooth_fields(rng_for(seed, "shift_task"), samples, 1, size, smoothing_passes)
    return Dataset(x, _shift(x, [(dr, dc)]))


def make_group_shift_task(offsets: Sequence[Tuple[float, float]], samples: int, size: int, seed: int,
                          smoothing_passes: int = 3) -> Dataset:
    """Un canal por grupo, cada uno con su propio desplazamiento objetivo."""
    for dr, dc in offsets:
        if abs(dr) > size / 4 or abs(dc) > size / 4:
            raise InvalidArgumentError(f"offset {(dr, dc)} demasiado grande para size={size}")
    x = _smooth_fields(rng_for(seed, "group_shift_task"), samples, len(offsets), size, smoothing_passes)
    return Dataset(x, _shift(x, offsets))


def make_shift_network(groups: int = 1, group_mode: str = "multi", synapses: int = 1,
                       size: Optional[int] = None, threads: Optional[int] = None) -> ToyNetwork:
    """ACU depthwise de sinapsis libres, pesos en 1 (identidad) y posiciones en el origen."""
    geo = ConvGeometry(groups, groups, groups)
    position_groups = 1 if group_mode == "shared" else groups
    positions = PositionSet(np.zeros((position_groups, synapses, 2)), pin_origin=False)
    weights = np.full((groups, 1, 1, synapses), 1.0 / synapses)
    layer = AcuLayer(geo, weights, np.zeros(groups), positions, group_mode)
    input_shape = (groups, size, size) if size is not None else None
    return ToyNetwork([AcuModule("acu0", layer, threads=threads)], input_shape=input_shape, name="shift")
