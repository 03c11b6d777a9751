# -*- coding: utf-8 -*-
# manifests.py: manifiestos JSON de red, snapshots, configs de experimento y exports CSV
from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from acu_ops import AcuLayer, ConvGeometry, ConvLayer, PositionSet, make_grid_positions, stride_warning
from config import logger
from errors import AcuError, ConfigError, ManifestError
from network import (
    AcuModule,
    ConvModule,
    FullyConnected,
    GlobalAvgPool,
    MeanSquaredError,
    Module,
    ReLU,
    Residual,
    SoftmaxCrossEntropy,
    ToyNetwork,
)
from tensor_core import PathLike, he_init, read_tensor, write_tensor
from training import Dataset, TrainConfig, make_group_shift_task, make_shift_network, make_shift_task

MANIFEST_NAME = "manifest.json"


# =============================================================================
# Modelos (pydantic)
# =============================================================================

class InitSpec(BaseModel):
    kind: Literal["he", "grid", "file", "constant", "origin"]
    kernel: Tuple[int, int] = (3, 3)
    dilation: int = Field(1, ge=1)
    path: Optional[str] = None
    value: float = 0.0


class InputSpec(BaseModel):
    channels: int = Field(ge=1)
    height: int = Field(ge=1)
    width: int = Field(ge=1)


class LayerSpec(BaseModel):
    type: Literal["acu", "conv", "relu", "gap", "fc", "residual", "softmax_ce", "mse"]
    name: Optional[str] = None
    in_channels: int = Field(1, ge=1)
    out_channels: int = Field(1, ge=1)
    groups: int = Field(1, ge=1)
    synapses: Optional[int] = Field(None, ge=1)
    kernel: Tuple[int, int] = (3, 3)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    dilation: Tuple[int, int] = (1, 1)
    group_mode: Literal["multi", "shared"] = "multi"
    pin_origin: bool = True
    weights_init: InitSpec = Field(default_factory=lambda: InitSpec(kind="he"))
    bias_init: InitSpec = Field(default_factory=lambda: InitSpec(kind="constant"))
    positions_init: InitSpec = Field(default_factory=lambda: InitSpec(kind="grid"))
    layers: List["LayerSpec"] = Field(default_factory=list)


LayerSpec.model_rebuild()


class NetworkManifest(BaseModel):
    name: str = "net"
    seed: int = Field(0, ge=0)
    input: Optional[InputSpec] = None
    layers: List[LayerSpec]


class TaskSpec(BaseModel):
    kind: Literal["shift", "group_shift", "tensors"] = "shift"
    offset: Tuple[float, float] = (2.0, 3.0)
    offsets: List[Tuple[float, float]] = Field(default_factory=lambda: [(2.0, 0.0), (-2.0, 0.0)])
    group_mode: Literal["multi", "shared"] = "multi"
    samples: int = Field(64, ge=1)
    size: int = Field(16, ge=4)
    smoothing_passes: int = Field(3, ge=1)
    inputs: Optional[str] = None
    targets: Optional[str] = None


class ExperimentConfig(BaseModel):
    manifest: Optional[str] = None
    train: TrainConfig = Field(default_factory=TrainConfig)
    task: TaskSpec = Field(default_factory=TaskSpec)


# =============================================================================
# Carga de tensores con chequeo de shape
# =============================================================================

def _load_checked(base: Path, layer: str, what: str, spec: InitSpec, expected: Tuple[int, ...]) -> np.ndarray:
    if not spec.path:
        raise ManifestError(f"capa '{layer}' ({what}): init 'file' sin path")
    path = base / spec.path
    if not path.is_file():
        raise ManifestError(f"capa '{layer}' ({what}): no existe el tensor {path}")
    try:
        t = read_tensor(path)
    except AcuError as e:
        raise ManifestError(f"capa '{layer}' ({what}): {e}") from e
    if t.shape != tuple(expected):
        raise ManifestError(f"capa '{layer}' ({what}): se esperaba shape {tuple(expected)}, se encontró {t.shape}")
    return t


def _init_weights(base: Path, name: str, spec: InitSpec, shape: Tuple[int, ...], fan_in: int, seed: int):
    if spec.kind == "he":
        return he_init(shape, fan_in, seed, name=f"{name}.weights")
    if spec.kind == "file":
        return _load_checked(base, name, "weights", spec, shape)
    if spec.kind == "constant":
        return np.full(shape, spec.value)
    raise ManifestError(f"capa '{name}': init '{spec.kind}' no aplica a weights")


def _init_bias(base: Path, name: str, spec: InitSpec, channels: int):
    if spec.kind == "constant":
        return np.full(channels, spec.value)
    if spec.kind == "file":
        return _load_checked(base, name, "bias", spec, (1, channels, 1, 1)).reshape(-1)
    raise ManifestError(f"capa '{name}': init '{spec.kind}' no aplica a bias")


def _init_positions(base: Path, name: str, spec: LayerSpec, position_groups: int) -> PositionSet:
    init = spec.positions_init
    if init.kind == "grid":
        kh, kw = init.kernel
        positions = make_grid_positions(kh, kw, init.dilation, position_groups)
        if spec.synapses is not None and spec.synapses != kh * kw:
            raise ManifestError(f"capa '{name}': synapses={spec.synapses} pero la grilla {kh}x{kw} tiene {kh * kw}")
        if not spec.pin_origin:
            positions = PositionSet(positions.offsets, pin_origin=False)
        return positions
    if spec.synapses is None:
        raise ManifestError(f"capa '{name}': falta 'synapses' para init '{init.kind}'")
    k = spec.synapses
    if init.kind == "origin":
        return PositionSet(np.zeros((position_groups, k, 2)), spec.pin_origin)
    if init.kind == "file":
        t = _load_checked(base, name, "positions", init, (1, position_groups, k, 2))
        return PositionSet(t[0], spec.pin_origin)
    raise ManifestError(f"capa '{name}': init '{init.kind}' no aplica a posiciones")


# =============================================================================
# Manifiesto -> red
# =============================================================================

def _build(spec: LayerSpec, name: str, base: Path, seed: int, threads: Optional[int]) -> Module:
    kind = spec.type
    if kind in ("acu", "conv"):
        geo = ConvGeometry(spec.in_channels, spec.out_channels, spec.groups, spec.stride, spec.padding,
                           spec.dilation if kind == "conv" else (1, 1))
        bias = _init_bias(base, name, spec.bias_init, spec.out_channels)
        if kind == "conv":
            kh, kw = spec.kernel
            shape = (spec.out_channels, geo.in_per_group, kh, kw)
            weights = _init_weights(base, name, spec.weights_init, shape, geo.in_per_group * kh * kw, seed)
            return ConvModule(name, ConvLayer(geo, weights, bias), threads)
        position_groups = 1 if spec.group_mode == "shared" else spec.groups
        positions = _init_positions(base, name, spec, position_groups)
        k = positions.synapses
        shape = (spec.out_channels, geo.in_per_group, 1, k)
        weights = _init_weights(base, name, spec.weights_init, shape, geo.in_per_group * k, seed)
        layer = AcuLayer(geo, weights, bias, positions, spec.group_mode)
        stride_warning(layer)
        return AcuModule(name, layer, threads)
    if kind == "fc":
        shape = (spec.out_channels, spec.in_channels, 1, 1)
        weights = _init_weights(base, name, spec.weights_init, shape, spec.in_channels, seed)
        bias = _init_bias(base, name, spec.bias_init, spec.out_channels)
        return FullyConnected(name, weights, bias)
    if kind == "residual":
        return Residual(name, [_build(s, s.name or f"{name}.{i}", base, seed, threads) for i, s in enumerate(spec.layers)])
    if kind == "relu":
        return ReLU(name)
    if kind == "gap":
        return GlobalAvgPool(name)
    if kind == "softmax_ce":
        return SoftmaxCrossEntropy(name)
    return MeanSquaredError(name)


def parse_manifest(path: PathLike) -> NetworkManifest:
    try:
        return NetworkManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ManifestError(f"{path}: manifiesto inválido\n{e}") from e


def load_manifest(path: PathLike, seed: Optional[int] = None, threads: Optional[int] = None) -> ToyNetwork:
    manifest = parse_manifest(path)
    base = Path(path).parent
    seed = manifest.seed if seed is None else seed
    try:
        modules = [_build(s, s.name or f"layer{i}", base, seed, threads) for i, s in enumerate(manifest.layers)]
        input_shape = None
        if manifest.input is not None:
            input_shape = (manifest.input.channels, manifest.input.height, manifest.input.width)
        return ToyNetwork(modules, input_shape=input_shape, name=manifest.name)
    except ManifestError:
        raise
    except AcuError as e:
        raise ManifestError(f"{path}: {e}") from e


# =============================================================================
# Red -> snapshot (tensores + manifest.json)
# =============================================================================

def _file(path: str) -> InitSpec:
    return InitSpec(kind="file", path=path)


def _module_spec(m: Module) -> LayerSpec:
    if isinstance(m, AcuModule):
        layer, geo = m.layer, m.layer.geometry
        return LayerSpec(type="acu", name=m.name, in_channels=geo.in_channels, out_channels=geo.out_channels,
                         groups=geo.groups, synapses=layer.synapses, stride=geo.stride, padding=geo.padding,
                         group_mode=layer.group_mode, pin_origin=layer.positions.pin_origin,
                         weights_init=_file(f"{m.name}.weights.tns"), bias_init=_file(f"{m.name}.bias.tns"),
                         positions_init=_file(f"{m.name}.positions.tns"))
    if isinstance(m, ConvModule):
        geo = m.layer.geometry
        return LayerSpec(type="conv", name=m.name, in_channels=geo.in_channels, out_channels=geo.out_channels,
                         groups=geo.groups, kernel=m.layer.kernel_hw, stride=geo.stride, padding=geo.padding,
                         dilation=geo.dilation, weights_init=_file(f"{m.name}.weights.tns"),
                         bias_init=_file(f"{m.name}.bias.tns"))
    if isinstance(m, FullyConnected):
        return LayerSpec(type="fc", name=m.name, in_channels=m.weights.shape[1], out_channels=m.weights.shape[0],
                         weights_init=_file(f"{m.name}.weights.tns"), bias_init=_file(f"{m.name}.bias.tns"))
    if isinstance(m, Residual):
        return LayerSpec(type="residual", name=m.name, layers=[_module_spec(c) for c in m.body])
    if isinstance(m, GlobalAvgPool):
        return LayerSpec(type="gap", name=m.name)
    if isinstance(m, SoftmaxCrossEntropy):
        return LayerSpec(type="softmax_ce", name=m.name)
    if isinstance(m, MeanSquaredError):
        return LayerSpec(type="mse", name=m.name)
    return LayerSpec(type="relu", name=m.name)


def save_snapshot(net: ToyNetwork, directory: PathLike) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    for name, p in net.registry.items():
        value = p.value
        if name.endswith(".bias"):
            value = value.reshape(1, -1, 1, 1)
        elif name.endswith(".positions"):
            value = value[None]
        write_tensor(out / f"{name}.tns", value)
    input_spec = None
    if net.input_shape is not None:
        c, h, w = net.input_shape
        input_spec = InputSpec(channels=c, height=h, width=w)
    layers = [_module_spec(m) for m in net.layers] + [_module_spec(net.head)]
    manifest = NetworkManifest(name=net.name, input=input_spec, layers=layers)
    (out / MANIFEST_NAME).write_text(manifest.model_dump_json(indent=2) + "\n", encoding="utf-8")
    logger.info(f"✅ snapshot guardado en {out}")
    return out


def load_snapshot(directory: PathLike, threads: Optional[int] = None) -> ToyNetwork:
    return load_manifest(Path(directory) / MANIFEST_NAME, threads=threads)


# =============================================================================
# Experimentos
# =============================================================================

def load_experiment(path: PathLike, seed: Optional[int] = None, threads: Optional[int] = None):
    """-> (red, dataset, TrainConfig). --seed pisa el seed del config, del manifiesto y de la tarea."""
    try:
        exp = ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise ConfigError(f"{path}: config inválido\n{e}") from e
    cfg = exp.train if seed is None else exp.train.model_copy(update={"seed": seed})
    base = Path(path).parent
    task = exp.task

    if task.kind == "shift":
        dataset = make_shift_task(task.offset, task.samples, task.size, cfg.seed, task.smoothing_passes)
        groups = 1
    elif task.kind == "group_shift":
        dataset = make_group_shift_task(task.offsets, task.samples, task.size, cfg.seed, task.smoothing_passes)
        groups = len(task.offsets)
    else:
        if not task.inputs or not task.targets:
            raise ConfigError(f"{path}: la tarea 'tensors' necesita inputs y targets")
        targets = read_tensor(base / task.targets)
        dataset = Dataset(read_tensor(base / task.inputs), targets)
        groups = None

    if exp.manifest:
        network = load_manifest(base / exp.manifest, seed=cfg.seed, threads=threads)
    elif groups is not None:
        network = make_shift_network(groups, task.group_mode, size=task.size, threads=threads)
    else:
        raise ConfigError(f"{path}: la tarea 'tensors' necesita un manifest")
    if isinstance(network.head, SoftmaxCrossEntropy):
        dataset = Dataset(dataset.inputs, dataset.targets.reshape(len(dataset.targets), -1)[:, 0])
    return network, dataset, cfg


# =============================================================================
# Exports de posiciones
# =============================================================================

def position_rows(net: ToyNetwork) -> List[Tuple[str, int, int, float, float]]:
    """(layer, group, synapse, alpha, beta); en modo shared se repite el set por grupo."""
    rows = []
    for m in net.acu_modules():
        for g in range(m.layer.geometry.groups):
            for k, (a, b) in enumerate(m.layer.group_positions(g)):
                rows.append((m.name, g, k, float(a), float(b)))
    return rows


def positions_csv(rows: Sequence[Tuple[str, int, int, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "group", "synapse", "alpha", "beta"])
    for layer, g, k, a, b in rows:
        writer.writerow([layer, g, k, repr(a), repr(b)])
    return buf.getvalue()


def position_histogram(rows: Sequence[Tuple[str, int, int, float, float]], bin_width: float = 1.0,
                       radius: Optional[float] = None):
    """Grilla 2-D de conteos de sinapsis; bins centrados en múltiplos de bin_width."""
    if bin_width <= 0:
        raise ConfigError(f"bin_width debe ser > 0, llegó {bin_width}")
    alphas = np.array([r[3] for r in rows], dtype=np.float64)
    betas = np.array([r[4] for r in rows], dtype=np.float64)
    if radius is None:
        max_abs = float(np.max(np.abs(np.concatenate([alphas, betas])))) if len(rows) else 0.0
        radius = max(1, math.ceil(max_abs / bin_width - 0.5)) * bin_width
    n_bins = int(round(2 * radius / bin_width)) + 1
    edges = -radius - bin_width / 2 + bin_width * np.arange(n_bins + 1)
    counts, _, _ = np.histogram2d(alphas, betas, bins=[edges, edges])
    return edges, counts.astype(np.int64)


def histogram_csv(edges: np.ndarray, counts: np.ndarray) -> str:
    centers = (edges[:-1] + edges[1:]) / 2
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["alpha\\beta"] + [f"{c:g}" for c in centers])
    for c, row in zip(centers, counts):
        writer.writerow([f"{c:g}"] + [int(v) for v in row])
    return buf.getvalue()


def dump_json(path: PathLike, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
