# -*- coding: utf-8 -*-
# verify.py: oráculos por fuerza bruta y chequeo de gradientes por diferencias finitas
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from acu_ops import (
    AcuGradients,
    AcuLayer,
    ConvGeometry,
    PositionSet,
    _check_input,
    acu_backward,
    acu_forward,
    bilinear_sample,
)
from config import EQUIV_TOL, FD_STEP, GRADCHECK_ATOL, GRADCHECK_TOL, _t, log_elapsed, logger
from equivalence import conv_with_extrapolated, extrapolate_weights, sparsity_report
from errors import InvalidArgumentError
from tensor_core import Tensor4, rng_for

# (nombre, C, G, K): una sola capa densa, una agrupada y una depthwise
GRADIENT_BATTERY = (
    ("g1_k9", 2, 1, 9),
    ("g2_k5", 4, 2, 5),
    ("dw4_k3", 4, 4, 3),
)


@dataclass
class GradCheckReport:
    parameter: str
    max_rel_error: float
    max_abs_error: float
    worst_index: Tuple[int, ...]
    passed: bool
    noise_floor: bool = False  # pasó sólo gracias a atol en alguna entrada


@dataclass
class EquivalenceReport:
    layers: int
    max_diff: float
    max_mass_error: float
    max_nonzeros_ratio: float  # nonzeros por slice / K; debe quedar <= 4

    @property
    def passed(self) -> bool:
        return self.max_diff <= EQUIV_TOL and self.max_nonzeros_ratio <= 4.0


# =============================================================================
# Oráculo literal
# =============================================================================

def oracle_acu_forward(x: Tensor4, layer: AcuLayer) -> Tensor4:
    """Suma literal Σ_c Σ_k w·x^{p_k}, sin reordenar ni reutilizar muestras."""
    geo = layer.geometry
    x = _check_input(x, geo)
    ho, wo = layer.output_hw(x.shape[2], x.shape[3])
    (sh, sw), (ph, pw) = geo.stride, geo.padding
    cin = geo.in_per_group
    y = np.zeros((x.shape[0], geo.out_channels, ho, wo), dtype=np.float64)
    for n in range(x.shape[0]):
        for o in range(geo.out_channels):
            g = geo.group_of(o)
            pos = layer.group_positions(g)
            for m in range(ho):
                for mm in range(wo):
                    acc = 0.0
                    for ci in range(cin):
                        for k in range(layer.synapses):
                            row = m * sh + pos[k, 0] - ph
                            col = mm * sw + pos[k, 1] - pw
                            acc += layer.weights[o, ci, 0, k] * bilinear_sample(x, n, g * cin + ci, row, col)
                    y[n, o, m, mm] = acc + layer.bias[o]
    return y.astype(x.dtype)


# =============================================================================
# Diferencias finitas
# =============================================================================

def central_difference(fn: Callable[[], float], values: np.ndarray, h: float,
                       mask: Optional[np.ndarray] = None) -> np.ndarray:
    """(f(θ+h) − f(θ−h)) / 2h por cada escalar de `values` (se modifica in place y se restaura)."""
    grad = np.zeros(values.shape, dtype=np.float64)
    flat = values.reshape(-1)
    active = np.ones(flat.size, dtype=bool) if mask is None else np.asarray(mask).reshape(-1)
    for i in np.nonzero(active)[0]:
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn()
        flat[i] = orig - h
        f_minus = fn()
        flat[i] = orig
        grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def finite_diff_gradients(x: Tensor4, layer: AcuLayer, d_out: Tensor4, h: float = FD_STEP,
                          threads: Optional[int] = None) -> AcuGradients:
    if h <= 0:
        raise InvalidArgumentError(f"h debe ser > 0, llegó {h}")
    layer = layer.copy()
    x = np.array(_check_input(x, layer.geometry), dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)

    def loss() -> float:
        return float(np.sum(d_out * acu_forward(x, layer, threads)))

    d_w = central_difference(loss, layer.weights, h)
    d_b = central_difference(loss, layer.bias, h)
    d_pos = central_difference(loss, layer.positions.offsets, h, mask=layer.positions.free_mask())
    d_x = central_difference(loss, x, h)
    pinned = layer.positions.pin_origin
    return AcuGradients(d_w, d_b, d_pos[:, 1:] if pinned else d_pos, d_x, pinned)


def compare_gradients(name: str, analytic: np.ndarray, numeric: np.ndarray,
                      tol: float = GRADCHECK_TOL, atol: float = GRADCHECK_ATOL) -> GradCheckReport:
    a = np.asarray(analytic, dtype=np.float64)
    f = np.asarray(numeric, dtype=np.float64)
    if a.shape != f.shape:
        raise InvalidArgumentError(f"{name}: shapes distintos {a.shape} vs {f.shape}")
    if a.size == 0:
        return GradCheckReport(name, 0.0, 0.0, (), True)
    abs_err = np.abs(a - f)
    rel_err = abs_err / np.maximum(np.maximum(np.abs(a), np.abs(f)), 1e-8)
    # por debajo del piso de ruido de las diferencias finitas el error relativo no dice nada
    within_tol = rel_err <= tol
    ok = within_tol | (abs_err <= atol)
    worst = tuple(int(i) for i in np.unravel_index(int(np.argmax(rel_err)), rel_err.shape))
    passed = bool(ok.all())
    return GradCheckReport(name, float(rel_err.max()), float(abs_err.max()), worst, passed,
                           noise_floor=passed and not bool(within_tol.all()))


# =============================================================================
# Capas aleatorias
# =============================================================================

def random_positions(rng: np.random.Generator, groups: int, synapses: int, span: float = 3.0,
                     frac_range: Optional[Tuple[float, float]] = None, pin_origin: bool = True) -> PositionSet:
    """Posiciones aleatorias; con frac_range la parte fraccionaria queda lejos de la grilla."""
    if frac_range is None:
        offsets = rng.uniform(-span, span, size=(groups, synapses, 2))
    else:
        whole = rng.integers(-int(span), int(span), size=(groups, synapses, 2))
        offsets = whole + rng.uniform(frac_range[0], frac_range[1], size=(groups, synapses, 2))
    if pin_origin:
        offsets[:, 0, :] = 0.0
    return PositionSet(offsets, pin_origin)


def random_acu_layer(rng: np.random.Generator, channels_in: int, channels_out: int, groups: int,
                     synapses: int, group_mode: str = "multi", span: float = 3.0,
                     frac_range: Optional[Tuple[float, float]] = None, padding: int = 0) -> AcuLayer:
    geo = ConvGeometry(channels_in, channels_out, groups, padding=(padding, padding))
    position_groups = 1 if group_mode == "shared" else groups
    positions = random_positions(rng, position_groups, synapses, span, frac_range)
    weights = rng.normal(0.0, 1.0, size=(channels_out, geo.in_per_group, 1, synapses))
    bias = rng.normal(0.0, 1.0, size=channels_out)
    return AcuLayer(geo, weights, bias, positions, group_mode)


# =============================================================================
# Batería de gradientes
# =============================================================================

def check_layer_gradients(prefix: str, x: np.ndarray, layer: AcuLayer, d_out: np.ndarray,
                          backward=acu_backward, h: float = FD_STEP,
                          threads: Optional[int] = None) -> List[GradCheckReport]:
    analytic = backward(x, layer, d_out, threads=threads)
    numeric = finite_diff_gradients(x, layer, d_out, h, threads)
    return [
        compare_gradients(f"{prefix}/weights", analytic.d_weights, numeric.d_weights),
        compare_gradients(f"{prefix}/bias", analytic.d_bias, numeric.d_bias),
        compare_gradients(f"{prefix}/positions", analytic.d_positions, numeric.d_positions),
        compare_gradients(f"{prefix}/input", analytic.d_input, numeric.d_input),
    ]


def run_gradient_suite(seed: int, trials: int, backward=acu_backward, h: float = FD_STEP,
                       battery: Sequence[Tuple[str, int, int, int]] = GRADIENT_BATTERY,
                       threads: Optional[int] = None) -> List[GradCheckReport]:
    if trials < 1:
        raise InvalidArgumentError(f"trials debe ser >= 1, llegó {trials}")
    t0 = _t()
    reports: List[GradCheckReport] = []
    for trial in range(trials):
        for name, channels, groups, synapses in battery:
            rng = rng_for(seed, f"gradcheck/{name}/{trial}")
            layer = random_acu_layer(rng, channels, channels, groups, synapses, span=2.0, frac_range=(0.2, 0.8))
            x = rng.normal(0.0, 1.0, size=(2, channels, 5, 5))
            d_out = rng.normal(0.0, 1.0, size=(2, channels, 5, 5))
            reports.extend(check_layer_gradients(f"{name}/t{trial}", x, layer, d_out, backward, h, threads))
    log_elapsed("run_gradient_suite", t0)
    failed = [r.parameter for r in reports if not r.passed]
    if failed:
        logger.warning(f"⚠️ gradcheck: {len(failed)} reportes fallaron: {', '.join(failed)}")
    return reports


# =============================================================================
# Batería de equivalencia (ACU == conv con peso extrapolado)
# =============================================================================

def equivalence_check(seed: int, layers: int = 100, threads: Optional[int] = None) -> EquivalenceReport:
    t0 = _t()
    max_diff = 0.0
    max_mass = 0.0
    max_ratio = 0.0
    configs = [(1, 4), (2, 4), (4, 4), ("dw", 4)]
    for i in range(layers):
        rng = rng_for(seed, f"equivcheck/{i}")
        groups, channels = configs[i % len(configs)]
        if groups == "dw":
            groups = channels
        synapses = (1, 3, 5, 9)[(i // len(configs)) % 4]
        mode = "shared" if (i % 7 == 3 and groups > 1) else "multi"
        layer = random_acu_layer(rng, channels, channels, groups, synapses, mode,
                                 span=3.0, padding=int(rng.integers(0, 2)))
        x = rng.normal(0.0, 1.0, size=(2, channels, 7, 7))
        kernel = extrapolate_weights(layer)
        lhs = acu_forward(x, layer, threads)
        rhs = conv_with_extrapolated(x, kernel, layer.geometry, bias=layer.bias, threads=threads)
        max_diff = max(max_diff, float(np.max(np.abs(lhs - rhs))))
        mass = np.abs(kernel.weights.sum(axis=(2, 3)) - layer.weights[:, :, 0, :].sum(axis=-1))
        max_mass = max(max_mass, float(mass.max()))
        max_ratio = max(max_ratio, sparsity_report(kernel).max_nonzeros_per_slice / synapses)
    log_elapsed("equivalence_check", t0)
    return EquivalenceReport(layers, max_diff, max_mass, max_ratio)


# =============================================================================
# Salidas
# =============================================================================

REPORT_HEADER = ["parameter", "max_rel_error", "max_abs_error", "worst_index", "passed", "noise_floor"]


def _status(r: GradCheckReport) -> str:
    if not r.passed:
        return "FAIL"
    return "PASS*" if r.noise_floor else "PASS"


def _index_str(idx: Tuple[int, ...]) -> str:
    return "(" + " ".join(str(i) for i in idx) + ")"


def reports_table(reports: Sequence[GradCheckReport]) -> str:
    lines = [f"{'parameter':<26} {'max_rel':>11} {'max_abs':>11} {'worst':>16} {'ok':>5}"]
    for r in reports:
        lines.append(
            f"{r.parameter:<26} {r.max_rel_error:>11.3e} {r.max_abs_error:>11.3e} "
            f"{_index_str(r.worst_index):>16} {_status(r):>5}"
        )
    if any(r.noise_floor for r in reports):
        lines.append(f"* error relativo > tolerancia sólo donde |a - f| <= piso de ruido ({GRADCHECK_ATOL:g})")
    return "\n".join(lines)


def reports_csv(reports: Sequence[GradCheckReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_HEADER)
    for r in reports:
        writer.writerow([r.parameter, f"{r.max_rel_error:.6e}", f"{r.max_abs_error:.6e}",
                         _index_str(r.worst_index), int(r.passed), int(r.noise_floor)])
    return buf.getvalue()
