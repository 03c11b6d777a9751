# -*- coding: utf-8 -*-
# equivalence.py: ACU -> convolución densa equivalente (peso extrapolado)
#
# Cada peso de sinapsis se reparte en sus cuatro vecinos de la grilla con los
# mismos coeficientes bilineales que usa la interpolación; los solapes se suman.
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, replace
from typing import Iterable, List, Optional, Tuple

import numpy as np

from acu_ops import (
    AcuLayer,
    ConvGeometry,
    _check_input,
    _map_batches,
    acu_forward,
    acu_output_hw,
    bilinear_coefficients,
    dense_correlate,
)
from errors import InvalidArgumentError
from tensor_core import Tensor4, as_tensor4

# observación empírica: los kernels aprendidos suelen caer dentro de 7x7
EMPIRICAL_EXTENT = 7


@dataclass
class ExtrapolatedKernel:
    weights: np.ndarray  # (C_O, C_I/G, KH, KW)
    origin: Tuple[int, int]  # tap que corresponde al desplazamiento (0, 0)
    symmetric_radius: Tuple[int, int] = (0, 0)  # max ⌈|α|⌉, max ⌈|β|⌉

    @property
    def extent(self) -> Tuple[int, int]:
        return self.weights.shape[2], self.weights.shape[3]


@dataclass
class SparsityReport:
    taps: int
    nonzeros: int
    density: float
    extent: Tuple[int, int]  # caja mínima que contiene todos los taps no nulos
    max_nonzeros_per_slice: int
    within_empirical_extent: bool

    def row(self, layer: str) -> List:
        return [layer, self.extent[0], self.extent[1], self.nonzeros, f"{self.density:.6f}"]


def _taps(alpha: float, beta: float):
    r0, c0, _, _, coefs = bilinear_coefficients(alpha, beta)
    return [(r0 + dr, c0 + dc, coef) for (dr, dc), coef in zip(((0, 0), (1, 0), (0, 1), (1, 1)), coefs)
            if coef != 0.0]


def extrapolate_weights(layer: AcuLayer) -> ExtrapolatedKernel:
    geo = layer.geometry
    cout = geo.out_per_group
    per_group = [[_taps(a, b) for a, b in layer.group_positions(g)] for g in range(geo.groups)]

    # extensión ajustada a las posiciones reales; siempre incluye el origen
    rows = [0] + [r for taps in per_group for syn in taps for r, _, _ in syn]
    cols = [0] + [c for taps in per_group for syn in taps for _, c, _ in syn]
    r_lo, r_hi, c_lo, c_hi = min(rows), max(rows), min(cols), max(cols)

    dtype = np.result_type(layer.weights, np.float64)
    kernel = np.zeros((geo.out_channels, geo.in_per_group, r_hi - r_lo + 1, c_hi - c_lo + 1), dtype=dtype)
    for g, taps in enumerate(per_group):
        block = slice(g * cout, (g + 1) * cout)
        for k, syn in enumerate(taps):
            w = layer.weights[block, :, 0, k]
            for r, c, coef in syn:
                kernel[block, :, r - r_lo, c - c_lo] += coef * w

    offsets = layer.positions.offsets
    radius = (int(np.max(np.ceil(np.abs(offsets[..., 0])))), int(np.max(np.ceil(np.abs(offsets[..., 1])))))
    return ExtrapolatedKernel(kernel, (-r_lo, -c_lo), radius)


def conv_with_extrapolated(x: Tensor4, k: ExtrapolatedKernel, geometry: ConvGeometry,
                           bias: Optional[np.ndarray] = None, threads: Optional[int] = None) -> Tensor4:
    """Convolución densa con el kernel extrapolado; mismo shape de salida que acu_forward.

    El bias no forma parte del kernel: se suma sólo si se pasa explícitamente.
    """
    geo = replace(geometry, dilation=(1, 1))
    x = _check_input(x, geo)
    if k.weights.shape[:2] != (geo.out_channels, geo.in_per_group):
        raise InvalidArgumentError(
            f"kernel {k.weights.shape[:2]} no coincide con la geometría ({geo.out_channels}, {geo.in_per_group})"
        )
    out_hw = acu_output_hw(geo, x.shape[2], x.shape[3])
    row_start = -geo.padding[0] - k.origin[0]
    col_start = -geo.padding[1] - k.origin[1]

    def block(xb):
        return dense_correlate(xb, k.weights, geo, row_start, col_start, out_hw)

    y = np.concatenate(_map_batches(block, x, threads), axis=0)
    if bias is not None:
        y = y + np.asarray(bias).reshape(1, -1, 1, 1)
    return y


def sparsity_report(k: ExtrapolatedKernel) -> SparsityReport:
    nz = k.weights != 0
    taps = int(nz.size)
    nonzeros = int(nz.sum())
    if nonzeros:
        r_any = np.nonzero(nz.any(axis=(0, 1, 3)))[0]
        c_any = np.nonzero(nz.any(axis=(0, 1, 2)))[0]
        extent = (int(r_any[-1] - r_any[0] + 1), int(c_any[-1] - c_any[0] + 1))
    else:
        extent = (0, 0)
    per_slice = int(nz.sum(axis=(2, 3)).max())
    return SparsityReport(
        taps=taps,
        nonzeros=nonzeros,
        density=nonzeros / taps,
        extent=extent,
        max_nonzeros_per_slice=per_slice,
        within_empirical_extent=extent[0] <= EMPIRICAL_EXTENT and extent[1] <= EMPIRICAL_EXTENT,
    )


SPARSITY_HEADER = ["layer", "extent_h", "extent_w", "nonzeros", "density"]


def sparsity_csv(rows: Iterable[Tuple[str, SparsityReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SPARSITY_HEADER)
    for name, report in rows:
        writer.writerow(report.row(name))
    return buf.getvalue()


def max_equivalence_error(x: Tensor4, layer: AcuLayer, forward=None) -> float:
    """max |acu_forward − (conv_with_extrapolated + bias)|."""
    forward = forward or acu_forward
    x = as_tensor4(x, name="x")
    kernel = extrapolate_weights(layer)
    lhs = forward(x, layer)
    rhs = conv_with_extrapolated(x, kernel, layer.geometry, bias=layer.bias)
    return float(np.max(np.abs(lhs - rhs)))
