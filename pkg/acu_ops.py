# -*- coding: utf-8 -*-
# acu_ops.py: convolución naive y ACU (forward / backward) con grupos y depthwise
#
# Convención de ejes: α desplaza el primer índice espacial (filas) y β el segundo
# (columnas). Las muestras fuera de la imagen valen 0, igual que el zero padding.
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

import numpy as np

from config import ACU_THREADS, logger
from errors import InvalidArgumentError
from tensor_core import Tensor4, as_tensor4

GROUP_MODES = ("multi", "shared")

Pair = Tuple[int, int]


def _pair(v) -> Pair:
    if isinstance(v, (int, np.integer)):
        return int(v), int(v)
    a, b = v
    return int(a), int(b)


# =============================================================================
# Tipos
# =============================================================================

@dataclass(frozen=True)
class ConvGeometry:
    in_channels: int
    out_channels: int
    groups: int = 1
    stride: Pair = (1, 1)
    padding: Pair = (0, 0)
    dilation: Pair = (1, 1)  # sólo lo usa ConvLayer

    def __post_init__(self):
        object.__setattr__(self, "stride", _pair(self.stride))
        object.__setattr__(self, "padding", _pair(self.padding))
        object.__setattr__(self, "dilation", _pair(self.dilation))
        if self.in_channels < 1 or self.out_channels < 1 or self.groups < 1:
            raise InvalidArgumentError(
                f"canales y grupos deben ser >= 1 (C_I={self.in_channels}, C_O={self.out_channels}, G={self.groups})"
            )
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise InvalidArgumentError(
                f"G={self.groups} no divide C_I={self.in_channels} y C_O={self.out_channels}"
            )
        if min(self.stride) < 1 or min(self.dilation) < 1:
            raise InvalidArgumentError(f"stride/dilation deben ser >= 1: {self.stride}, {self.dilation}")
        if min(self.padding) < 0:
            raise InvalidArgumentError(f"padding negativo: {self.padding}")

    @property
    def in_per_group(self) -> int:
        return self.in_channels // self.groups

    @property
    def out_per_group(self) -> int:
        return self.out_channels // self.groups

    def group_of(self, out_channel: int) -> int:
        return out_channel // self.out_per_group

    @property
    def is_depthwise(self) -> bool:
        return self.groups == self.in_channels == self.out_channels


@dataclass
class PositionSet:
    """Desplazamientos (α, β) por grupo: array (G, K, 2).

    Con pin_origin la sinapsis 0 de cada grupo queda fija en (0, 0) y no se entrena.
    """

    offsets: np.ndarray
    pin_origin: bool = True

    def __post_init__(self):
        self.offsets = np.array(self.offsets, dtype=np.float64)
        if self.offsets.ndim != 3 or self.offsets.shape[2] != 2 or min(self.offsets.shape[:2]) < 1:
            raise InvalidArgumentError(f"offsets debe tener shape (G, K, 2), llegó {self.offsets.shape}")
        if not np.all(np.isfinite(self.offsets)):
            raise InvalidArgumentError("offsets con NaN/Inf")
        if self.pin_origin and np.any(self.offsets[:, 0, :] != 0.0):
            raise InvalidArgumentError("la sinapsis 0 de cada grupo debe estar en (0, 0)")

    @property
    def groups(self) -> int:
        return self.offsets.shape[0]

    @property
    def synapses(self) -> int:
        return self.offsets.shape[1]

    def free_mask(self) -> np.ndarray:
        mask = np.ones(self.offsets.shape, dtype=bool)
        if self.pin_origin:
            mask[:, 0, :] = False
        return mask

    @property
    def free_count(self) -> int:
        return int(self.free_mask().sum())

    def copy(self) -> "PositionSet":
        return PositionSet(self.offsets.copy(), self.pin_origin)


@dataclass
class AcuLayer:
    geometry: ConvGeometry
    weights: np.ndarray  # (C_O, C_I/G, 1, K)
    bias: np.ndarray  # (C_O,)
    positions: PositionSet
    group_mode: str = "multi"

    def __post_init__(self):
        geo = self.geometry
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias).reshape(-1)
        if self.group_mode not in GROUP_MODES:
            raise InvalidArgumentError(f"group_mode desconocido: {self.group_mode!r}")
        k = self.positions.synapses
        expected = (geo.out_channels, geo.in_per_group, 1, k)
        if self.weights.shape != expected:
            raise InvalidArgumentError(f"weights: se esperaba {expected}, llegó {self.weights.shape}")
        if self.bias.shape != (geo.out_channels,):
            raise InvalidArgumentError(f"bias: se esperaba ({geo.out_channels},), llegó {self.bias.shape}")
        position_groups = 1 if self.group_mode == "shared" else geo.groups
        if self.positions.groups != position_groups:
            raise InvalidArgumentError(
                f"el PositionSet tiene {self.positions.groups} grupos y el modo "
                f"{self.group_mode} con G={geo.groups} necesita {position_groups}"
            )

    @property
    def synapses(self) -> int:
        return self.positions.synapses

    def group_positions(self, g: int) -> np.ndarray:
        return self.positions.offsets[0 if self.group_mode == "shared" else g]

    def output_hw(self, h: int, w: int) -> Pair:
        return acu_output_hw(self.geometry, h, w)

    @classmethod
    def from_grid(cls, geometry: ConvGeometry, kernel: np.ndarray, bias=None,
                  dilation: int = 1, group_mode: str = "multi") -> "AcuLayer":
        """Embebe un kernel denso (C_O, C_I/G, kh, kw) en un ACU sobre la grilla."""
        kernel = np.asarray(kernel)
        _, _, kh, kw = kernel.shape
        groups = 1 if group_mode == "shared" else geometry.groups
        positions = make_grid_positions(kh, kw, dilation, groups)
        order = grid_order(kh, kw)
        weights = np.stack([kernel[:, :, i, j] for i, j in order], axis=-1)[:, :, None, :]
        if bias is None:
            bias = np.zeros(geometry.out_channels, dtype=kernel.dtype)
        return cls(geometry, weights, bias, positions, group_mode)

    def copy(self) -> "AcuLayer":
        return AcuLayer(self.geometry, self.weights.copy(), self.bias.copy(), self.positions.copy(), self.group_mode)


@dataclass
class AcuGradients:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_positions: np.ndarray  # (G_pos, K-1, 2) con origen fijo; (G_pos, K, 2) si no
    d_input: np.ndarray
    pin_origin: bool = True

    def d_positions_full(self) -> np.ndarray:
        """Mismo shape que PositionSet.offsets, con 0 en la sinapsis fija."""
        if not self.pin_origin:
            return self.d_positions
        g, k1, _ = self.d_positions.shape
        full = np.zeros((g, k1 + 1, 2), dtype=self.d_positions.dtype)
        full[:, 1:] = self.d_positions
        return full


@dataclass
class ConvLayer:
    """Convolución densa (agrupada y/o dilatada): weights (C_O, C_I/G, kh, kw)."""

    geometry: ConvGeometry
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        geo = self.geometry
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias).reshape(-1)
        if self.weights.ndim != 4 or self.weights.shape[:2] != (geo.out_channels, geo.in_per_group):
            raise InvalidArgumentError(
                f"weights: se esperaba ({geo.out_channels}, {geo.in_per_group}, kh, kw), llegó {self.weights.shape}"
            )
        if self.bias.shape != (geo.out_channels,):
            raise InvalidArgumentError(f"bias: se esperaba ({geo.out_channels},), llegó {self.bias.shape}")

    @property
    def kernel_hw(self) -> Pair:
        return self.weights.shape[2], self.weights.shape[3]

    def output_hw(self, h: int, w: int) -> Pair:
        (sh, sw), (ph, pw), (dh, dw) = self.geometry.stride, self.geometry.padding, self.geometry.dilation
        kh, kw = self.kernel_hw
        ho = (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1
        wo = (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
        if ho < 1 or wo < 1:
            raise InvalidArgumentError(f"entrada {h}x{w} demasiado chica para kernel {kh}x{kw}")
        return ho, wo


@dataclass
class ConvGradients:
    d_weights: np.ndarray
    d_bias: np.ndarray
    d_input: np.ndarray


def acu_output_hw(geo: ConvGeometry, h: int, w: int) -> Pair:
    # las posiciones se aplican sobre el ancla con stride, como en un 1x1
    (sh, sw), (ph, pw) = geo.stride, geo.padding
    return (h + 2 * ph - 1) // sh + 1, (w + 2 * pw - 1) // sw + 1


# =============================================================================
# Grilla (conv ⊂ ACU)
# =============================================================================

def grid_order(kh: int, kw: int) -> List[Pair]:
    """Índices (i, j) del kernel en orden de sinapsis: centro primero, resto row-major."""
    center = (kh // 2, kw // 2)
    rest = [(i, j) for i in range(kh) for j in range(kw) if (i, j) != center]
    return [center] + rest


def make_grid_positions(kernel_h: int, kernel_w: int, dilation: int = 1, groups: int = 1) -> PositionSet:
    if kernel_h < 1 or kernel_w < 1 or kernel_h % 2 == 0 or kernel_w % 2 == 0:
        raise InvalidArgumentError(f"la grilla necesita dims impares, llegó {kernel_h}x{kernel_w}")
    if dilation < 1 or groups < 1:
        raise InvalidArgumentError(f"dilation y groups deben ser >= 1 (d={dilation}, G={groups})")
    ch, cw = kernel_h // 2, kernel_w // 2
    one = np.array([((i - ch) * dilation, (j - cw) * dilation) for i, j in grid_order(kernel_h, kernel_w)],
                   dtype=np.float64)
    return PositionSet(np.repeat(one[None], groups, axis=0))


# =============================================================================
# Gather / scatter con zero extension
# =============================================================================

def _span(start: int, step: int, n_out: int, n_in: int):
    """Rango de salidas o (inclusive) con 0 <= start + o*step < n_in."""
    o_lo = max(0, (-start + step - 1) // step)
    o_hi = min(n_out - 1, (n_in - 1 - start) // step)
    if o_lo > o_hi:
        return None
    return o_lo, o_hi, start + o_lo * step, start + o_hi * step


def _gather(x: np.ndarray, row_start: int, col_start: int, stride: Pair, out_hw: Pair) -> np.ndarray:
    n, c, h, w = x.shape
    out = np.zeros((n, c, out_hw[0], out_hw[1]), dtype=x.dtype)
    rs = _span(row_start, stride[0], out_hw[0], h)
    cs = _span(col_start, stride[1], out_hw[1], w)
    if rs is None or cs is None:
        return out
    out[:, :, rs[0]:rs[1] + 1, cs[0]:cs[1] + 1] = x[:, :, rs[2]:rs[3] + 1:stride[0], cs[2]:cs[3] + 1:stride[1]]
    return out


def _scatter_add(dx: np.ndarray, values: np.ndarray, row_start: int, col_start: int, stride: Pair) -> None:
    """Adjunto de _gather: acumula values en dx (in place)."""
    _, _, h, w = dx.shape
    ho, wo = values.shape[2], values.shape[3]
    rs = _span(row_start, stride[0], ho, h)
    cs = _span(col_start, stride[1], wo, w)
    if rs is None or cs is None:
        return
    dx[:, :, rs[2]:rs[3] + 1:stride[0], cs[2]:cs[3] + 1:stride[1]] += values[:, :, rs[0]:rs[1] + 1, cs[0]:cs[1] + 1]


# =============================================================================
# Paralelismo por batch
# =============================================================================

def _batch_chunks(n: int, threads: int) -> List[slice]:
    parts = max(1, min(threads, n))
    bounds = np.linspace(0, n, parts + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _map_batches(fn: Callable, x: np.ndarray, threads: Optional[int], *others) -> list:
    """Aplica fn por bloques de batch; los resultados vuelven en orden fijo."""
    threads = ACU_THREADS if threads is None else threads
    chunks = _batch_chunks(x.shape[0], threads)
    if len(chunks) == 1:
        return [fn(x, *others)]
    with ThreadPoolExecutor(max_workers=len(chunks)) as ex:
        futs = [ex.submit(fn, x[s], *[o[s] for o in others]) for s in chunks]
        return [f.result() for f in futs]


# =============================================================================
# Muestreo bilineal
# =============================================================================

def bilinear_sample(x: Tensor4, n: int, c: int, row: float, col: float) -> float:
    """Valor interpolado en (row, col); vecinos fuera de [0,h)x[0,w) valen 0."""
    h, w = x.shape[2], x.shape[3]
    r0, c0 = math.floor(row), math.floor(col)
    da, db = row - r0, col - c0

    def q(r, cc):
        return float(x[n, c, r, cc]) if 0 <= r < h and 0 <= cc < w else 0.0

    return (q(r0, c0) * (1 - da) * (1 - db) + q(r0 + 1, c0) * da * (1 - db)
            + q(r0, c0 + 1) * (1 - da) * db + q(r0 + 1, c0 + 1) * da * db)


def bilinear_coefficients(alpha: float, beta: float):
    """Piso entero y los cuatro pesos (c11, c21, c12, c22) de un desplazamiento."""
    r0, c0 = math.floor(alpha), math.floor(beta)
    da, db = alpha - r0, beta - c0
    return r0, c0, da, db, ((1 - da) * (1 - db), da * (1 - db), (1 - da) * db, da * db)


_NEIGHBORS = ((0, 0), (1, 0), (0, 1), (1, 1))  # Q11, Q21, Q12, Q22


def _interpolate(x: np.ndarray, alpha: float, beta: float, geo: ConvGeometry, out_hw: Pair) -> np.ndarray:
    r0, c0, _, _, coefs = bilinear_coefficients(alpha, beta)
    rs, cs = r0 - geo.padding[0], c0 - geo.padding[1]
    s = np.zeros((x.shape[0], x.shape[1], out_hw[0], out_hw[1]), dtype=x.dtype)
    for (dr, dc), coef in zip(_NEIGHBORS, coefs):
        if coef != 0.0:
            s += coef * _gather(x, rs + dr, cs + dc, geo.stride, out_hw)
    return s


# =============================================================================
# ACU forward / backward
# =============================================================================

def _check_input(x, geo: ConvGeometry) -> np.ndarray:
    x = as_tensor4(x, name="x")
    if x.shape[1] != geo.in_channels:
        raise InvalidArgumentError(f"x tiene {x.shape[1]} canales y la capa espera C_I={geo.in_channels}")
    return x


def _acu_forward_block(x: np.ndarray, layer: AcuLayer) -> np.ndarray:
    geo = layer.geometry
    ho, wo = layer.output_hw(x.shape[2], x.shape[3])
    cin, cout = geo.in_per_group, geo.out_per_group
    y = np.zeros((x.shape[0], geo.out_channels, ho, wo), dtype=x.dtype)
    for g in range(geo.groups):
        xg = x[:, g * cin:(g + 1) * cin]
        wg = layer.weights[g * cout:(g + 1) * cout, :, 0, :]
        pos = layer.group_positions(g)
        # cada canal de entrada se interpola una sola vez por sinapsis
        for k in range(layer.synapses):
            s = _interpolate(xg, pos[k, 0], pos[k, 1], geo, (ho, wo))
            y[:, g * cout:(g + 1) * cout] += np.einsum("oi,nihw->nohw", wg[:, :, k], s)
    y += layer.bias.reshape(1, -1, 1, 1)
    return y


def acu_forward(x: Tensor4, layer: AcuLayer, threads: Optional[int] = None) -> Tensor4:
    x = _check_input(x, layer.geometry)
    return np.concatenate(_map_batches(lambda xb: _acu_forward_block(xb, layer), x, threads), axis=0)


def _acu_backward_block(x: np.ndarray, d_out: np.ndarray, layer: AcuLayer):
    geo = layer.geometry
    ho, wo = d_out.shape[2], d_out.shape[3]
    cin, cout = geo.in_per_group, geo.out_per_group
    d_w = np.zeros(layer.weights.shape, dtype=np.result_type(x, layer.weights))
    d_pos = np.zeros(layer.positions.offsets.shape, dtype=np.float64)
    dx = np.zeros_like(x)
    for g in range(geo.groups):
        xg = x[:, g * cin:(g + 1) * cin]
        dxg = dx[:, g * cin:(g + 1) * cin]
        dg = d_out[:, g * cout:(g + 1) * cout]
        wg = layer.weights[g * cout:(g + 1) * cout, :, 0, :]
        pos = layer.group_positions(g)
        pg = 0 if layer.group_mode == "shared" else g
        for k in range(layer.synapses):
            r0, c0, da, db, coefs = bilinear_coefficients(pos[k, 0], pos[k, 1])
            rs, cs = r0 - geo.padding[0], c0 - geo.padding[1]
            q11, q21, q12, q22 = (_gather(xg, rs + dr, cs + dc, geo.stride, (ho, wo)) for dr, dc in _NEIGHBORS)
            s = coefs[0] * q11 + coefs[1] * q21 + coefs[2] * q12 + coefs[3] * q22

            d_w[g * cout:(g + 1) * cout, :, 0, k] += np.einsum("nohw,nihw->oi", dg, s)
            ds = np.einsum("oi,nohw->nihw", wg[:, :, k], dg)
            for (dr, dc), coef in zip(_NEIGHBORS, coefs):
                if coef != 0.0:
                    _scatter_add(dxg, coef * ds, rs + dr, cs + dc, geo.stride)
            # derivada de la fórmula con floor (subgradiente sobre la grilla)
            d_pos[pg, k, 0] += np.sum(ds * ((q21 - q11) * (1 - db) + (q22 - q12) * db))
            d_pos[pg, k, 1] += np.sum(ds * ((q12 - q11) * (1 - da) + (q22 - q21) * da))
    d_b = d_out.sum(axis=(0, 2, 3))
    return d_w, d_b, d_pos, dx


def acu_backward(x: Tensor4, layer: AcuLayer, d_out: Tensor4, threads: Optional[int] = None) -> AcuGradients:
    """Gradientes exactos de L = sum(d_out * acu_forward(x, layer))."""
    x = _check_input(x, layer.geometry)
    d_out = as_tensor4(d_out, name="d_out")
    expected = (x.shape[0], layer.geometry.out_channels) + layer.output_hw(x.shape[2], x.shape[3])
    if d_out.shape != expected:
        raise InvalidArgumentError(f"d_out: se esperaba {expected}, llegó {d_out.shape}")

    parts = _map_batches(lambda xb, db: _acu_backward_block(xb, db, layer), x, threads, d_out)
    # reducción en orden fijo de partición
    d_w, d_b, d_pos, _ = parts[0]
    d_w, d_b, d_pos = d_w.copy(), d_b.copy(), d_pos.copy()
    for pw, pb, pp, _ in parts[1:]:
        d_w += pw
        d_b += pb
        d_pos += pp
    dx = np.concatenate([p[3] for p in parts], axis=0)

    pinned = layer.positions.pin_origin
    return AcuGradients(d_w, d_b, d_pos[:, 1:] if pinned else d_pos, dx, pinned)


# =============================================================================
# Convolución densa (naive)
# =============================================================================

def dense_correlate(x: np.ndarray, kernel: np.ndarray, geo: ConvGeometry,
                    row_start: int, col_start: int, out_hw: Pair) -> np.ndarray:
    """y[n,o,m,m'] = Σ_c Σ_ij k[o,c,i,j]·x[n,c, m·s_h+row_start+i·d_h, m'·s_w+col_start+j·d_w]."""
    cin, cout = geo.in_per_group, geo.out_per_group
    (dh, dw) = geo.dilation
    y = np.zeros((x.shape[0], geo.out_channels, out_hw[0], out_hw[1]), dtype=x.dtype)
    for g in range(geo.groups):
        xg = x[:, g * cin:(g + 1) * cin]
        kg = kernel[g * cout:(g + 1) * cout]
        for i in range(kernel.shape[2]):
            for j in range(kernel.shape[3]):
                tap = kg[:, :, i, j]
                if not np.any(tap):
                    continue
                xs = _gather(xg, row_start + i * dh, col_start + j * dw, geo.stride, out_hw)
                y[:, g * cout:(g + 1) * cout] += np.einsum("oi,nihw->nohw", tap, xs)
    return y


def dense_correlate_backward(x: np.ndarray, kernel: np.ndarray, geo: ConvGeometry,
                             row_start: int, col_start: int, d_out: np.ndarray):
    cin, cout = geo.in_per_group, geo.out_per_group
    (dh, dw) = geo.dilation
    out_hw = d_out.shape[2], d_out.shape[3]
    d_k = np.zeros(kernel.shape, dtype=np.result_type(x, kernel))
    dx = np.zeros_like(x)
    for g in range(geo.groups):
        xg = x[:, g * cin:(g + 1) * cin]
        dxg = dx[:, g * cin:(g + 1) * cin]
        dg = d_out[:, g * cout:(g + 1) * cout]
        kg = kernel[g * cout:(g + 1) * cout]
        for i in range(kernel.shape[2]):
            for j in range(kernel.shape[3]):
                rs, cs = row_start + i * dh, col_start + j * dw
                xs = _gather(xg, rs, cs, geo.stride, out_hw)
                d_k[g * cout:(g + 1) * cout, :, i, j] = np.einsum("nohw,nihw->oi", dg, xs)
                _scatter_add(dxg, np.einsum("oi,nohw->nihw", kg[:, :, i, j], dg), rs, cs, geo.stride)
    return d_k, dx


def naive_conv_forward(x: Tensor4, layer: ConvLayer, threads: Optional[int] = None) -> Tensor4:
    geo = layer.geometry
    x = _check_input(x, geo)
    out_hw = layer.output_hw(x.shape[2], x.shape[3])

    def block(xb):
        y = dense_correlate(xb, layer.weights, geo, -geo.padding[0], -geo.padding[1], out_hw)
        return y + layer.bias.reshape(1, -1, 1, 1)

    return np.concatenate(_map_batches(block, x, threads), axis=0)


def naive_conv_backward(x: Tensor4, layer: ConvLayer, d_out: Tensor4) -> ConvGradients:
    geo = layer.geometry
    x = _check_input(x, geo)
    d_out = as_tensor4(d_out, name="d_out")
    expected = (x.shape[0], geo.out_channels) + layer.output_hw(x.shape[2], x.shape[3])
    if d_out.shape != expected:
        raise InvalidArgumentError(f"d_out: se esperaba {expected}, llegó {d_out.shape}")
    d_k, dx = dense_correlate_backward(x, layer.weights, geo, -geo.padding[0], -geo.padding[1], d_out)
    return ConvGradients(d_k, d_out.sum(axis=(0, 2, 3)), dx)


def stride_warning(layer: AcuLayer) -> None:
    if layer.geometry.stride != (1, 1):
        logger.warning(f"ACU con stride {layer.geometry.stride}: soporte experimental")
