# -*- coding: utf-8 -*-
# accounting.py: conteo de parámetros y MAdds por capa / red
#
# Convención MAdds: 1 multiply-accumulate = 1 MAdd; cada muestra bilineal cuesta 4
# (los coeficientes se precalculan y no se cuentan). Los bias no suman MAdds.
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

from acu_ops import ConvGeometry, acu_output_hw
from errors import InvalidArgumentError
from network import AcuModule, ConvModule, FullyConnected, GlobalAvgPool, Module, Residual, ToyNetwork

INTERP_MADDS_PER_SAMPLE = 4
LAYER_KINDS = ("acu", "conv", "fc", "relu", "gap", "residual")


@dataclass(frozen=True)
class LayerDescription:
    kind: str
    in_channels: int = 1
    out_channels: int = 1
    groups: int = 1
    synapses: int = 1  # K; para conv es kh*kw
    group_mode: str = "multi"
    pin_origin: bool = True
    kernel: Tuple[int, int] = (1, 1)
    stride: Tuple[int, int] = (1, 1)
    padding: Tuple[int, int] = (0, 0)
    dilation: Tuple[int, int] = (1, 1)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidArgumentError(f"tipo de capa desconocido: {self.kind!r}")
        if self.kind in ("acu", "conv"):
            if self.groups < 1 or self.in_channels % self.groups or self.out_channels % self.groups:
                raise InvalidArgumentError(
                    f"G={self.groups} no divide C_I={self.in_channels} y C_O={self.out_channels}"
                )


@dataclass
class LayerCost:
    weight_params: int = 0
    position_params: int = 0
    bias_params: int = 0
    core_madds: int = 0
    interp_madds: int = 0

    @property
    def total_ex_bias(self) -> int:
        return self.weight_params + self.position_params

    def __add__(self, other: "LayerCost") -> "LayerCost":
        return LayerCost(
            self.weight_params + other.weight_params,
            self.position_params + other.position_params,
            self.bias_params + other.bias_params,
            self.core_madds + other.core_madds,
            self.interp_madds + other.interp_madds,
        )


def count_params(desc: LayerDescription) -> LayerCost:
    """{C_I/G · C_O/G · K · G} + {2 · (K−1) · G}, más C_O de bias."""
    if desc.kind in ("acu", "conv"):
        g = desc.groups
        weights = (desc.in_channels // g) * (desc.out_channels // g) * desc.synapses * g
        positions = 0
        if desc.kind == "acu":
            position_groups = 1 if desc.group_mode == "shared" else g
            free = desc.synapses - 1 if desc.pin_origin else desc.synapses
            positions = 2 * free * position_groups
        return LayerCost(weight_params=weights, position_params=positions, bias_params=desc.out_channels)
    if desc.kind == "fc":
        return LayerCost(weight_params=desc.in_channels * desc.out_channels, bias_params=desc.out_channels)
    return LayerCost()


def output_hw(desc: LayerDescription, h: int, w: int) -> Tuple[int, int]:
    if desc.kind == "acu":
        geo = ConvGeometry(desc.in_channels, desc.out_channels, desc.groups, desc.stride, desc.padding)
        return acu_output_hw(geo, h, w)
    if desc.kind == "conv":
        (kh, kw), (sh, sw), (ph, pw), (dh, dw) = desc.kernel, desc.stride, desc.padding, desc.dilation
        return (h + 2 * ph - dh * (kh - 1) - 1) // sh + 1, (w + 2 * pw - dw * (kw - 1) - 1) // sw + 1
    if desc.kind in ("fc", "gap"):
        return 1, 1
    return h, w


def count_madds(desc: LayerDescription, h: int, w: int) -> LayerCost:
    if desc.kind in ("acu", "conv"):
        ho, wo = output_hw(desc, h, w)
        core = ho * wo * desc.out_channels * (desc.in_channels // desc.groups) * desc.synapses
        # cada canal de entrada se interpola una vez por sinapsis y ubicación
        interp = ho * wo * desc.in_channels * desc.synapses * INTERP_MADDS_PER_SAMPLE if desc.kind == "acu" else 0
        return LayerCost(core_madds=core, interp_madds=interp)
    if desc.kind == "fc":
        return LayerCost(core_madds=desc.in_channels * desc.out_channels)
    return LayerCost()


def layer_cost(desc: LayerDescription, h: int, w: int) -> LayerCost:
    return count_params(desc) + count_madds(desc, h, w)


# =============================================================================
# Desde módulos instanciados
# =============================================================================

def describe(module: Module) -> LayerDescription:
    if isinstance(module, AcuModule):
        layer = module.layer
        geo = layer.geometry
        return LayerDescription("acu", geo.in_channels, geo.out_channels, geo.groups, layer.synapses,
                                layer.group_mode, layer.positions.pin_origin,
                                stride=geo.stride, padding=geo.padding)
    if isinstance(module, ConvModule):
        geo = module.layer.geometry
        kh, kw = module.layer.kernel_hw
        return LayerDescription("conv", geo.in_channels, geo.out_channels, geo.groups, kh * kw,
                                kernel=(kh, kw), stride=geo.stride, padding=geo.padding, dilation=geo.dilation)
    if isinstance(module, FullyConnected):
        return LayerDescription("fc", module.weights.shape[1], module.weights.shape[0])
    if isinstance(module, GlobalAvgPool):
        return LayerDescription("gap")
    if isinstance(module, Residual):
        return LayerDescription("residual")
    return LayerDescription("relu")


def enumerate_trainable_scalars(module: Module) -> Dict[str, int]:
    """Cuenta por fuerza bruta los escalares entrenables guardados, por tipo."""
    counts = {"weight": 0, "bias": 0, "position": 0}
    for p in module.parameters():
        counts[p.kind] += p.trainable_count
    return counts


def network_costs(network: ToyNetwork, input_shape: Optional[Tuple[int, int, int]] = None
                  ) -> List[Tuple[str, str, LayerCost]]:
    """(nombre, tipo, costo) por capa con pesos, propagando tamaños espaciales."""
    shape = input_shape or network.input_shape
    rows: List[Tuple[str, str, LayerCost]] = []

    def walk(modules: Sequence[Module], shape):
        for m in modules:
            if isinstance(m, Residual):
                walk(m.body, shape)
                continue
            desc = describe(m)
            if desc.kind in ("acu", "conv", "fc"):
                cost = count_params(desc)
                if shape is not None:
                    cost = cost + count_madds(desc, shape[1], shape[2])
                rows.append((m.name, desc.kind, cost))
            if shape is not None:
                shape = m.output_shape(shape)
        return shape

    walk(network.layers, shape)
    return rows


COST_HEADER = ["layer", "type", "weight_params", "position_params", "bias_params",
               "total_ex_bias", "core_madds", "interp_madds"]


def _cost_fields(name: str, kind: str, c: LayerCost) -> list:
    return [name, kind, c.weight_params, c.position_params, c.bias_params, c.total_ex_bias,
            c.core_madds, c.interp_madds]


def _with_total(rows: Sequence[Tuple[str, str, LayerCost]]) -> List[list]:
    total = LayerCost()
    for _, _, c in rows:
        total = total + c
    return [_cost_fields(*r) for r in rows] + [_cost_fields("TOTAL", "-", total)]


def cost_csv(rows: Sequence[Tuple[str, str, LayerCost]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COST_HEADER)
    writer.writerows(_with_total(rows))
    return buf.getvalue()


def cost_table(rows: Sequence[Tuple[str, str, LayerCost]]) -> str:
    body = [[str(v) for v in r] for r in _with_total(rows)]
    widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(COST_HEADER)]

    def fmt(cells):
        return "  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))

    return "\n".join([fmt(COST_HEADER)] + [fmt(r) for r in body])
