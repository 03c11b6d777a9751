# errors.py: jerarquía de errores de la librería.
# El CLI traduce AcuError a exit 1; los errores de uso de argparse salen con 2.
from __future__ import annotations

from typing import Any, Dict, Optional


class AcuError(Exception):
    """Base de todos los errores propios."""


class InvalidArgumentError(AcuError, ValueError):
    pass


class TensorFormatError(AcuError):
    """Magic o dtype inválido en un archivo de tensor."""


class TensorLengthError(AcuError):
    """El payload no coincide con las dimensiones del header."""


class TensorOverflowError(AcuError, OverflowError):
    pass


class ConfigError(AcuError):
    pass


class ManifestError(AcuError):
    """Manifiesto mal formado, tensor faltante o con shape incorrecto."""


class NonFiniteGradientError(AcuError):
    def __init__(self, parameter: str, iteration: int):
        self.parameter = parameter
        self.iteration = iteration
        super().__init__(f"gradiente no finito en '{parameter}' (iter {iteration})")


class TrainingDivergedError(AcuError):
    """La loss dio NaN/Inf. `snapshot` guarda los últimos parámetros buenos."""

    def __init__(self, iteration: int, snapshot: Optional[Dict[str, Any]] = None):
        self.iteration = iteration
        self.snapshot = snapshot or {}
        super().__init__(f"entrenamiento divergió en iter {iteration} (loss no finita)")
