# -*- coding: utf-8 -*-
# config.py: configuración global, logging y timers PERF
import os
import time
import logging

import numpy as np
from dotenv import load_dotenv

load_dotenv()

# ========================= Precisión =========================
# f64 por defecto: el gradcheck necesita margen. f32 sólo para medir tiempos.
ACU_DTYPE = os.getenv("ACU_DTYPE", "f64").lower().strip()
DTYPES = {"f64": np.float64, "f32": np.float32}
DEFAULT_DTYPE = DTYPES.get(ACU_DTYPE, np.float64)

# ========================= Concurrencia =========================
ACU_THREADS = int(os.getenv("ACU_THREADS", "1"))

# ========================= Verificación =========================
FD_STEP = float(os.getenv("ACU_FD_STEP", "1e-6"))
GRADCHECK_TOL = float(os.getenv("ACU_GRADCHECK_TOL", "1e-5"))
GRADCHECK_ATOL = float(os.getenv("ACU_GRADCHECK_ATOL", "1e-7"))  # piso de ruido de las diferencias finitas
EQUIV_TOL = float(os.getenv("ACU_EQUIV_TOL", "1e-10"))

# ========================= Entrenamiento =========================
MAX_TRAIN_WIDTH = int(os.getenv("ACU_MAX_TRAIN_WIDTH", "32"))
LOG_EVERY = int(os.getenv("ACU_LOG_EVERY", "100"))

# ========================= Logging =========================
ACU_LOG_LEVEL = os.getenv("ACU_LOG_LEVEL", "INFO").upper().strip()

logger = logging.getLogger("acu")


def configure_logging(level: str = ACU_LOG_LEVEL) -> None:
    """Un solo handler a stderr; llamarlo de nuevo sólo cambia el nivel."""
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
        logger.addHandler(handler)
    logger.setLevel(getattr(logging, str(level).upper(), logging.INFO))


def resolve_dtype(name: str | None):
    if name is None:
        return DEFAULT_DTYPE
    try:
        return DTYPES[name.lower()]
    except KeyError:
        from errors import InvalidArgumentError
        raise InvalidArgumentError(f"dtype no soportado: {name!r} (usar f64 o f32)")


# ========================= Timers PERF =========================
def _t():
    return time.perf_counter()


def log_elapsed(label: str, t0: float) -> None:
    try:
        dt = time.perf_counter() - t0
        logger.debug(f"[PERF] {label}: {dt:0.2f}s")
    except Exception:
        pass
