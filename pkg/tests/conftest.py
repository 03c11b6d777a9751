# -*- coding: utf-8 -*-
import json
import sys
from pathlib import Path

import numpy as np
import pytest

ROOT = Path(__file__).resolve().parents[1]
if str(ROOT) not in sys.path:
    sys.path.insert(0, str(ROOT))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def write_json(tmp_path):
    """Escribe un dict como JSON en tmp_path y devuelve el path."""

    def _write(name, payload):
        path = tmp_path / name
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path

    return _write


@pytest.fixture
def block_manifest(write_json):
    """Bloque 16x4d: ACU agrupado C_I=C_O=64, K=9, G=16 sobre 8x8."""
    return write_json("net.json", {
        "name": "block16x4d",
        "input": {"channels": 64, "height": 8, "width": 8},
        "layers": [
            {"type": "acu", "name": "acu1", "in_channels": 64, "out_channels": 64, "groups": 16,
             "positions_init": {"kind": "grid", "kernel": [3, 3]}},
        ],
    })


@pytest.fixture
def shift_config(write_json):
    """Experimento chico de desplazamiento para los tests del CLI."""
    return write_json("shift.json", {
        "train": {"base_lr": 0.05, "momentum": 0.9, "weight_decay": 0.0, "position_lr": 0.02,
                  "schedule": "linear", "total_iters": 40, "batch_size": 4, "log_every": 10},
        "task": {"kind": "shift", "offset": [1.5, 1.0], "samples": 8, "size": 8},
    })
