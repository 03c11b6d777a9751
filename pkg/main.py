# =========================
# main.py: CLI
# (gradcheck, equivcheck, count, train, export-positions, lower)
# =========================
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional

from pydantic import ValidationError

from accounting import cost_csv, cost_table, network_costs
from config import ACU_LOG_LEVEL, configure_logging, logger
from equivalence import extrapolate_weights, sparsity_csv, sparsity_report
from errors import AcuError, InvalidArgumentError, TrainingDivergedError
from manifests import (
    dump_json,
    histogram_csv,
    load_experiment,
    load_manifest,
    load_snapshot,
    position_histogram,
    position_rows,
    positions_csv,
    save_snapshot,
)
from network import ToyNetwork
from tensor_core import write_tensor
from training import loss_csv, train, trajectory_csv
from verify import equivalence_check, reports_csv, reports_table, run_gradient_suite

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_USAGE = 2


def _emit(text: str, path: Optional[str]) -> None:
    """Escribe a archivo si hay path; si no, a stdout."""
    if path:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text, encoding="utf-8")
        logger.info(f"escrito {path}")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_network(args) -> ToyNetwork:
    if args.snapshot:
        return load_snapshot(args.snapshot, threads=args.threads)
    if args.manifest:
        return load_manifest(args.manifest, seed=args.seed, threads=args.threads)
    raise InvalidArgumentError("hace falta --manifest o --snapshot")


# =========================
# Subcomandos
# =========================

def cmd_gradcheck(args) -> int:
    reports = run_gradient_suite(args.seed, args.trials, threads=args.threads)
    if args.csv:
        _emit(reports_csv(reports), args.csv)
    print(reports_table(reports))
    failed = [r for r in reports if not r.passed]
    if failed:
        print(f"⚠️ {len(failed)}/{len(reports)} chequeos fallaron")
        return EXIT_FAIL
    print(f"✅ {len(reports)} chequeos de gradiente OK")
    return EXIT_OK


def cmd_equivcheck(args) -> int:
    report = equivalence_check(args.seed, args.layers, threads=args.threads)
    print(f"capas:              {report.layers}")
    print(f"max |ACU - conv|:   {report.max_diff:.3e}")
    print(f"max error de masa:  {report.max_mass_error:.3e}")
    print(f"max nonzeros / K:   {report.max_nonzeros_ratio:.3f}")
    if not report.passed:
        print("⚠️ equivalencia FAIL")
        return EXIT_FAIL
    print("✅ equivalencia OK")
    return EXIT_OK


def cmd_count(args) -> int:
    network = _load_network(args)
    rows = network_costs(network)
    if network.input_shape is None:
        logger.warning("⚠️ el manifiesto no declara 'input': MAdds en 0")
    if args.csv:
        _emit(cost_csv(rows), args.csv)
    else:
        print(cost_table(rows))
    return EXIT_OK


def cmd_train(args) -> int:
    network, dataset, cfg = load_experiment(args.config, seed=args.seed, threads=args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = train(network, dataset, cfg)
    except TrainingDivergedError as e:
        network.restore(e.snapshot)
        save_snapshot(network, out / "snapshot")
        logger.error(f"❌ {e}; se guardó el último snapshot bueno")
        return EXIT_FAIL
    (out / "loss.csv").write_text(loss_csv(result.loss_trace), encoding="utf-8")
    (out / "trajectory.csv").write_text(trajectory_csv(result.position_trace), encoding="utf-8")
    save_snapshot(network, out / "snapshot")
    if result.loss_trace:
        last = result.loss_trace[-1]
        print(f"✅ {len(result.loss_trace)} iteraciones, loss final {last[1]:.6g}")
    return EXIT_OK


def cmd_export_positions(args) -> int:
    network = load_snapshot(args.snapshot, threads=args.threads)
    rows = position_rows(network)
    _emit(positions_csv(rows), args.out)
    if args.histogram:
        edges, counts = position_histogram(rows, bin_width=args.bin_width)
        _emit(histogram_csv(edges, counts), args.histogram)
    return EXIT_OK


def cmd_lower(args) -> int:
    network = _load_network(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    layers = []
    sparsity = []
    for m in network.acu_modules():
        kernel = extrapolate_weights(m.layer)
        report = sparsity_report(kernel)
        write_tensor(out / f"{m.name}.kernel.tns", kernel.weights)
        write_tensor(out / f"{m.name}.bias.tns", m.layer.bias.reshape(1, -1, 1, 1))
        geo = m.layer.geometry
        layers.append({
            "name": m.name,
            "kernel": f"{m.name}.kernel.tns",
            "bias": f"{m.name}.bias.tns",
            "origin": list(kernel.origin),
            "extent": list(kernel.extent),
            "symmetric_radius": list(kernel.symmetric_radius),
            "in_channels": geo.in_channels,
            "out_channels": geo.out_channels,
            "groups": geo.groups,
            "stride": list(geo.stride),
            "padding": list(geo.padding),
            "nonzeros": report.nonzeros,
            "density": report.density,
        })
        sparsity.append((m.name, report))
        if not report.within_empirical_extent:
            logger.warning(f"⚠️ {m.name}: kernel {report.extent} más grande de lo habitual")
    dump_json(out / "lowered.json", {"network": network.name, "layers": layers})
    (out / "sparsity.csv").write_text(sparsity_csv(sparsity), encoding="utf-8")
    print(f"✅ {len(layers)} capas ACU bajadas a {out}")
    return EXIT_OK


# =========================
# Parser
# =========================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acu", description="Active Convolution Unit: verificación, conteo y entrenamiento")
    parser.add_argument("--threads", type=int, default=None, help="hilos por capa (default ACU_THREADS)")
    parser.add_argument("--log-level", default=ACU_LOG_LEVEL, help="DEBUG muestra los timers [PERF]")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", help="gradientes analíticos vs diferencias finitas")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trials", type=int, default=3)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("equivcheck", help="ACU vs convolución con peso extrapolado")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--layers", type=int, default=100)
    p.set_defaults(func=cmd_equivcheck)

    p = sub.add_parser("count", help="parámetros y MAdds por capa")
    p.add_argument("--manifest", default=None)
    p.add_argument("--snapshot", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--csv", default=None)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("train", help="entrena una red de juguete desde un config JSON")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("export-positions", help="posiciones aprendidas a CSV")
    p.add_argument("--snapshot", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--histogram", default=None)
    p.add_argument("--bin-width", type=float, default=1.0)
    p.set_defaults(func=cmd_export_positions)

    p = sub.add_parser("lower", help="baja cada ACU a una convolución densa equivalente")
    p.add_argument("--manifest", default=None)
    p.add_argument("--snapshot", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_lower)
    return parser


def cli(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code else EXIT_OK
    configure_logging(args.log_level)
    if args.threads is not None and args.threads < 1:
        logger.error("❌ --threads debe ser >= 1")
        return EXIT_USAGE
    try:
        return args.func(args)
    except (AcuError, ValidationError, OSError) as e:
        logger.error(f"❌ {args.command}: {e}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(cli(sys.argv[1:]))
