"""Command-line interface: ``python -m vms_accel <command>``.

Commands: gen, predict, calibrate, tune, report, sim. Exit codes: 0 ok,
1 usage, 2 input validation, 3 infeasible.
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from .errors import EXIT_OK, UsageError, VmsError, exit_code_for
from .settings import RunConfig, load_run_config

logger = logging.getLogger(__name__)

ENGINES = ("reference", "blocked", "dataflow")
LOG_LEVEL_ENV = "VMS_ACCEL_LOG_LEVEL"
_LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage problems as UsageError instead of exiting."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def _configure_logging(level: Optional[str]) -> None:
    name = (level or os.environ.get(LOG_LEVEL_ENV) or "WARNING").upper()
    numeric = getattr(logging, name, None)
    if not isinstance(numeric, int):
        raise UsageError(f"unknown log level {level!r}")
    root = logging.getLogger()
    root.setLevel(numeric)
    if not any(getattr(h, "_vms_accel", False) for h in root.handlers):
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter(_LOG_FORMAT))
        handler._vms_accel = True  # type: ignore[attr-defined]
        root.addHandler(handler)


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"invalid {what} list {text!r}") from exc


def _parse_proteins(text: str, n_proteins: int) -> list[int]:
    if text == "all":
        return list(range(n_proteins))
    return _parse_int_list(text, "protein")


def _seed(args: argparse.Namespace, cfg: RunConfig) -> int:
    return cfg.seed if args.seed is None else args.seed


def _threads(args: argparse.Namespace, cfg: RunConfig) -> int:
    threads = cfg.threads if args.threads is None else args.threads
    if threads < 1:
        raise UsageError(f"--threads must be >= 1, got {threads}")
    return threads


def _load_widths(plan_path: Optional[str]):
    from .formats import read_plan
    from .perfmodel import OperandWidths

    if plan_path is None:
        return OperandWidths.uniform(16)
    return OperandWidths.from_plan(read_plan(plan_path))


def _config_workload(args: argparse.Namespace, cfg: RunConfig):
    from .formats import read_fingerprints, read_model
    from .perfmodel import Workload

    if getattr(args, "model", None) and getattr(args, "fingerprints", None):
        model = read_model(args.model)
        dims = model.dims
        fps = read_fingerprints(args.fingerprints, dims[2])
        return Workload.from_fingerprints(fps, dims)
    s, k, f, p = cfg.dims
    molecules = cfg.n_molecules if args.molecules is None else args.molecules
    return Workload(molecules, s, k, f, p, float(min(f, math.ceil(cfg.density * f))))


def cmd_gen(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .formats import write_fingerprints, write_model
    from .model import generate_synthetic

    s, k, f, p = cfg.dims
    model, fps = generate_synthetic(
        _seed(args, cfg),
        args.samples or s,
        args.latent or k,
        args.features or f,
        args.proteins or p,
        cfg.density if args.density is None else args.density,
        n_molecules=cfg.n_molecules if args.molecules is None else args.molecules,
    )
    write_model(args.out_model, model)
    write_fingerprints(args.out_fingerprints, fps)
    return EXIT_OK


def cmd_predict(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .formats import read_fingerprints, read_model, write_predictions, write_yaml
    from .model import ScreeningModel, screen

    if args.engine not in ENGINES:
        raise UsageError(f"unknown engine {args.engine!r}; choose from {', '.join(ENGINES)}")
    model = read_model(args.model)
    s, k, f, p = model.dims
    fps = read_fingerprints(args.fingerprints, f)
    proteins = _parse_proteins(args.proteins, p)
    threads = _threads(args, cfg)

    if isinstance(model, ScreeningModel):
        if args.engine != "reference":
            from .errors import InputValidationError

            raise InputValidationError(f"engine {args.engine} needs a quantized model; run calibrate first")
        preds = [pr for row in screen(model, fps, proteins, workers=threads) for pr in row]
    else:
        from .kernel import run_blocked, run_unblocked

        block = cfg.block.fit_to(len(fps), len(proteins), s, k)
        if args.engine == "reference":
            preds = run_unblocked(model, fps, proteins)
        elif args.engine == "blocked":
            preds = run_blocked(model, fps, block, proteins, workers=threads)
        else:
            from .dataflow import run_dataflow

            preds, report = run_dataflow(model, fps, cfg.pipeline, block, proteins)
            write_yaml(args.sim_report or f"{args.out}.sim.yaml", report.to_dict())
    write_predictions(args.out, preds)
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .formats import read_fingerprints, read_model, write_model, write_plan
    from .model import ScreeningModel
    from .quantize import quantize_model, refine_bitwidths

    model = read_model(args.model)
    if not isinstance(model, ScreeningModel):
        raise UsageError(f"{args.model} is already quantized; calibrate needs a float64 model")
    calib = read_fingerprints(args.calib, model.n_features)
    budget = cfg.budget if args.budget is None else args.budget
    widths = cfg.widths if args.widths is None else _parse_int_list(args.widths, "width")
    plan = refine_bitwidths(model, calib, budget, widths, seed=_seed(args, cfg))
    write_plan(args.out_plan, plan)
    if args.out_model:
        write_model(args.out_model, quantize_model(model, plan))
    print(f"plan: {', '.join(f'{t.value}={fmt}' for t, fmt in plan.formats.items())} rmse={plan.achieved_rmse:.3e}")
    return EXIT_OK


def cmd_tune(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .formats import write_yaml
    from .perfmodel import estimate_time, load_device, peak_performance
    from .tuner import autotune

    dev = load_device(args.device or cfg.device)
    widths = _load_widths(args.plan)
    w = _config_workload(args, cfg)
    chosen, est = autotune(w, dev, widths, cfg.search)
    s, k, _, p = w.dims
    block = cfg.block.fit_to(w.n_molecules, p, s, k)
    chosen = replace(chosen, block=block)

    doc = {
        "device": dev.name,
        "peak_gflops": peak_performance(dev),
        "workload": w.to_dict(),
        "search": {
            "max_unroll": cfg.search.max_unroll,
            "max_instances": cfg.search.max_instances,
            "max_compounds": cfg.search.max_compounds,
            "overlap": cfg.search.overlap,
        },
        "chosen": {"config": chosen.to_dict(), "estimate": est.to_dict()},
    }
    configured = replace(cfg.kernel, widths=widths, block=block)
    try:
        doc["configured"] = {
            "config": configured.to_dict(),
            "estimate": estimate_time(configured, w, dev, cfg.search.overlap).to_dict(),
        }
    except VmsError as exc:
        doc["configured"] = {"config": configured.to_dict(), "error": str(exc)}
    if args.out:
        write_yaml(args.out, doc)
    print(
        f"{dev.name}: {chosen.key()} -> {est.seconds:.6g} s, {est.achieved_gflops:.4g} GF/s "
        f"({est.pct_peak:.1f}% of peak, {est.limiting_factor.value}-bound)"
    )
    return EXIT_OK


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .formats import format_device_table_csv, format_device_table_text, format_ledger_csv
    from .perfmodel import DeviceKind, device_metrics, load_device, step_ledger

    if not args.device:
        raise UsageError("report needs at least one --device")
    overrides: dict[str, float] = {}
    for item in args.achieved or []:
        name, _, value = item.partition("=")
        try:
            overrides[name] = float(value)
        except ValueError as exc:
            raise UsageError(f"--achieved expects NAME=GF/s, got {item!r}") from exc
    devices = [load_device(d) for d in args.device]
    unknown = set(overrides) - {d.name for d in devices}
    if unknown:
        raise UsageError(f"--achieved names unknown devices: {', '.join(sorted(unknown))}")
    metrics = [device_metrics(d, overrides.get(d.name)) for d in devices]

    sys.stdout.write(format_device_table_text(metrics))
    if args.table_csv:
        Path(args.table_csv).write_text(format_device_table_csv(metrics), encoding="utf-8")

    if args.ledger_csv:
        if args.ledger_device:
            ledger_dev = load_device(args.ledger_device)
        else:
            fpgas = [d for d in devices if d.kind is DeviceKind.FPGA]
            if not fpgas:
                raise UsageError("no fpga device given; pass --ledger-device")
            ledger_dev = fpgas[0]
        ledger = step_ledger(_config_workload(args, cfg), ledger_dev, _load_widths(args.plan), cfg.search)
        Path(args.ledger_csv).write_text(format_ledger_csv(ledger), encoding="utf-8")
        print(
            f"ledger on {ledger_dev.name}: x{float(ledger.total_factor):.1f} "
            f"(reference x{ledger.reference_speedup}), DSP growth x{ledger.resource_growth:.1f} "
            f"(reference x{ledger.reference_resource_growth})"
        )
    return EXIT_OK


def cmd_sim(args: argparse.Namespace, cfg: RunConfig) -> int:
    from .dataflow import sim_pipeline
    from .formats import write_yaml

    items = cfg.n_molecules if args.items is None else args.items
    report = sim_pipeline(cfg.pipeline, items)
    if args.out:
        write_yaml(args.out, report.to_dict())
    print(f"{items} items: {report.total_cycles} cycles")
    for st in report.stages:
        print(f"  {st.name:<10} fires={st.fires} busy={st.busy} stalled={st.stalled} starved={st.starved}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vms_accel", description="Virtual molecule screening kernels and accelerator model")
    parser.add_argument("--seed", type=int, default=None, help="random seed (default from config)")
    parser.add_argument("--threads", type=int, default=None, help="worker threads (default from config)")
    parser.add_argument("--config", default=None, help="run configuration YAML")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="write a seeded synthetic model and fingerprints")
    gen.add_argument("--out-model", required=True)
    gen.add_argument("--out-fingerprints", required=True)
    gen.add_argument("--samples", type=int)
    gen.add_argument("--latent", type=int)
    gen.add_argument("--features", type=int)
    gen.add_argument("--proteins", type=int)
    gen.add_argument("--density", type=float)
    gen.add_argument("--molecules", type=int)
    gen.set_defaults(handler=cmd_gen)

    pred = sub.add_parser("predict", help="score molecules against proteins")
    pred.add_argument("--model", required=True)
    pred.add_argument("--fingerprints", required=True)
    pred.add_argument("--proteins", default="all", help="'all' or comma-separated indices")
    pred.add_argument("--out", required=True)
    pred.add_argument("--engine", default="reference", help="reference, blocked or dataflow")
    pred.add_argument("--sim-report", default=None, help="dataflow timing report (default <out>.sim.yaml)")
    pred.set_defaults(handler=cmd_predict)

    cal = sub.add_parser("calibrate", help="choose fixed-point formats under an RMSE budget")
    cal.add_argument("--model", required=True)
    cal.add_argument("--calib", required=True, help="calibration fingerprints")
    cal.add_argument("--budget", type=float)
    cal.add_argument("--widths", help="candidate widths, widest first, e.g. 16,8")
    cal.add_argument("--out-plan", required=True)
    cal.add_argument("--out-model", help="also write the quantized model")
    cal.set_defaults(handler=cmd_calibrate)

    tune = sub.add_parser("tune", help="search kernel dimensions for a device")
    tune.add_argument("--device", help="bundled device name or descriptor path")
    tune.add_argument("--plan", help="quantization plan (default: 16-bit operands)")
    tune.add_argument("--model", help="take dimensions from this model")
    tune.add_argument("--fingerprints", help="take molecules and nnz from this file (with --model)")
    tune.add_argument("--molecules", type=int)
    tune.add_argument("--out", help="YAML report path")
    tune.set_defaults(handler=cmd_tune)

    rep = sub.add_parser("report", help="device comparison table and optimization-step ledger")
    rep.add_argument("--device", action="append", default=[], help="bundled name or path; repeatable")
    rep.add_argument("--achieved", action="append", help="NAME=GF/s override; repeatable")
    rep.add_argument("--table-csv")
    rep.add_argument("--ledger-csv")
    rep.add_argument("--ledger-device")
    rep.add_argument("--plan", help="quantization plan for the ledger (default: 16-bit operands)")
    rep.add_argument("--molecules", type=int)
    rep.set_defaults(handler=cmd_report)

    sim = sub.add_parser("sim", help="simulate the configured pipeline")
    sim.add_argument("--items", type=int)
    sim.add_argument("--out", help="YAML report path")
    sim.set_defaults(handler=cmd_sim)
    return parser


def _cli(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.log_level)
        cfg = load_run_config(args.config)
        return args.handler(args, cfg)
    except (VmsError, OSError) as exc:
        code = exit_code_for(exc)
        logger.error(f"{exc}")
        return code


def main() -> None:  # pragma: no cover - simple wrapper
    sys.exit(_cli())


if __name__ == "__main__":  # pragma: no cover - CLI entry
    main()
