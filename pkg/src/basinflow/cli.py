"""Command-line entry point.

Subcommands: generate, pretrain, train, predict, evaluate, ablate. Exit
codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import NumericError, substream
from .data import DataError, generate_synthetic_basin, ingest
from .encoder import pretrain
from .geo import GraphError
from .metrics import MetricsError, emit_report, evaluate_forecasts
from .model import InflowModel
from .pipeline import (
    PipelineError,
    _active_masks,
    export_training_artifacts,
    load_checkpoint,
    predict,
    prepare_dataset,
    run_ablation_suite,
    save_checkpoint,
    train,
    write_ablation_table,
)

log = logging.getLogger("basinflow")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser():
    parser = _Parser(prog="basinflow", description="Multi-reservoir inflow forecasting")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="config file (key-value text with dotted sections)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--out-dir", default="out", help="output directory")
        if data:
            p.add_argument("--data-dir", required=True, help="basin directory with metadata.csv and per-reservoir CSVs")

    common(sub.add_parser("generate", help="emit a synthetic basin"), data=False)
    common(sub.add_parser("pretrain", help="pretrain the feature encoder"))
    p_train = sub.add_parser("train", help="train the full model")
    common(p_train)
    p_pred = sub.add_parser("predict", help="forecast the test windows from a checkpoint")
    common(p_pred)
    p_pred.add_argument("--checkpoint", required=True)
    p_eval = sub.add_parser("evaluate", help="score a forecast CSV against observations")
    common(p_eval)
    p_eval.add_argument("--forecasts", required=True, help="forecast CSV from the predict subcommand")
    common(sub.add_parser("ablate", help="run the ablation comparison"))
    return parser


def _resolve(args):
    resolved = cfgmod.resolve(args.config, args.set)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfgmod.write_resolved(resolved, out_dir)
    return resolved, out_dir


def cmd_generate(args):
    resolved, out_dir = _resolve(args)
    generate_synthetic_basin(
        n_reservoirs=resolved["generate.n_reservoirs"],
        n_days=resolved["generate.n_days"],
        seed=resolved["run.seed"],
        out_dir=out_dir / "data",
        T=resolved["data.history_days"],
        H=resolved["data.horizon"],
        lag_days=resolved["generate.lag_days"],
        attenuation=resolved["generate.attenuation"],
        local_share=resolved["generate.local_share"],
    )
    print(f"synthetic basin written to {out_dir / 'data'}")
    return EXIT_OK


def cmd_pretrain(args):
    resolved, out_dir = _resolve(args)
    model_cfg = cfgmod.model_config(resolved)
    pre_cfg = cfgmod.pretrain_config(resolved)
    metas, panel, sets, stats = prepare_dataset(
        args.data_dir,
        model_cfg.history_days,
        model_cfg.horizon,
        splits=cfgmod.splits(resolved),
        gap_limit_days=resolved["data.gap_limit_days"],
    )
    from .data import pretrain_windows

    model = InflowModel(model_cfg, substream(resolved["run.seed"], "train.init"))
    windows = pretrain_windows(panel, stats, model_cfg.history_days, model_cfg.horizon)
    history = pretrain(windows, model.encoder, model_cfg.horizon, pre_cfg)
    path = save_checkpoint(out_dir / "encoder.ckpt", model, cfgmod.train_config(resolved), [], stats, 0)
    print(f"pretraining losses: {[round(h, 4) for h in history]}")
    print(f"encoder checkpoint written to {path}")
    return EXIT_OK


def cmd_train(args):
    resolved, out_dir = _resolve(args)
    model_cfg = cfgmod.model_config(resolved)
    train_cfg = cfgmod.train_config(resolved)
    pre_cfg = cfgmod.pretrain_config(resolved)
    metas, panel, sets, stats = prepare_dataset(
        args.data_dir,
        model_cfg.history_days,
        model_cfg.horizon,
        splits=cfgmod.splits(resolved),
        gap_limit_days=resolved["data.gap_limit_days"],
        stride=resolved["data.stride"],
    )
    result = train(sets, stats, metas, model_cfg, train_cfg, pre_cfg=pre_cfg, panel=panel)
    save_checkpoint(
        out_dir / "model.ckpt", result.model, train_cfg, result.graphs, stats,
        epoch=len(result.log_rows), optimizer=result.optimizer,
    )
    export_training_artifacts(result, out_dir)
    if result.diverged:
        print("training diverged; last-good checkpoint written", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"checkpoint and metrics written to {out_dir}")
    return EXIT_OK


def cmd_predict(args):
    resolved, out_dir = _resolve(args)
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    stats = ckpt.scaling()
    graphs = ckpt.graphs()
    tc = ckpt.train_config()
    masks = _active_masks(graphs, tc.no_graph if tc else False) if graphs else None
    model_cfg = model.cfg
    metas, panel, sets, _ = prepare_dataset(
        args.data_dir,
        model_cfg.history_days,
        model_cfg.horizon,
        splits=cfgmod.splits(resolved),
        gap_limit_days=resolved["data.gap_limit_days"],
    )
    test = sets["test"]
    forecasts = predict(model, masks, stats, test.history)
    path = out_dir / "forecasts.csv"
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["reservoir", "lead_day", "date", "inflow_cfs"])
        for w, start in enumerate(test.start_dates):
            for i, rid in enumerate(stats.node_ids):
                for k in range(model_cfg.horizon):
                    date = (start + np.timedelta64(model_cfg.history_days + k, "D")).strftime("%Y-%m-%d")
                    writer.writerow([rid, k + 1, date, f"{forecasts[w, i, k]:.3f}"])
    print(f"forecasts written to {path}")
    return EXIT_OK


def cmd_evaluate(args):
    resolved, out_dir = _resolve(args)
    from .data import discover_basin

    metas, paths = discover_basin(args.data_dir)
    panel = ingest(paths, gap_limit_days=resolved["data.gap_limit_days"])
    obs_frames = panel.frames

    series = {}
    with open(args.forecasts, newline="") as fh:
        for row in csv.DictReader(fh):
            key = (row["reservoir"], int(row["lead_day"]))
            series.setdefault(key, []).append((row["date"], float(row["inflow_cfs"])))
    if not series:
        raise DataError(f"no forecasts in {args.forecasts}")

    node_ids = sorted({rid for rid, _ in series})
    horizon = max(k for _, k in series)
    n_windows = min(len(v) for v in series.values())
    pred = np.zeros((n_windows, len(node_ids), horizon))
    obs = np.zeros_like(pred)
    for (rid, k), vals in series.items():
        i = node_ids.index(rid)
        for w, (date, value) in enumerate(sorted(vals)[:n_windows]):
            pred[w, i, k - 1] = value
            obs[w, i, k - 1] = float(obs_frames[rid].loc[date, "inflow_cfs"])
    report = evaluate_forecasts(pred, obs, node_ids)
    report.seed = resolved["run.seed"]
    report.config_hash = cfgmod.config_hash(resolved)
    emit_report(report, out_dir)
    print(f"overall NSE: {report.overall_nse:.4f}; report written to {out_dir}")
    return EXIT_OK


def cmd_ablate(args):
    resolved, out_dir = _resolve(args)
    model_cfg = cfgmod.model_config(resolved)
    train_cfg = cfgmod.train_config(resolved)
    pre_cfg = cfgmod.pretrain_config(resolved)
    seeds = [int(s) for s in str(resolved["ablate.seeds"]).split(",") if s.strip() != ""]
    rows = run_ablation_suite(args.data_dir, model_cfg, train_cfg, pre_cfg, seeds=seeds)
    path = out_dir / "ablation.csv"
    write_ablation_table(path, rows)
    print(f"ablation table written to {path}")
    return EXIT_OK


COMMANDS = {
    "generate": cmd_generate,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except cfgmod.ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, GraphError, MetricsError, PipelineError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
