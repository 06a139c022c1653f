"""Training and inference orchestration.

Mini-batch Adam on the horizon MSE, with attention-ledger pruning interleaved
every ``prune_every`` epochs, per-epoch metrics logging, checkpointing, and
the ablation suite (no-graph / static-graph / no-pretrain arms).
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, NumericError, Tensor, backward, substream, zero_grads
from .data import DataError, WindowSet, discover_basin, ingest, pretrain_windows, scale_and_window
from .encoder import PretrainConfig, pretrain
from .gat import AttentionLedger, export_attention_map, export_edge_summary, prune_step, prune_step_per_day
from .geo import TemporalGraph, build_graph
from .metrics import evaluate_forecasts
from .model import InflowModel, ModelConfig

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"BFCKPT01"
CHECKPOINT_VERSION = 1


class PipelineError(Exception):
    pass


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 4
    lr: float = 1e-3
    lr_decay: float = 0.5
    prune_every: int = 4
    tau_prune: float = 0.3
    k_neighbors: int = 2
    seed: int = 0
    no_graph: bool = False
    static_graph: bool = False
    no_pretrain: bool = False
    per_day_prune: bool = False
    init_from: str = ""

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.prune_every < 1:
            raise PipelineError("invalid training configuration")


def training_loss(pred, target):
    """Horizon MSE, (1/NH) sum of squared errors, averaged over the batch."""
    target = np.asarray(target)
    if not np.all(np.isfinite(target)):
        raise NumericError("non-finite training targets")
    pred_t = pred if isinstance(pred, Tensor) else Tensor(pred)
    if target.ndim == 2:
        target = target[None]
    if pred_t.shape != target.shape:
        raise ad.ShapeError(f"prediction {pred_t.shape} vs target {target.shape}")
    err = pred_t - Tensor(target)
    return ad.tensor_mean(err * err)


def learning_rate(base_lr, decay, epoch):
    return base_lr * (decay**epoch)


@dataclass
class TrainResult:
    model: InflowModel
    optimizer: Adam
    graphs: list  # one graph (global mode) or T graphs (per-day mode)
    ledger: AttentionLedger
    stats: object
    metas: list
    log_rows: list  # (epoch, lr, train_mse, val_mse, active_edges)
    attention_rows: list  # (epoch, day, src, dst, alpha_bar)
    diverged: bool = False


def _active_masks(graphs, no_graph):
    if no_graph:
        return None
    if len(graphs) == 1:
        return graphs[0].adjacency()
    return np.stack([g.adjacency() for g in graphs])


def _snapshot_params(params):
    return {k: p.data.copy() for k, p in params.items()}


def _restore_params(params, snap):
    for k, p in params.items():
        p.data = snap[k].copy()


def train(
    sets: dict,
    stats,
    metas,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    pre_cfg: PretrainConfig = None,
    panel=None,
    model: InflowModel = None,
) -> TrainResult:
    """Run the full training loop; returns the trained model and artifacts.

    ``sets`` holds 'train'/'val'/'test' WindowSets in scaled units. If a
    ``panel`` is given and pretraining is enabled, the encoder is warm-started
    on per-reservoir windows first. Pass ``model`` to skip initialization
    (used by tests that need a specific starting point).
    """
    rng_init = substream(cfg.seed, "train.init")
    rng_shuffle = substream(cfg.seed, "train.shuffle")
    rng_dropout = substream(cfg.seed, "train.dropout")

    if model is None:
        model = InflowModel(model_cfg, rng_init)

    if cfg.init_from:
        warm_start(model, cfg.init_from)
    elif not cfg.no_pretrain and panel is not None and pre_cfg is not None and pre_cfg.epochs > 0:
        windows = pretrain_windows(panel, stats, model_cfg.history_days, model_cfg.horizon)
        history = pretrain(windows, model.encoder, model_cfg.horizon, pre_cfg)
        log.info("pretraining loss history: %s", [round(h, 4) for h in history])

    base_graph = build_graph(metas, cfg.k_neighbors)
    if cfg.per_day_prune and not cfg.no_graph:
        graphs = [base_graph.copy() for _ in range(model_cfg.history_days)]
        ledger = AttentionLedger(base_graph.non_self_edges(), n_days=model_cfg.history_days)
    else:
        graphs = [base_graph]
        ledger = AttentionLedger(base_graph.non_self_edges())

    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    train_set: WindowSet = sets["train"]
    val_set: WindowSet = sets.get("val")
    n_train = len(train_set)
    if n_train == 0:
        raise PipelineError("empty training split")

    log_rows = []
    attention_rows = []
    edge_names = [
        (base_graph.node_ids[i], base_graph.node_ids[j]) for i, j in ledger.edges
    ]
    last_good = _snapshot_params(params)
    diverged = False

    for epoch in range(cfg.epochs):
        opt.lr = learning_rate(cfg.lr, cfg.lr_decay, epoch)
        order = rng_shuffle.permutation(n_train)
        masks = _active_masks(graphs, cfg.no_graph)
        epoch_losses = []
        # per-epoch, per-day attention accumulation for the export
        day_sums = np.zeros((model_cfg.history_days, len(ledger.edges)))
        day_counts = 0

        try:
            for lo in range(0, n_train, cfg.batch_size):
                batch = order[lo : lo + cfg.batch_size]
                hist = train_set.history[batch]
                targ = train_set.targets[batch]
                pred, condensed, _ = model.forward_full(
                    hist, adjacency=masks, training=True, rng=rng_dropout
                )
                loss = training_loss(pred, targ)
                zero_grads(params)
                backward(loss)
                opt.step()
                epoch_losses.append(float(loss.data))
                if condensed is not None:
                    ledger.update(condensed)
                    for k, (i, j) in enumerate(ledger.edges):
                        day_sums[:, k] += condensed[:, :, i, j].sum(axis=0)
                    day_counts += condensed.shape[0]
        except NumericError as err:
            log.error("training diverged at epoch %d: %s; restoring last-good parameters", epoch, err)
            _restore_params(params, last_good)
            diverged = True
            break

        train_mse = float(np.mean(epoch_losses))
        val_mse = float("nan")
        if val_set is not None and len(val_set):
            val_mse = evaluate_mse(model, val_set, masks)
        active = graphs[0].active_non_self_count() if not cfg.no_graph else 0
        log_rows.append((epoch, opt.lr, train_mse, val_mse, active))
        last_good = _snapshot_params(params)

        if day_counts and not cfg.no_graph:
            mean_by_day = day_sums / day_counts
            for t in range(model_cfg.history_days):
                for k, (src, dst) in enumerate(edge_names):
                    attention_rows.append((epoch, t, src, dst, round(float(mean_by_day[t, k]), 6)))

        completed = epoch + 1
        if (
            completed % cfg.prune_every == 0
            and not cfg.no_graph
            and not cfg.static_graph
        ):
            if cfg.per_day_prune:
                graphs, removed = prune_step_per_day(ledger, graphs, cfg.tau_prune, epoch=completed)
                n_removed = sum(len(r) for r in removed)
            else:
                new_graph, removed = prune_step(ledger, graphs[0], cfg.tau_prune, epoch=completed)
                graphs = [new_graph]
                n_removed = len(removed)
            if n_removed:
                log.info("epoch %d: pruned %d edges", completed, n_removed)

    return TrainResult(
        model=model,
        optimizer=opt,
        graphs=graphs,
        ledger=ledger,
        stats=stats,
        metas=metas,
        log_rows=log_rows,
        attention_rows=attention_rows,
        diverged=diverged,
    )


def evaluate_mse(model, window_set: WindowSet, masks, batch_size=16):
    """Scaled-unit MSE over a window set, evaluation mode (graph frozen, no dropout)."""
    losses = []
    with ad.no_grad():
        for lo in range(0, len(window_set), batch_size):
            hist = window_set.history[lo : lo + batch_size]
            targ = window_set.targets[lo : lo + batch_size]
            pred, _, _ = model.forward_full(hist, adjacency=masks, training=False)
            losses.append(float(np.mean((pred.data - targ) ** 2)) * len(hist))
    return float(np.sum(losses) / len(window_set))


def predict(model, masks, stats, history, batch_size=16):
    """Evaluation-mode forecasts in physical units (cfs), (windows, N, H)."""
    history = np.asarray(history)
    if history.ndim == 3:
        history = history[None]
    if stats is None:
        raise PipelineError("scaling statistics are required for physical-unit predictions")
    outs = []
    with ad.no_grad():
        for lo in range(0, len(history), batch_size):
            pred, _, _ = model.forward_full(history[lo : lo + batch_size], adjacency=masks, training=False)
            outs.append(pred.data)
    scaled = np.concatenate(outs)
    return stats.inverse_inflow(scaled)


def write_metrics_log(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("epoch,lr,train_mse,val_mse,active_edges\n")
        for epoch, lr, train_mse, val_mse, active in rows:
            fh.write(f"{epoch},{lr:.10g},{train_mse:.8f},{val_mse:.8f},{active}\n")


# ---------------------------------------------------------------------------
# checkpoint container: JSON manifest + raw little-endian float32 payload


def _rng_state(seed):
    # the training streams are reconstructed from the seed; record it plus the
    # stream names for self-description
    return {"seed": seed, "streams": ["train.init", "train.shuffle", "train.dropout"]}


def save_checkpoint(path, model: InflowModel, cfg: TrainConfig, graphs, stats, epoch, optimizer: Adam = None):
    tensors = {k: p.data for k, p in model.parameters().items()}
    if optimizer is not None:
        tensors.update(optimizer.state_arrays())

    entries = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f4")
        entries.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": "float32",
                "offset": len(payload),
                "nbytes": arr.nbytes,
            }
        )
        payload.extend(arr.tobytes())

    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": epoch,
        "model_config": asdict(model.cfg),
        "train_config": asdict(cfg) if cfg is not None else None,
        "rng": _rng_state(cfg.seed if cfg is not None else 0),
        "graphs": [
            {
                "node_ids": g.node_ids,
                "edges": [list(e) for e in g.edges],
                "prune_mask": [bool(v) for v in g.prune_mask],
            }
            for g in (graphs or [])
        ],
        "scaling": None
        if stats is None
        else {
            "node_ids": stats.node_ids,
            "mean": stats.mean.tolist(),
            "std": stats.std.tolist(),
        },
        "tensors": entries,
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))
    return path


@dataclass
class Checkpoint:
    manifest: dict
    arrays: dict

    @property
    def epoch(self):
        return self.manifest["epoch"]

    def model_config(self):
        return ModelConfig(**self.manifest["model_config"])

    def train_config(self):
        tc = self.manifest["train_config"]
        return TrainConfig(**tc) if tc else None

    def graphs(self):
        out = []
        for g in self.manifest["graphs"]:
            out.append(
                TemporalGraph(
                    node_ids=list(g["node_ids"]),
                    edges=[tuple(e) for e in g["edges"]],
                    prune_mask=np.asarray(g["prune_mask"], dtype=bool),
                )
            )
        return out

    def scaling(self):
        from .data import ScalingStats

        s = self.manifest["scaling"]
        if s is None:
            return None
        return ScalingStats(
            node_ids=list(s["node_ids"]),
            mean=np.asarray(s["mean"]),
            std=np.asarray(s["std"]),
        )

    def build_model(self):
        model = InflowModel(self.model_config(), substream(0, "checkpoint.init"))
        params = model.parameters()
        for name, p in params.items():
            if name not in self.arrays:
                raise PipelineError(f"checkpoint is missing tensor '{name}'")
            arr = self.arrays[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise PipelineError(
                    f"checkpoint tensor '{name}' has shape {arr.shape}, expected {p.data.shape}"
                )
            p.data = arr.astype(ad.default_dtype())
        return model


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise PipelineError(f"{path} is not a checkpoint file")
        (blob_len,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()
    if manifest["format_version"] != CHECKPOINT_VERSION:
        raise PipelineError(f"unsupported checkpoint version {manifest['format_version']}")
    arrays = {}
    for entry in manifest["tensors"]:
        off, nbytes = entry["offset"], entry["nbytes"]
        arr = np.frombuffer(payload[off : off + nbytes], dtype="<f4").reshape(entry["shape"])
        arrays[entry["name"]] = arr
    return Checkpoint(manifest=manifest, arrays=arrays)


def warm_start(model: InflowModel, checkpoint_path):
    """Copy encoder tensors from a checkpoint (pretraining hand-off)."""
    ckpt = load_checkpoint(checkpoint_path)
    copied = 0
    for name, p in model.parameters().items():
        if name.startswith("encoder.") and name in ckpt.arrays:
            arr = ckpt.arrays[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise PipelineError(f"warm-start shape mismatch for '{name}'")
            p.data = arr.astype(ad.default_dtype())
            copied += 1
    if copied == 0:
        raise PipelineError(f"no encoder tensors found in {checkpoint_path}")
    return copied


# ---------------------------------------------------------------------------
# dataset preparation and the ablation suite


def prepare_dataset(data_dir, T, H, splits=(0.7, 0.15, 0.15), gap_limit_days=10, stride=1):
    metas, paths = discover_basin(data_dir)
    panel = ingest(paths, gap_limit_days=gap_limit_days)
    metas = [m for m in metas if m.id in panel.frames]
    if len(metas) < 1:
        raise DataError("no reservoirs available after ingestion")
    sets, stats = scale_and_window(panel, splits=splits, T=T, H=H, stride=stride)
    return metas, panel, sets, stats


ABLATION_ARMS = ("full", "no_graph", "static_graph", "no_pretrain")


def run_ablation_suite(
    data_dir,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    pre_cfg: PretrainConfig,
    seeds=(0, 1, 2),
    arms=ABLATION_ARMS,
):
    """Train every ablation arm on identical splits per seed; score on the test split.

    Returns a list of row dicts: arm, seed, overall NSE, per-day NSE.
    """
    metas, panel, sets, stats = prepare_dataset(
        data_dir, model_cfg.history_days, model_cfg.horizon
    )
    rows = []
    for seed in seeds:
        for arm in arms:
            arm_cfg = TrainConfig(**{**asdict(cfg), "seed": seed})
            if arm == "no_graph":
                arm_cfg.no_graph = True
            elif arm == "static_graph":
                arm_cfg.static_graph = True
            elif arm == "no_pretrain":
                arm_cfg.no_pretrain = True
            arm_pre = PretrainConfig(**{**asdict(pre_cfg), "seed": seed})
            result = train(sets, stats, metas, model_cfg, arm_cfg, pre_cfg=arm_pre, panel=panel)
            masks = _active_masks(result.graphs, arm_cfg.no_graph)
            test = sets["test"]
            pred = predict(result.model, masks, stats, test.history)
            obs = stats.inverse_inflow(test.targets)
            report = evaluate_forecasts(pred, obs, stats.node_ids)
            rows.append(
                {
                    "arm": arm,
                    "seed": seed,
                    "overall_nse": report.overall_nse,
                    "per_day_nse": [float(v) for v in report.per_day_nse],
                }
            )
            log.info("ablation arm=%s seed=%d overall NSE=%.4f", arm, seed, report.overall_nse)
    return rows


def write_ablation_table(path, rows):
    with open(path, "w", newline="") as fh:
        horizon = len(rows[0]["per_day_nse"]) if rows else 0
        header = ["arm", "seed", "overall_nse"] + [f"day{k+1}_nse" for k in range(horizon)]
        fh.write(",".join(header) + "\n")
        for r in rows:
            vals = [r["arm"], str(r["seed"]), f"{r['overall_nse']:.6f}"]
            vals += [f"{v:.6f}" for v in r["per_day_nse"]]
            fh.write(",".join(vals) + "\n")


def export_training_artifacts(result: TrainResult, out_dir):
    """Metrics log, attention map, and final edge summary for a finished run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_log(out_dir / "metrics.csv", result.log_rows)
    export_attention_map(out_dir / "attention_map.csv", result.attention_rows)
    export_edge_summary(out_dir / "edges_summary.csv", result.graphs[0], result.ledger)
    from .geo import write_edge_list

    write_edge_list(result.graphs[0], out_dir / "edges_final.csv")
