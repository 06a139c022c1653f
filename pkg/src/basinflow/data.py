"""Reservoir record ingestion, scaling/windowing, and synthetic basins.

Input CSVs are one-per-reservoir with schema ``date,inflow_cfs,precip_mm,temp_c``.
Ingestion regularizes each series to daily frequency, linearly fills short
gaps, rejects reservoirs with gaps over the limit, and trims everything to
the common overlapping date range. The synthetic generator plants an
upstream-to-downstream routing chain with shared regional weather so that
cross-reservoir information is genuinely predictive.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from .autodiff import substream
from .geo import ReservoirMeta, write_metadata

log = logging.getLogger(__name__)

FEATURES = ["inflow_cfs", "precip_mm", "temp_c"]
# channel names accepted by augmentation
CHANNEL_INDEX = {"inflow": 0, "precipitation": 1, "temperature": 2}


class DataError(Exception):
    pass


@dataclass
class RecordPanel:
    """Aligned daily feature frames plus the pre-alignment per-reservoir series."""

    frames: dict  # id -> DataFrame on the common daily range, columns FEATURES
    raw_frames: dict  # id -> full regularized series (for pretraining)
    rejected: dict  # id -> reason

    @property
    def node_ids(self):
        return list(self.frames.keys())

    def feature_array(self):
        """(days, N, F) array over the aligned range."""
        ids = self.node_ids
        return np.stack([self.frames[i][FEATURES].to_numpy(dtype=np.float64) for i in ids], axis=1)

    def dates(self):
        first = next(iter(self.frames.values()))
        return first.index


@dataclass
class ScalingStats:
    """Train-split z-score statistics, per reservoir per feature."""

    node_ids: list
    mean: np.ndarray  # (N, F)
    std: np.ndarray  # (N, F)

    def scale(self, x):
        return (x - self.mean) / self.std

    def inverse(self, x):
        return x * self.std + self.mean

    def inverse_inflow(self, y):
        """Map scaled inflow (..., N, H) back to cfs; broadcasting over horizon."""
        return y * self.std[:, 0][:, None] + self.mean[:, 0][:, None]


@dataclass
class WindowSet:
    history: np.ndarray  # (n, T, N, F) scaled
    targets: np.ndarray  # (n, N, H) scaled inflow
    start_dates: list

    def __len__(self):
        return self.history.shape[0]


def _max_gap_run(series):
    """Longest run of consecutive NaNs strictly inside the series."""
    isna = series.isna().to_numpy()
    best = run = 0
    for v in isna:
        run = run + 1 if v else 0
        best = max(best, run)
    return best


def _load_one(path):
    df = pd.read_csv(path, parse_dates=["date"])
    missing = [c for c in ["date", *FEATURES] if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")
    extra = [c for c in df.columns if c not in ["date", *FEATURES]]
    if extra:
        log.warning("%s: ignoring extra columns %s", path, extra)
    df = df.sort_values("date").set_index("date")[FEATURES]
    if df.index.has_duplicates:
        raise DataError(f"{path}: duplicate dates")
    return df.asfreq("D")


def ingest(csv_paths: dict, gap_limit_days: int = 10) -> RecordPanel:
    """Load, regularize, gap-fill, and align reservoir records.

    ``csv_paths`` maps reservoir id to CSV path. Reservoirs whose longest
    internal gap exceeds ``gap_limit_days`` are rejected with a diagnostic.
    """
    raw = {}
    rejected = {}
    for rid, path in csv_paths.items():
        df = _load_one(path)
        df = df.loc[df.first_valid_index() : df.last_valid_index()]
        worst = max(_max_gap_run(df[c]) for c in FEATURES)
        if worst > gap_limit_days:
            rejected[rid] = f"gap of {worst} days exceeds limit of {gap_limit_days}"
            log.warning("rejecting reservoir %s: %s", rid, rejected[rid])
            continue
        raw[rid] = df.interpolate(method="linear", limit_area="inside")

    if not raw:
        raise DataError(f"no reservoirs survived ingestion; rejected: {rejected}")

    start = max(df.index[0] for df in raw.values())
    end = min(df.index[-1] for df in raw.values())
    if start > end:
        raise DataError("reservoir records have no overlapping date range")

    frames = {rid: df.loc[start:end].copy() for rid, df in raw.items()}
    for rid, df in frames.items():
        if df[FEATURES].isna().any().any():
            raise DataError(f"reservoir {rid}: unexpected missing values after gap fill")
    return RecordPanel(frames=frames, raw_frames=raw, rejected=rejected)


def write_panel(panel: RecordPanel, out_dir):
    """Emit one CSV per reservoir in the ingest schema (round-trip support)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for rid, df in panel.frames.items():
        out = df.reset_index().rename(columns={"index": "date"})
        out["date"] = out["date"].dt.strftime("%Y-%m-%d")
        out.to_csv(out_dir / f"{rid}.csv", index=False, lineterminator="\n")


def scale_and_window(
    panel: RecordPanel,
    splits=(0.7, 0.15, 0.15),
    T: int = 30,
    H: int = 7,
    stride: int = 1,
):
    """Chronological split, train-only z-scoring, and window enumeration.

    Returns ({'train': WindowSet, 'val': ..., 'test': ...}, ScalingStats).
    """
    x = panel.feature_array()  # (days, N, F)
    dates = panel.dates()
    n_days = x.shape[0]
    n_windows = n_days - T - H + 1
    if n_windows < 1:
        raise DataError(f"series of {n_days} days cannot fit T={T}, H={H}")
    starts = list(range(0, n_windows, stride))

    n_train = int(len(starts) * splits[0])
    n_val = int(len(starts) * splits[1])
    groups = {
        "train": starts[:n_train],
        "val": starts[n_train : n_train + n_val],
        "test": starts[n_train + n_val :],
    }

    # stats over the days any train window touches
    if groups["train"]:
        train_span = groups["train"][-1] + T + H
    else:
        train_span = n_days
    train_days = x[:train_span]
    mean = train_days.mean(axis=0)
    std = train_days.std(axis=0)
    flat = np.argwhere(std <= 0)
    if flat.size:
        i, f = flat[0]
        raise DataError(
            f"constant feature '{FEATURES[f]}' for reservoir '{panel.node_ids[i]}' in the train split"
        )
    stats = ScalingStats(node_ids=panel.node_ids, mean=mean, std=std)
    scaled = stats.scale(x)

    sets = {}
    for name, idxs in groups.items():
        hist = np.stack([scaled[s : s + T] for s in idxs]) if idxs else np.zeros((0, T, x.shape[1], x.shape[2]))
        targ = (
            np.stack([scaled[s + T : s + T + H, :, 0].T for s in idxs])
            if idxs
            else np.zeros((0, x.shape[1], H))
        )
        sets[name] = WindowSet(
            history=hist.astype(np.float64),
            targets=targ.astype(np.float64),
            start_dates=[dates[s] for s in idxs],
        )
    return sets, stats


def pretrain_windows(panel: RecordPanel, stats: ScalingStats, T: int, H: int):
    """Per-reservoir (T, F) history / (H,) inflow-target windows for pretraining.

    Drawn from each reservoir's full pre-alignment record, so dates that were
    trimmed away during alignment still contribute. Scaled with the train
    statistics.
    """
    out = {}
    for idx, rid in enumerate(stats.node_ids):
        df = panel.raw_frames[rid]
        x = df[FEATURES].to_numpy(dtype=np.float64)
        x = (x - stats.mean[idx]) / stats.std[idx]
        n = x.shape[0] - T - H + 1
        if n < 1:
            continue
        hist = np.stack([x[s : s + T] for s in range(n)])
        targ = np.stack([x[s + T : s + T + H, 0] for s in range(n)])
        out[rid] = (hist, targ)
    if not out:
        raise DataError("no reservoir has enough record for pretraining windows")
    return out


# ---------------------------------------------------------------------------
# synthetic basin generator


def generate_synthetic_basin(
    n_reservoirs: int,
    n_days: int,
    seed: int,
    out_dir,
    T: int = 30,
    H: int = 7,
    lag_days: int = 1,
    attenuation: float = 0.6,
    local_share: float = 0.4,
    shock_scale: float = 1.0,
    site_noise: float = 1.2,
    flow_noise: float = 8.0,
    storm_lag_days: int = 0,
):
    """Emit a chain basin with planted lag routing and shared regional weather.

    The headwater inflow is a seasonal sinusoid plus precipitation-driven
    runoff; each downstream reservoir receives an attenuated, lagged copy of
    its parent's inflow plus local runoff. Precipitation has a persistent
    regional component observed with per-site noise, so neighboring records
    carry real information about any one reservoir's future runoff.
    """
    if n_reservoirs < 2:
        raise DataError("need at least 2 reservoirs")
    if n_days < T + H + 10:
        raise DataError(f"need at least {T + H + 10} days, got {n_days}")
    if lag_days < 1 or not 0 <= attenuation <= 1:
        raise DataError("invalid routing parameters")
    if shock_scale < 0 or site_noise < 0 or flow_noise < 0:
        raise DataError("noise scales must be >= 0")
    if storm_lag_days < 0:
        raise DataError("storm lag must be >= 0 days")

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng_geo = substream(seed, "synth.geo")
    rng_weather = substream(seed, "synth.weather")
    rng_flow = substream(seed, "synth.flow")

    metas = []
    for i in range(n_reservoirs):
        metas.append(
            ReservoirMeta(
                id=f"R{i:02d}",
                lat=40.0 + 0.15 * i + float(rng_geo.uniform(-0.02, 0.02)),
                lon=-110.0 - 0.20 * i + float(rng_geo.uniform(-0.02, 0.02)),
                elevation_m=3000.0 - 150.0 * i,
            )
        )

    day = np.arange(n_days)
    season = np.sin(2 * np.pi * day / 365.25)

    # regional storm state: slow AR(1), shared across the basin
    regional = np.zeros(n_days)
    shocks = rng_weather.normal(0, shock_scale, n_days)
    for t in range(1, n_days):
        regional[t] = 0.85 * regional[t - 1] + shocks[t]

    precip = np.zeros((n_days, n_reservoirs))
    temp = np.zeros((n_days, n_reservoirs))
    for i in range(n_reservoirs):
        # storms travel up-valley: the lowest reservoir sees a front first and
        # higher sites see the same regional signal ``delay`` days later
        delay = storm_lag_days * (n_reservoirs - 1 - i)
        regional_i = np.roll(regional, delay)
        regional_i[:delay] = 0.0
        obs_noise = rng_weather.normal(0, site_noise, n_days)
        precip[:, i] = np.maximum(0.0, 2.0 + 2.5 * regional_i + obs_noise + 0.8 * season)
        temp[:, i] = (
            12.0
            - 0.004 * metas[i].elevation_m
            + 10.0 * np.sin(2 * np.pi * (day - 30) / 365.25)
            + rng_weather.normal(0, 1.0, n_days)
        )

    # runoff responds to precipitation with a short exponential memory
    kernel = np.exp(-np.arange(6) / 2.0)
    kernel /= kernel.sum()
    runoff = np.zeros_like(precip)
    for i in range(n_reservoirs):
        runoff[:, i] = np.convolve(precip[:, i], kernel)[:n_days]

    inflow = np.zeros((n_days, n_reservoirs))
    truth_edges = []
    for i in range(n_reservoirs):
        noise = rng_flow.normal(0, flow_noise, n_days)
        local = 60.0 * runoff[:, i] + 40.0 * (1.0 + 0.5 * season)
        if i == 0:
            inflow[:, i] = np.maximum(1.0, local + noise)
        else:
            routed = np.zeros(n_days)
            routed[lag_days:] = inflow[: n_days - lag_days, i - 1]
            inflow[:, i] = np.maximum(
                1.0, attenuation * routed + local_share * local + noise
            )
            truth_edges.append((metas[i - 1].id, metas[i].id, lag_days, attenuation))

    dates = pd.date_range("2000-01-01", periods=n_days, freq="D")
    for i, m in enumerate(metas):
        df = pd.DataFrame(
            {
                "date": dates.strftime("%Y-%m-%d"),
                "inflow_cfs": np.round(inflow[:, i], 3),
                "precip_mm": np.round(precip[:, i], 3),
                "temp_c": np.round(temp[:, i], 3),
            }
        )
        df.to_csv(out_dir / f"{m.id}.csv", index=False, lineterminator="\n")

    write_metadata(metas, out_dir / "metadata.csv")
    with open(out_dir / "truth_edges.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["src", "dst", "lag_days", "gain"])
        for row in truth_edges:
            writer.writerow(row)
    return metas


def discover_basin(data_dir):
    """Map reservoir ids to CSV paths using the metadata file in ``data_dir``."""
    from .geo import read_metadata

    data_dir = Path(data_dir)
    metas = read_metadata(data_dir / "metadata.csv")
    paths = {}
    for m in metas:
        p = data_dir / f"{m.id}.csv"
        if not p.exists():
            raise DataError(f"missing record file for reservoir {m.id}: {p}")
        paths[m.id] = p
    return metas, paths
