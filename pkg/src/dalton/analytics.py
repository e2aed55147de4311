"""Batch metrics over stored series: exposure, heatmaps, saturation
ratios, linger/trap timing, and cross-room spread lags."""

from __future__ import annotations

import io
import csv
from dataclasses import dataclass
from enum import Enum
from typing import Mapping, Sequence

import numpy as np

from .core import RANGES, Channel
from .events import EventGroup

__all__ = [
    "Stat",
    "ExposureReport",
    "LingerTrapFinding",
    "SpreadMatrix",
    "unsafe_fraction",
    "exposure_report",
    "hourly_heatmap",
    "saturation_compare",
    "SaturationRatio",
    "linger_and_trap",
    "spread_matrix",
    "heatmap_to_csv",
    "exposure_to_csv",
    "linger_to_csv",
    "spread_to_csv",
]

MS_PER_HOUR = 3_600_000
MS_PER_DAY = 86_400_000


class Stat(str, Enum):
    MAX = "max"
    MEAN = "mean"


@dataclass(frozen=True)
class ExposureReport:
    room: str
    channel: Channel
    t0_ms: int
    t1_ms: int
    unsafe_fraction: float
    mean: float
    p95: float
    peak: float


@dataclass(frozen=True)
class SaturationRatio:
    ratio: float
    ci_lo: float
    ci_hi: float


@dataclass(frozen=True)
class LingerTrapFinding:
    room: str
    channel: Channel
    group_id: int
    linger_s: float
    trapped: bool


@dataclass(frozen=True)
class SpreadMatrix:
    channel: Channel
    source: str
    rooms: tuple[str, ...]
    lag_s: dict[tuple[str, str], int | None]
    corr: dict[tuple[str, str], float]
    attenuation: dict[str, float | None]

    def low_confidence(self, a: str, b: str) -> bool:
        return self.corr.get((a, b), 0.0) < 0.3


# ---------------------------------------------------------------------------
# exposure
# ---------------------------------------------------------------------------

def unsafe_fraction(
    values: np.ndarray,
    threshold: float,
    valid: np.ndarray | None = None,
) -> float | None:
    """Fraction of valid samples strictly above threshold; None when no
    valid samples exist (undefined, not zero)."""
    values = np.asarray(values, dtype=np.float64)
    if valid is not None:
        values = values[np.asarray(valid, dtype=bool)]
    if values.size == 0:
        return None
    return float(np.count_nonzero(values > threshold)) / float(values.size)


def exposure_report(
    room: str,
    channel: Channel,
    ts_ms: np.ndarray,
    values: np.ndarray,
    threshold: float,
    window: tuple[int, int] | None = None,
    valid: np.ndarray | None = None,
) -> ExposureReport | None:
    ts_ms = np.asarray(ts_ms, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    mask = np.ones(values.shape, dtype=bool) if valid is None else np.asarray(valid, bool)
    if window is not None:
        mask = mask & (ts_ms >= window[0]) & (ts_ms < window[1])
    sel = values[mask]
    if sel.size == 0:
        return None
    t0 = window[0] if window else int(ts_ms.min())
    t1 = window[1] if window else int(ts_ms.max()) + 1
    return ExposureReport(
        room=room,
        channel=channel,
        t0_ms=t0,
        t1_ms=t1,
        unsafe_fraction=float(np.count_nonzero(sel > threshold)) / float(sel.size),
        mean=float(sel.mean()),
        p95=float(np.percentile(sel, 95)),
        peak=float(sel.max()),
    )


# ---------------------------------------------------------------------------
# heatmap
# ---------------------------------------------------------------------------

def hourly_heatmap(
    ts_ms: np.ndarray,
    values: np.ndarray,
    stat: Stat = Stat.MAX,
    valid: np.ndarray | None = None,
) -> tuple[int, np.ndarray]:
    """Matrix [day x 24] of the per-hour stat over valid samples.

    Returns (day0, matrix) where day0 is the UTC epoch-day of row 0 and
    absent hours are NaN.
    """
    ts_ms = np.asarray(ts_ms, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if valid is not None:
        keep = np.asarray(valid, dtype=bool)
        ts_ms, values = ts_ms[keep], values[keep]
    if ts_ms.size == 0:
        raise ValueError("heatmap requires at least one valid sample")
    days = ts_ms // MS_PER_DAY
    day0 = int(days.min())
    n_days = int(days.max()) - day0 + 1
    hours = (ts_ms // MS_PER_HOUR) % 24
    flat = (days - day0) * 24 + hours
    n_cells = n_days * 24
    counts = np.bincount(flat, minlength=n_cells)
    if stat is Stat.MEAN:
        sums = np.bincount(flat, weights=values, minlength=n_cells)
        with np.errstate(invalid="ignore"):
            cells = sums / counts
    else:
        cells = np.full(n_cells, -np.inf)
        np.maximum.at(cells, flat, values)
        cells[counts == 0] = np.nan
    return day0, cells.reshape(n_days, 24)


# ---------------------------------------------------------------------------
# saturation comparison
# ---------------------------------------------------------------------------

def saturation_compare(
    cond_a: Mapping[Channel, np.ndarray],
    cond_b: Mapping[Channel, np.ndarray],
    n_boot: int = 1000,
    seed: int = 0,
) -> dict[Channel, SaturationRatio | None]:
    """Per-channel median(a)/median(b) with a seeded bootstrap 95% CI.
    Channels whose denominator median is zero report None."""
    out: dict[Channel, SaturationRatio | None] = {}
    rng = np.random.default_rng(seed)
    for channel in cond_a:
        if channel not in cond_b:
            continue
        a = np.asarray(cond_a[channel], dtype=np.float64)
        b = np.asarray(cond_b[channel], dtype=np.float64)
        if a.size < 100 or b.size < 100:
            raise ValueError("saturation_compare needs >= 100 samples per condition")
        med_b = float(np.median(b))
        if med_b == 0.0:
            out[channel] = None
            continue
        ratio = float(np.median(a)) / med_b
        ia = rng.integers(0, a.size, size=(n_boot, a.size))
        ib = rng.integers(0, b.size, size=(n_boot, b.size))
        boot_a = np.median(a[ia], axis=1)
        boot_b = np.median(b[ib], axis=1)
        ok = boot_b != 0.0
        ratios = boot_a[ok] / boot_b[ok]
        lo, hi = np.percentile(ratios, [2.5, 97.5])
        out[channel] = SaturationRatio(ratio=ratio, ci_lo=float(lo), ci_hi=float(hi))
    return out


# ---------------------------------------------------------------------------
# linger / trap
# ---------------------------------------------------------------------------

def _rolling_median_forward(x: np.ndarray, width: int) -> np.ndarray:
    """out[i] = median(x[i : i+width]), window truncated at the tail."""
    n = x.size
    if n == 0:
        return x
    full = n - width + 1
    out = np.empty(n)
    if full > 0:
        win = np.lib.stride_tricks.sliding_window_view(x, width)
        out[:full] = np.median(win, axis=1)
    for i in range(max(full, 0), n):
        out[i] = np.median(x[i:])
    return out


def linger_and_trap(
    room_series: Mapping[str, Mapping[Channel, tuple[np.ndarray, np.ndarray]]],
    event: EventGroup,
    k: float = 3.0,
    t_trap_s: int = 1800,
    median_win_s: int = 300,
) -> list[LingerTrapFinding]:
    """Per room/channel: seconds from the source event's end until the
    forward 5-min rolling median re-enters the pre-event baseline band
    (median +- k*MAD, MAD floored at channel resolution). Never re-enters
    within the data window -> linger is the window remainder and the room
    is flagged trapped. Rooms lacking an event-length baseline are skipped.
    """
    if not event.members:
        raise ValueError("event has no members")
    source = min(event.members, key=lambda m: (m.t_start, m.device))
    t_start, t_end = source.t_start, source.t_end
    ev_len = t_end - t_start
    findings: list[LingerTrapFinding] = []
    for room in sorted(room_series):
        for channel in sorted(room_series[room], key=lambda c: c.value):
            ts, vals = room_series[room][channel]
            ts = np.asarray(ts, dtype=np.int64)
            vals = np.asarray(vals, dtype=np.float64)
            if ts.size == 0 or int(ts[0]) > t_start - ev_len:
                continue  # baseline window not fully covered by data
            b0 = np.searchsorted(ts, t_start - ev_len)
            b1 = np.searchsorted(ts, t_start)
            base = vals[b0:b1]
            if base.size < 2:
                continue
            base_med = float(np.median(base))
            base_mad = max(
                float(np.median(np.abs(base - base_med))), RANGES[channel].resolution
            )
            band = k * base_mad
            i_end = np.searchsorted(ts, t_end)
            tail = vals[i_end:]
            if tail.size == 0:
                continue
            roll = _rolling_median_forward(tail, width=median_win_s)
            inside = np.abs(roll - base_med) <= band
            hits = np.flatnonzero(inside)
            if hits.size:
                linger = (int(ts[i_end + hits[0]]) - t_end) / 1000.0
                trapped = linger > t_trap_s
            else:
                linger = (int(ts[-1]) - t_end) / 1000.0
                trapped = True
            findings.append(
                LingerTrapFinding(
                    room=room, channel=channel, group_id=event.group_id,
                    linger_s=linger, trapped=trapped,
                )
            )
    return findings


# ---------------------------------------------------------------------------
# spread matrix
# ---------------------------------------------------------------------------

def spread_matrix(
    series: Mapping[str, np.ndarray],
    channel: Channel,
    source: str,
    max_lag_s: int = 3600,
    dt_s: int = 1,
) -> SpreadMatrix:
    """Pairwise cross-correlation lags over a shared event window.

    lag(i, j) > 0 means room j's signal trails room i's. The search is
    symmetric in [-max_lag, +max_lag] so lag(i,j) = -lag(j,i) by
    construction; magnitudes stay within max_lag_s. Flat series yield no
    lag. Peak swing relative to the source room gives attenuation.
    """
    if source not in series:
        raise ValueError(f"source room {source!r} missing from series")
    rooms = tuple(sorted(series))
    if len(rooms) < 2:
        raise ValueError("spread_matrix needs at least two rooms")
    arrs = {r: np.asarray(series[r], dtype=np.float64) for r in rooms}
    n = {r: a.size for r, a in arrs.items()}
    if len(set(n.values())) != 1:
        raise ValueError("all rooms must share the event window grid")
    length = next(iter(n.values()))
    centered = {r: a - a.mean() for r, a in arrs.items()}
    norms = {r: float(np.linalg.norm(c)) for r, c in centered.items()}
    swing = {r: float(a.max() - a.min()) for r, a in arrs.items()}

    max_lag = min(max_lag_s // dt_s, length - 1)
    lag_s: dict[tuple[str, str], int | None] = {}
    corr: dict[tuple[str, str], float] = {}
    for i, ri in enumerate(rooms):
        for rj in rooms[i:]:
            if ri == rj:
                lag_s[(ri, rj)] = 0
                corr[(ri, rj)] = 1.0 if norms[ri] > 0 else 0.0
                continue
            if norms[ri] == 0.0 or norms[rj] == 0.0:
                lag_s[(ri, rj)] = lag_s[(rj, ri)] = None
                corr[(ri, rj)] = corr[(rj, ri)] = 0.0
                continue
            # full cross-correlation; index n-1 is zero shift
            c = np.correlate(centered[rj], centered[ri], mode="full")
            lo = length - 1 - max_lag
            hi = length - 1 + max_lag + 1
            window = c[lo:hi]
            best = int(np.argmax(window))
            shift = (best - max_lag) * dt_s
            peak = float(window[best]) / (norms[ri] * norms[rj])
            lag_s[(ri, rj)] = shift
            lag_s[(rj, ri)] = -shift
            corr[(ri, rj)] = corr[(rj, ri)] = peak

    attenuation = {
        r: (swing[r] / swing[source] if swing[source] > 0 else None) for r in rooms
    }
    return SpreadMatrix(
        channel=channel, source=source, rooms=rooms,
        lag_s=lag_s, corr=corr, attenuation=attenuation,
    )


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------

def _csv(rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(rows)
    return buf.getvalue()


def heatmap_to_csv(day0: int, matrix: np.ndarray) -> str:
    rows: list[list] = [["epoch_day"] + [f"h{h:02d}" for h in range(24)]]
    for d in range(matrix.shape[0]):
        row: list = [day0 + d]
        for v in matrix[d]:
            row.append("" if np.isnan(v) else f"{v:.3f}")
        rows.append(row)
    return _csv(rows)


def exposure_to_csv(reports: Sequence[ExposureReport]) -> str:
    rows: list[list] = [
        ["room", "channel", "t0_ms", "t1_ms", "unsafe_fraction", "mean", "p95", "peak"]
    ]
    for r in reports:
        rows.append([
            r.room, r.channel.value, r.t0_ms, r.t1_ms,
            f"{r.unsafe_fraction:.6f}", f"{r.mean:.3f}", f"{r.p95:.3f}", f"{r.peak:.3f}",
        ])
    return _csv(rows)


def linger_to_csv(findings: Sequence[LingerTrapFinding]) -> str:
    rows: list[list] = [["room", "channel", "group_id", "linger_s", "trapped"]]
    for f in findings:
        rows.append([f.room, f.channel.value, f.group_id, f"{f.linger_s:.1f}",
                     str(f.trapped).lower()])
    return _csv(rows)


def spread_to_csv(m: SpreadMatrix) -> str:
    rows: list[list] = [["room_i", "room_j", "lag_s", "corr", "attenuation_j"]]
    for ri in m.rooms:
        for rj in m.rooms:
            lag = m.lag_s[(ri, rj)]
            att = m.attenuation[rj]
            rows.append([
                ri, rj,
                "" if lag is None else lag,
                f"{m.corr[(ri, rj)]:.3f}",
                "" if att is None else f"{att:.3f}",
            ])
    return _csv(rows)
