"""Shared vocabulary: channels, ranges, samples, thresholds, CSV codec.

Everything here is an immutable value type, safe to share across threads.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from enum import Enum
from typing import Final, Mapping

__all__ = [
    "Channel",
    "CHANNELS",
    "ChannelRange",
    "RANGES",
    "RangeViolation",
    "SensorSample",
    "DEFAULT_THRESHOLDS",
    "SAFETY_NOTES",
    "ERROR_MARGINS",
    "CSV_HEADER",
    "validate_device_id",
    "validate_sample",
    "quantize",
    "format_value",
    "sample_to_csv_row",
    "sample_from_csv_row",
    "utc_day",
]

_DEVICE_ID_RE: Final = re.compile(r"^[A-Za-z0-9_-]{1,64}$")


class Channel(str, Enum):
    """The eight pollutant/comfort channels every device reports."""

    PM = "pm"        # particulate matter, ug/m3
    NO2 = "no2"      # nitrogen dioxide, ppm
    ETH = "eth"      # ethanol, ppm
    VOC = "voc"      # volatile organic compounds, ppm
    CO = "co"        # carbon monoxide, ppm
    CO2 = "co2"      # carbon dioxide, ppm
    TEMP = "temp"    # temperature, degC
    RH = "rh"        # relative humidity, %

    def __str__(self) -> str:  # pragma: no cover - cosmetic
        return self.value


CHANNELS: Final[tuple[Channel, ...]] = tuple(Channel)


@dataclass(frozen=True)
class ChannelRange:
    channel: Channel
    lo: float
    hi: float
    resolution: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"{self.channel}: lo must be < hi")
        if not self.resolution > 0:
            raise ValueError(f"{self.channel}: resolution must be positive")

    def contains(self, value: float) -> bool:
        return self.lo <= value <= self.hi


# Hardware measurement envelope of the sensing device, per channel.
RANGES: Final[dict[Channel, ChannelRange]] = {
    Channel.PM: ChannelRange(Channel.PM, 0.0, 500.0, 1.0),
    Channel.NO2: ChannelRange(Channel.NO2, 0.1, 10.0, 0.1),
    Channel.ETH: ChannelRange(Channel.ETH, 1.0, 500.0, 1.0),
    Channel.VOC: ChannelRange(Channel.VOC, 1.0, 500.0, 1.0),
    Channel.CO: ChannelRange(Channel.CO, 5.0, 5000.0, 0.5),
    Channel.CO2: ChannelRange(Channel.CO2, 0.0, 10000.0, 1.0),
    Channel.TEMP: ChannelRange(Channel.TEMP, -20.0, 99.0, 0.1),
    Channel.RH: ChannelRange(Channel.RH, 0.0, 99.0, 0.1),
}

# Unsafe-above levels. Only the CO2 value is a hard constant of the
# platform; the others are shipped configuration defaults, not vendor or
# health-agency figures.
DEFAULT_THRESHOLDS: Final[dict[Channel, float]] = {
    Channel.CO2: 1000.0,
    Channel.PM: 100.0,
    Channel.VOC: 250.0,
    Channel.CO: 35.0,
}

SAFETY_NOTES: Final[dict[Channel, str]] = {
    Channel.CO2: "fixed platform threshold",
    Channel.PM: "configurable default, not a reference value",
    Channel.VOC: "configurable default, not a reference value",
    Channel.CO: "configurable default, not a reference value",
}

# Sensor accuracy margins from the hardware datasheet. Informational only:
# no pipeline stage consumes these.
ERROR_MARGINS: Final[dict[Channel, str]] = {
    Channel.PM: "+-10 ug/m3 + 10% of value",
    Channel.NO2: "+-0.1 ppm",
    Channel.ETH: "+-5 ppm",
    Channel.VOC: "+-5 ppm",
    Channel.CO: "+-2 ppm",
    Channel.CO2: "+-100 ppm + 6% of value",
    Channel.TEMP: "+-0.3 degC",
    Channel.RH: "+-2 %",
}


def validate_device_id(device_id: str) -> str:
    """Return the id unchanged, or raise ValueError if malformed."""
    if not _DEVICE_ID_RE.match(device_id or ""):
        raise ValueError(f"bad device id: {device_id!r}")
    return device_id


@dataclass(frozen=True)
class RangeViolation:
    channel: Channel
    value: float


@dataclass(frozen=True)
class SensorSample:
    """One 1 Hz reading: all eight channels, device timestamp, monotone seq."""

    device: str
    ts: int                      # ms since Unix epoch, device clock
    seq: int                     # per-device monotone counter
    values: Mapping[Channel, float]
    firmware: str = "0.0.0"

    def __post_init__(self) -> None:
        missing = [c for c in CHANNELS if c not in self.values]
        if missing:
            raise ValueError(f"sample missing channels: {missing}")


def validate_sample(
    sample: SensorSample,
    ranges: Mapping[Channel, ChannelRange] = RANGES,
) -> list[RangeViolation]:
    """One violation per channel whose value falls outside [lo, hi].

    Missing channels are a structural error (raised), not a violation;
    SensorSample construction already enforces presence, so this guards
    only hand-built mappings.
    """
    violations: list[RangeViolation] = []
    for channel in CHANNELS:
        if channel not in ranges:
            raise ValueError(f"ranges missing channel {channel}")
        value = sample.values[channel]
        if not ranges[channel].contains(value):
            violations.append(RangeViolation(channel, value))
    return violations


def quantize(value: float, r: ChannelRange) -> float:
    """Snap to the nearest resolution multiple, ties away from zero,
    then clamp into [lo, hi]."""
    if not math.isfinite(value):
        raise ValueError(f"cannot quantize non-finite value {value!r}")
    q = value / r.resolution
    # kill FP dust before the tie decision (0.25/0.1 -> 2.4999999999999996)
    q = round(q, 9)
    n = math.floor(abs(q) + 0.5)
    snapped = math.copysign(n, q) * r.resolution
    return min(max(snapped, r.lo), r.hi)


# ---------------------------------------------------------------------------
# Canonical CSV record
# ---------------------------------------------------------------------------
# Header then rows; value formatting is bit-exact so files diff cleanly:
# integral values render as integers, anything else with one decimal.
# Quantized values always fit this (resolutions are 1, 0.5 or 0.1).

CSV_HEADER: Final = "ts_ms,seq,pm,no2,eth,voc,co,co2,temp,rh,firmware"

_CSV_CHANNELS: Final[tuple[Channel, ...]] = (
    Channel.PM, Channel.NO2, Channel.ETH, Channel.VOC,
    Channel.CO, Channel.CO2, Channel.TEMP, Channel.RH,
)


def format_value(value: float) -> str:
    if abs(value - round(value)) < 1e-9:
        return str(int(round(value)))
    return f"{value:.1f}"


def sample_to_csv_row(sample: SensorSample) -> str:
    cells = [str(sample.ts), str(sample.seq)]
    cells += [format_value(sample.values[c]) for c in _CSV_CHANNELS]
    cells.append(sample.firmware)
    return ",".join(cells)


def sample_from_csv_row(row: str, device: str = "") -> SensorSample:
    """Parse one canonical row. The device id is not part of the row; the
    caller knows it from the file path."""
    cells = row.rstrip("\n").split(",")
    if len(cells) != 11:
        raise ValueError(f"expected 11 cells, got {len(cells)}: {row!r}")
    values = {c: float(cells[2 + i]) for i, c in enumerate(_CSV_CHANNELS)}
    return SensorSample(
        device=device,
        ts=int(cells[0]),
        seq=int(cells[1]),
        values=values,
        firmware=cells[10],
    )


def utc_day(ts_ms: int) -> str:
    """YYYY-MM-DD of the UTC day containing ts_ms."""
    import datetime as _dt

    return _dt.datetime.fromtimestamp(ts_ms / 1000.0, _dt.timezone.utc).strftime(
        "%Y-%m-%d"
    )
