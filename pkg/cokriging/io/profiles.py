"""
Profile CSV reading and writing.

One row per measurement:

    profile_id,lon,lat,time_days,channel,pressure,value

channel is "Y" for the response or "X1" ... "XK" for predictors. Rows of a
profile need not be contiguous but must agree on lon, lat and time_days.
"""

import csv
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from cokriging.errors import CokrigingError
from cokriging.model.types import Profile

logger = logging.getLogger(__name__)

PROFILE_COLUMNS = ["profile_id", "lon", "lat", "time_days", "channel", "pressure", "value"]
LABEL_COLUMNS = ["profile_id", "label"]

_CHANNEL = re.compile(r"^(Y|X([1-9][0-9]*))$")


@dataclass
class _ProfileRows:
    coords: tuple[float, float]
    time: float
    first_row: int
    channels: dict[int, tuple[list[float], list[float]]] = field(default_factory=dict)


def _parse_float(file_path: str, row_number: int, name: str, value: str) -> float:
    try:
        number = float(value)
    except (TypeError, ValueError) as e:
        raise CokrigingError.invalid_row(
            file_path, row_number, name, f"not a number: {value!r}"
        ) from e
    if not np.isfinite(number):
        raise CokrigingError.invalid_row(
            file_path, row_number, name, f"not finite: {value!r}"
        )
    return number


def _parse_channel(file_path: str, row_number: int, value: str) -> int:
    """0 for the response, k for predictor channel Xk."""
    match = _CHANNEL.match(value.strip())
    if match is None:
        raise CokrigingError.invalid_row(
            file_path, row_number, "channel", f"expected Y or X<k>, got {value!r}"
        )
    return int(match.group(2)) if match.group(2) else 0


def read_profiles(file_path: Path) -> list[Profile]:
    """
    Read profiles from CSV, in order of first appearance.

    Every profile gets K predictor channels, K being the largest X index in
    the file; channels a profile does not report are empty.

    Raises:
        CokrigingError: If the file is missing, the header is wrong, or a row
            is malformed (the error names the row number and field)
    """
    file_path = Path(file_path)
    if not file_path.exists():
        raise CokrigingError.file_not_found(str(file_path), "profile CSV")
    path = str(file_path)

    grouped: dict[str, _ProfileRows] = {}
    with open(file_path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PROFILE_COLUMNS:
            raise CokrigingError.invalid_row(
                path, 1, "header", f"expected {','.join(PROFILE_COLUMNS)}"
            )
        for row_number, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(PROFILE_COLUMNS):
                raise CokrigingError.invalid_row(
                    path, row_number, "row", f"expected 7 fields, got {len(row)}"
                )
            profile_id = row[0].strip()
            if not profile_id:
                raise CokrigingError.invalid_row(path, row_number, "profile_id", "empty")
            lon = _parse_float(path, row_number, "lon", row[1])
            lat = _parse_float(path, row_number, "lat", row[2])
            time = _parse_float(path, row_number, "time_days", row[3])
            channel = _parse_channel(path, row_number, row[4])
            pressure = _parse_float(path, row_number, "pressure", row[5])
            value = _parse_float(path, row_number, "value", row[6])

            rows = grouped.setdefault(profile_id, _ProfileRows((lon, lat), time, row_number))
            if rows.coords != (lon, lat) or rows.time != time:
                raise CokrigingError.invalid_row(
                    path,
                    row_number,
                    "lon/lat/time_days",
                    f"profile {profile_id} changes location or time "
                    f"(first seen on row {rows.first_row})",
                )
            pressures, values = rows.channels.setdefault(channel, ([], []))
            pressures.append(pressure)
            values.append(value)

    n_channels = max(
        (max(rows.channels) for rows in grouped.values()), default=0
    )
    profiles = []
    for profile_id, rows in grouped.items():
        y_p, y_v = rows.channels.get(0, ([], []))
        x = [rows.channels.get(k, ([], [])) for k in range(1, n_channels + 1)]
        profiles.append(
            Profile(
                profile_id=profile_id,
                coords=rows.coords,
                time=rows.time,
                y_pressures=np.array(y_p),
                y_values=np.array(y_v),
                x_pressures=[np.array(p) for p, _ in x],
                x_values=[np.array(v) for _, v in x],
            )
        )
    logger.info(
        f"Read {len(profiles)} profiles with {n_channels} predictor channels "
        f"from {file_path}"
    )
    return profiles


def write_profiles(output_path: Path, profiles: list[Profile]) -> Path:
    """Write profiles as CSV, response rows first, floats in repr form."""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(PROFILE_COLUMNS)
        for profile in profiles:
            base = [
                profile.profile_id,
                repr(profile.coords[0]),
                repr(profile.coords[1]),
                repr(profile.time),
            ]
            channels = [("Y", profile.y_pressures, profile.y_values)] + [
                (f"X{k + 1}", p, v)
                for k, (p, v) in enumerate(zip(profile.x_pressures, profile.x_values))
            ]
            for name, pressures, values in channels:
                for p, v in zip(pressures, values):
                    writer.writerow(base + [name, repr(float(p)), repr(float(v))])
    logger.info(f"Wrote {len(profiles)} profiles to {output_path}")
    return output_path


def write_labels(
    output_path: Path, profile_ids: list[str], labels: np.ndarray
) -> Path:
    """Write one-based cluster labels per profile."""
    output_path = Path(output_path)
    output_path.parent.mkdir(parents=True, exist_ok=True)
    with open(output_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(LABEL_COLUMNS)
        for profile_id, label in zip(profile_ids, labels):
            writer.writerow([profile_id, int(label) + 1])
    return output_path


def read_labels(file_path: Path) -> dict[str, int]:
    """Read a label file back as zero-based labels keyed by profile id."""
    file_path = Path(file_path)
    if not file_path.exists():
        raise CokrigingError.file_not_found(str(file_path), "label file")
    labels = {}
    with open(file_path, newline="") as f:
        reader = csv.DictReader(f)
        for row_number, row in enumerate(reader, start=2):
            try:
                labels[row["profile_id"]] = int(row["label"]) - 1
            except (KeyError, TypeError, ValueError) as e:
                raise CokrigingError.invalid_row(
                    str(file_path), row_number, "label", str(e)
                ) from e
    return labels
