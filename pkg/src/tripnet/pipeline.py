"""From raw GPS streams and auxiliary survey tables to model-ready records:
trip breaking with transit stitching, cyclical time transform, fixed-length
resampling with masks, feature building and normalization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import rng
from .embedding import EmbeddingSchema, table_1_schema
from .errors import ContractError, IngestionError, ParseError

SECONDS_PER_DAY = 86400
TRAJECTORY_LEN = 70
KEEP_HEAD = 35
KEEP_TAIL = 35
MIN_TRIP_POINTS = 15

DWELL_GAP_S = 180.0  # trips split at gaps longer than 3 minutes
JUNCTION_GAP_S = 600.0  # up to 10 minutes inside a bus-correspondence junction
METRO_RADIUS_M = 300.0
JUNCTION_RADIUS_M = 100.0

EARTH_RADIUS_M = 6_371_000.0

_EPOCH = datetime(1970, 1, 1)


@dataclass(frozen=True)
class GpsPoint:
    t: float  # seconds since a fixed epoch, for ordering and gaps
    latitude: float
    longitude: float
    second_of_day: float

    def __post_init__(self):
        if not 0.0 <= self.second_of_day < SECONDS_PER_DAY:
            raise ContractError(f"second_of_day {self.second_of_day} outside [0, {SECONDS_PER_DAY})")
        if not -90.0 <= self.latitude <= 90.0 or not -180.0 <= self.longitude <= 180.0:
            raise ContractError(
                f"coordinates ({self.latitude}, {self.longitude}) outside WGS-84 ranges"
            )


def point_from_datetime(dt: datetime, latitude: float, longitude: float) -> GpsPoint:
    if dt.tzinfo is not None:
        dt = dt.astimezone(timezone.utc).replace(tzinfo=None)
    sod = dt.hour * 3600 + dt.minute * 60 + dt.second + dt.microsecond / 1e6
    return GpsPoint(
        t=(dt - _EPOCH).total_seconds(),
        latitude=latitude,
        longitude=longitude,
        second_of_day=sod,
    )


def day_of_week(point: GpsPoint) -> int:
    """0 = Monday .. 6 = Sunday."""
    return (_EPOCH + timedelta(seconds=point.t)).weekday()


def hour_of(point: GpsPoint) -> int:
    return int(point.second_of_day // 3600)


def haversine_m(lat1, lon1, lat2, lon2) -> float:
    """Great-circle distance in meters."""
    phi1, phi2 = math.radians(lat1), math.radians(lat2)
    dphi = phi2 - phi1
    dlmb = math.radians(lon2 - lon1)
    a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))


def point_in_polygon(lat: float, lon: float, polygon) -> bool:
    """Ray casting with (lon, lat) as (x, y); polygon is [(lat, lon), ...]."""
    inside = False
    n = len(polygon)
    for i in range(n):
        y1, x1 = polygon[i]
        y2, x2 = polygon[(i + 1) % n]
        if (y1 > lat) != (y2 > lat):
            x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
            if lon < x_cross:
                inside = not inside
    return inside


def transform_time(seconds: float) -> tuple[float, float]:
    """Map seconds-after-midnight onto the unit circle: (sin, cos)."""
    if not 0.0 <= seconds < SECONDS_PER_DAY:
        raise ContractError(f"seconds {seconds} outside [0, {SECONDS_PER_DAY})")
    angle = 2.0 * math.pi * seconds / SECONDS_PER_DAY
    return math.sin(angle), math.cos(angle)


# --- trip breaking ----------------------------------------------------------


@dataclass(frozen=True)
class Station:
    name: str
    latitude: float
    longitude: float


class StationIndex:
    """Metro stations, bus-correspondence junctions and metro travel times."""

    def __init__(self, metro=(), junctions=(), travel_time_s=None,
                 metro_radius_m=METRO_RADIUS_M, junction_radius_m=JUNCTION_RADIUS_M):
        self.metro = list(metro)
        self.junctions = list(junctions)
        self.travel_time_s = dict(travel_time_s or {})
        self.metro_radius_m = metro_radius_m
        self.junction_radius_m = junction_radius_m

    def metro_near(self, point: GpsPoint) -> Station | None:
        best, best_d = None, self.metro_radius_m
        for s in self.metro:
            d = haversine_m(point.latitude, point.longitude, s.latitude, s.longitude)
            if d <= best_d:
                best, best_d = s, d
        return best

    def junction_containing(self, p: GpsPoint, q: GpsPoint) -> Station | None:
        for s in self.junctions:
            if (
                haversine_m(p.latitude, p.longitude, s.latitude, s.longitude) <= self.junction_radius_m
                and haversine_m(q.latitude, q.longitude, s.latitude, s.longitude) <= self.junction_radius_m
            ):
                return s
        return None

    def max_travel_time(self, a: str, b: str) -> float | None:
        return self.travel_time_s.get((a, b))

    @classmethod
    def load(cls, path) -> "StationIndex":
        """One delimited file: 4-field rows are stations (name, lat, lon, kind),
        3-field rows are metro travel-time pairs (a, b, seconds)."""
        metro, junctions, times = [], [], {}
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = [p.strip() for p in line.split(",")]
                if len(parts) == 4:
                    name, lat, lon, kind = parts
                    try:
                        station = Station(name, float(lat), float(lon))
                    except ValueError as exc:
                        raise ParseError(path, line_no, f"bad coordinate: {exc}") from None
                    if kind == "metro":
                        metro.append(station)
                    elif kind == "junction":
                        junctions.append(station)
                    else:
                        raise ParseError(path, line_no, f"unknown station kind {kind!r}")
                elif len(parts) == 3:
                    a, b, seconds = parts
                    try:
                        seconds = float(seconds)
                    except ValueError:
                        raise ParseError(path, line_no, f"bad travel time {parts[2]!r}") from None
                    times[(a, b)] = seconds
                    times[(b, a)] = seconds
                else:
                    raise ParseError(path, line_no, f"expected 3 or 4 fields, got {len(parts)}")
        return cls(metro, junctions, times)


def _check_ordered(points) -> None:
    for a, b in zip(points, points[1:]):
        if b.t < a.t:
            raise ContractError("GPS stream timestamps must be non-decreasing")


def split_on_dwell_gaps(points, max_gap_s: float = DWELL_GAP_S):
    """Split an ordered stream wherever consecutive points are more than
    the dwell threshold apart."""
    _check_ordered(points)
    segments, current = [], []
    for p in points:
        if current and p.t - current[-1].t > max_gap_s:
            segments.append(current)
            current = []
        current.append(p)
    if current:
        segments.append(current)
    return segments


def _should_stitch(p: GpsPoint, q: GpsPoint, index: StationIndex, junction_gap_s: float) -> bool:
    gap = q.t - p.t
    sa = index.metro_near(p)
    sb = index.metro_near(q)
    if sa is not None and sb is not None and sa.name != sb.name:
        limit = index.max_travel_time(sa.name, sb.name)
        if limit is not None and gap <= limit:
            return True
    if index.junction_containing(p, q) is not None and gap <= junction_gap_s:
        return True
    return False


def break_trips(points, index: StationIndex | None = None, *,
                max_gap_s: float = DWELL_GAP_S, junction_gap_s: float = JUNCTION_GAP_S):
    """Segment one respondent's ordered stream into trips.

    Gaps over the dwell threshold split; consecutive segments are stitched
    back when their facing endpoints sit at two different metro stations
    within the pair's travel-time bound, or inside the same bus junction
    within the wider junction gap. Without a station index only the dwell
    rule applies.
    """
    segments = split_on_dwell_gaps(points, max_gap_s)
    if index is None or not segments:
        return segments
    stitched = [segments[0]]
    for seg in segments[1:]:
        if _should_stitch(stitched[-1][-1], seg[0], index, junction_gap_s):
            stitched[-1] = stitched[-1] + seg
        else:
            stitched.append(seg)
    return stitched


# --- fixed-length trajectories ----------------------------------------------


@dataclass
class Trajectory:
    """Exactly 70 steps of (sin_time, cos_time, longitude, latitude) plus a
    validity mask; padding is trailing and zero-filled."""

    values: np.ndarray  # (70, 4)
    mask: np.ndarray  # (70,) bool

    def __post_init__(self):
        if self.values.shape != (TRAJECTORY_LEN, 4):
            raise ContractError(f"trajectory shape {self.values.shape} != ({TRAJECTORY_LEN}, 4)")
        if self.mask.shape != (TRAJECTORY_LEN,):
            raise ContractError(f"mask shape {self.mask.shape} != ({TRAJECTORY_LEN},)")

    @property
    def length(self) -> int:
        return int(self.mask.sum())


def resample(points) -> Trajectory:
    """Fix the length at 70: keep the first 35 and last 35 points of longer
    trips, pad shorter ones with trailing masked zeros."""
    n = len(points)
    if n < MIN_TRIP_POINTS:
        raise ContractError(f"trip has {n} points, below the minimum of {MIN_TRIP_POINTS}")
    if n > TRAJECTORY_LEN:
        kept = list(points[:KEEP_HEAD]) + list(points[n - KEEP_TAIL:])
    else:
        kept = list(points)
    values = np.zeros((TRAJECTORY_LEN, 4))
    mask = np.zeros(TRAJECTORY_LEN, dtype=bool)
    for i, p in enumerate(kept):
        s, c = transform_time(p.second_of_day)
        values[i] = (s, c, p.longitude, p.latitude)
        mask[i] = True
    return Trajectory(values=values, mask=mask)


# --- dataset schema and records ----------------------------------------------

DERIVED_CATEGORICAL = (
    "day_of_week", "hour_start", "hour_end",
    "cbd_origin", "cbd_destin", "mtl_origin", "mtl_destin",
)

DISTANCE_COLUMNS = {
    "home_dest": ("home", "dest"),
    "study_dest": ("study", "dest"),
    "work_dest": ("work", "dest"),
    "home_org": ("home", "org"),
    "study_org": ("study", "org"),
    "work_org": ("work", "org"),
}

MODE_LABELS = ("walk", "bike", "car", "public_transit")
PURPOSE_LABELS = ("education", "health", "return_home", "shopping", "work", "other")


def default_numeric_columns() -> tuple[str, ...]:
    cols = list(DISTANCE_COLUMNS) + ["avg_price_neigh"]
    cols += [f"lu_{i:02d}" for i in range(23)]
    cols += [f"ch_{i:02d}" for i in range(10)]
    cols += [f"uc_{i:02d}" for i in range(10)]
    return tuple(cols)


@dataclass(frozen=True)
class DatasetSchema:
    embedding: EmbeddingSchema
    numeric_columns: tuple[str, ...]
    mode_labels: tuple[str, ...] = MODE_LABELS
    purpose_labels: tuple[str, ...] = PURPOSE_LABELS

    @classmethod
    def default(cls) -> "DatasetSchema":
        return cls(embedding=table_1_schema(), numeric_columns=default_numeric_columns())

    def to_jsonable(self) -> dict:
        return {
            "embedding": self.embedding.to_jsonable(),
            "numeric_columns": list(self.numeric_columns),
            "mode_labels": list(self.mode_labels),
            "purpose_labels": list(self.purpose_labels),
        }

    @classmethod
    def from_jsonable(cls, data) -> "DatasetSchema":
        return cls(
            embedding=EmbeddingSchema.from_jsonable(data["embedding"]),
            numeric_columns=tuple(data["numeric_columns"]),
            mode_labels=tuple(data["mode_labels"]),
            purpose_labels=tuple(data["purpose_labels"]),
        )


@dataclass
class NormStats:
    num_mean: np.ndarray
    num_std: np.ndarray
    traj_mean: np.ndarray  # (2,) for longitude, latitude
    traj_std: np.ndarray

    def to_jsonable(self):
        return {
            "num_mean": self.num_mean.tolist(),
            "num_std": self.num_std.tolist(),
            "traj_mean": self.traj_mean.tolist(),
            "traj_std": self.traj_std.tolist(),
        }

    @classmethod
    def from_jsonable(cls, data):
        return cls(
            num_mean=np.asarray(data["num_mean"], dtype=np.float64),
            num_std=np.asarray(data["num_std"], dtype=np.float64),
            traj_mean=np.asarray(data["traj_mean"], dtype=np.float64),
            traj_std=np.asarray(data["traj_std"], dtype=np.float64),
        )


@dataclass
class Dataset:
    """Columnar, model-ready records plus schema and normalization stats."""

    schema: DatasetSchema
    trip_ids: list[str]
    traj: np.ndarray  # (N, 70, 4) standardized
    mask: np.ndarray  # (N, 70) bool
    cat: np.ndarray  # (N, n_cat) int64, -1 = missing
    num: np.ndarray  # (N, n_num) float64, standardized
    mode: np.ndarray  # (N,) int64, -1 = missing
    purpose: np.ndarray  # (N,)
    split: np.ndarray  # (N,) '<U5': 'train' | 'test'
    stats: NormStats | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.trip_ids)

    def indices(self, split: str | None = None, require: tuple[str, ...] = ()) -> np.ndarray:
        keep = np.ones(len(self), dtype=bool)
        if split is not None:
            keep &= self.split == split
        if "mode" in require:
            keep &= self.mode >= 0
        if "purpose" in require:
            keep &= self.purpose >= 0
        return np.flatnonzero(keep)

    # ---- persistence ----

    def save(self, path) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8") as fh:
            for i, trip_id in enumerate(self.trip_ids):
                rec = {
                    "trip_id": trip_id,
                    "split": str(self.split[i]),
                    "mode": None if self.mode[i] < 0 else int(self.mode[i]),
                    "purpose": None if self.purpose[i] < 0 else int(self.purpose[i]),
                    "cat": self.cat[i].tolist(),
                    "num": self.num[i].tolist(),
                    "mask": self.mask[i].astype(int).tolist(),
                    "traj": self.traj[i].tolist(),
                }
                fh.write(json.dumps(rec) + "\n")
        sidecar = self.sidecar_path(path)
        payload = {
            "schema": self.schema.to_jsonable(),
            "stats": self.stats.to_jsonable() if self.stats else None,
            "meta": self.meta,
            "n_records": len(self),
        }
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return sidecar

    @staticmethod
    def sidecar_path(path) -> Path:
        path = Path(path)
        return path.with_name(path.stem + ".sidecar.json")

    @classmethod
    def load(cls, path) -> "Dataset":
        path = Path(path)
        sidecar = cls.sidecar_path(path)
        if not sidecar.exists():
            raise IngestionError(f"missing sidecar file {sidecar}")
        with open(sidecar, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        schema = DatasetSchema.from_jsonable(payload["schema"])
        stats = NormStats.from_jsonable(payload["stats"]) if payload.get("stats") else None
        trip_ids, trajs, masks, cats, nums, modes, purposes, splits = ([] for _ in range(8))
        with open(path, "r", encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise ParseError(path, line_no, f"bad record: {exc}") from None
                trip_ids.append(rec["trip_id"])
                splits.append(rec["split"])
                modes.append(-1 if rec["mode"] is None else rec["mode"])
                purposes.append(-1 if rec["purpose"] is None else rec["purpose"])
                cats.append(rec["cat"])
                nums.append(rec["num"])
                masks.append(rec["mask"])
                trajs.append(rec["traj"])
        return cls(
            schema=schema,
            trip_ids=trip_ids,
            traj=np.asarray(trajs, dtype=np.float64),
            mask=np.asarray(masks, dtype=bool),
            cat=np.asarray(cats, dtype=np.int64),
            num=np.asarray(nums, dtype=np.float64),
            mode=np.asarray(modes, dtype=np.int64),
            purpose=np.asarray(purposes, dtype=np.int64),
            split=np.asarray(splits, dtype="<U5"),
            stats=stats,
            meta=payload.get("meta", {}),
        )


@dataclass
class BuildCounts:
    trips_in: int = 0
    filtered_short: int = 0
    built: int = 0
    mode_labeled: int = 0
    purpose_labeled: int = 0
    both_labeled: int = 0
    short_trip_ids: list = field(default_factory=list)


def _stratified_split(labels, fractions, seed):
    """Seeded stratified split by joint label; returns '<U5' array."""
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"split fractions {fractions} do not sum to 1")
    strata: dict[tuple, list[int]] = {}
    for i, key in enumerate(labels):
        strata.setdefault(key, []).append(i)
    out = np.empty(len(labels), dtype="<U5")
    for key in sorted(strata):
        idx = np.asarray(strata[key])
        gen = rng.stream(seed, f"split.{key}")
        perm = gen.permutation(len(idx))
        n_train = int(round(fractions[0] * len(idx)))
        out[idx[perm[:n_train]]] = "train"
        out[idx[perm[n_train:]]] = "test"
    return out


def _categorical_code(attr, raw):
    if raw is None or raw == "":
        return -1
    code = int(raw)
    if code == -1:
        return -1
    if not 0 <= code < attr.cardinality:
        raise IngestionError(
            f"attribute {attr.name!r}: code {code} outside [0, {attr.cardinality})"
        )
    return code


def build_records(trips, aux, labels, schema: DatasetSchema, *, seed: int,
                  split_fractions=(0.8, 0.2), regions=None, min_points: int = MIN_TRIP_POINTS,
                  log=None) -> tuple[Dataset, BuildCounts]:
    """Join detected trips with auxiliary rows into a standardized dataset.

    trips: list of (trip_id, [GpsPoint, ...]); aux: dict trip_id -> column
    dict; labels: dict trip_id -> (mode index or None, purpose index or None).
    Numeric columns and trajectory coordinates are standardized with
    statistics from the training split only; missing numerics impute to the
    train mean (standardized zero).
    """
    counts = BuildCounts(trips_in=len(trips))
    n_cat = len(schema.embedding.attributes)
    n_num = len(schema.numeric_columns)

    kept_ids, trajs, masks, cat_rows, num_rows, mode_l, purpose_l = [], [], [], [], [], [], []
    for trip_id, points in trips:
        if len(points) < min_points:
            counts.filtered_short += 1
            counts.short_trip_ids.append(trip_id)
            if log is not None:
                log(f"filtered trip {trip_id}: only {len(points)} points (< {min_points})")
            continue
        if trip_id not in aux:
            raise IngestionError(f"trip {trip_id!r} has no auxiliary row to join")
        row = aux[trip_id]
        first, last = points[0], points[-1]

        derived = {
            "day_of_week": day_of_week(first),
            "hour_start": hour_of(first),
            "hour_end": hour_of(last),
        }
        if regions:
            cbd = regions.get("cbd")
            island = regions.get("island")
            if cbd is not None:
                derived["cbd_origin"] = int(point_in_polygon(first.latitude, first.longitude, cbd))
                derived["cbd_destin"] = int(point_in_polygon(last.latitude, last.longitude, cbd))
            if island is not None:
                derived["mtl_origin"] = int(point_in_polygon(first.latitude, first.longitude, island))
                derived["mtl_destin"] = int(point_in_polygon(last.latitude, last.longitude, island))

        cat_row = np.empty(n_cat, dtype=np.int64)
        for j, attr in enumerate(schema.embedding.attributes):
            raw = derived.get(attr.name, row.get(attr.name))
            cat_row[j] = _categorical_code(attr, raw)

        num_row = np.full(n_num, np.nan)
        for j, col in enumerate(schema.numeric_columns):
            if col in DISTANCE_COLUMNS:
                anchor, end = DISTANCE_COLUMNS[col]
                alat, alon = row.get(f"{anchor}_lat"), row.get(f"{anchor}_lon")
                if alat in (None, "") or alon in (None, ""):
                    continue
                ref = last if end == "dest" else first
                num_row[j] = haversine_m(ref.latitude, ref.longitude, float(alat), float(alon))
            else:
                raw = row.get(col)
                if raw not in (None, ""):
                    num_row[j] = float(raw)

        mode_i, purpose_i = labels.get(trip_id, (None, None))
        kept_ids.append(trip_id)
        traj = resample(points)
        trajs.append(traj.values)
        masks.append(traj.mask)
        cat_rows.append(cat_row)
        num_rows.append(num_row)
        mode_l.append(-1 if mode_i is None else int(mode_i))
        purpose_l.append(-1 if purpose_i is None else int(purpose_i))

    unknown = set(aux) - set(tid for tid, _ in trips)
    if unknown:
        raise IngestionError(f"auxiliary rows reference unknown trip ids: {sorted(unknown)[:5]}")

    counts.built = len(kept_ids)
    if counts.built == 0:
        raise ContractError("no trips survived filtering; nothing to build")

    traj_arr = np.asarray(trajs)
    mask_arr = np.asarray(masks)
    cat_arr = np.asarray(cat_rows)
    num_arr = np.asarray(num_rows)
    mode_arr = np.asarray(mode_l, dtype=np.int64)
    purpose_arr = np.asarray(purpose_l, dtype=np.int64)
    counts.mode_labeled = int((mode_arr >= 0).sum())
    counts.purpose_labeled = int((purpose_arr >= 0).sum())
    counts.both_labeled = int(((mode_arr >= 0) & (purpose_arr >= 0)).sum())

    split = _stratified_split(
        [(int(m), int(p)) for m, p in zip(mode_arr, purpose_arr)], split_fractions, seed
    )
    train = split == "train"
    if not train.any():
        raise ContractError("training split is empty; check split fractions")

    with np.errstate(invalid="ignore"):
        num_mean = np.nanmean(num_arr[train], axis=0)
        num_std = np.nanstd(num_arr[train], axis=0)
    num_mean = np.where(np.isfinite(num_mean), num_mean, 0.0)
    num_std = np.where(np.isfinite(num_std) & (num_std > 1e-12), num_std, 1.0)
    num_arr = (num_arr - num_mean) / num_std
    num_arr = np.where(np.isfinite(num_arr), num_arr, 0.0)

    coords = traj_arr[train][:, :, 2:4][mask_arr[train]]
    traj_mean = coords.mean(axis=0)
    traj_std = coords.std(axis=0)
    traj_std = np.where(traj_std > 1e-12, traj_std, 1.0)
    traj_arr = traj_arr.copy()
    traj_arr[:, :, 2:4] = (traj_arr[:, :, 2:4] - traj_mean) / traj_std
    traj_arr[~mask_arr] = 0.0

    dataset = Dataset(
        schema=schema,
        trip_ids=kept_ids,
        traj=traj_arr,
        mask=mask_arr,
        cat=cat_arr,
        num=num_arr,
        mode=mode_arr,
        purpose=purpose_arr,
        split=split,
        stats=NormStats(num_mean, num_std, traj_mean, traj_std),
        meta={"seed": seed, "split_fractions": list(split_fractions)},
    )
    return dataset, counts


# --- delimited input files ----------------------------------------------------


def load_gps_file(path) -> dict[str, list[GpsPoint]]:
    """Delimited text: respondent_id, iso_datetime, latitude, longitude.
    A header row is skipped when present. Returns streams per respondent in
    file order."""
    streams: dict[str, list[GpsPoint]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if line_no == 1 and parts[0] == "respondent_id":
                continue
            if len(parts) != 4:
                raise ParseError(path, line_no, f"expected 4 fields, got {len(parts)}")
            respondent, stamp, lat, lon = parts
            try:
                dt = datetime.fromisoformat(stamp)
            except ValueError:
                raise ParseError(path, line_no, f"malformed datetime {stamp!r}", column="iso_datetime") from None
            try:
                point = point_from_datetime(dt, float(lat), float(lon))
            except (ValueError, ContractError) as exc:
                raise ParseError(path, line_no, f"bad coordinates: {exc}", column="latitude/longitude") from None
            streams.setdefault(respondent, []).append(point)
    return streams


def load_aux_file(path, schema: DatasetSchema):
    """Header-led delimited table keyed by trip_id. Optional mode/purpose
    columns carry label names from the schema vocabularies (blank = missing).
    Returns (aux rows by trip id, labels by trip id)."""
    aux: dict[str, dict] = {}
    labels: dict[str, tuple[int | None, int | None]] = {}
    mode_idx = {name: i for i, name in enumerate(schema.mode_labels)}
    purpose_idx = {name: i for i, name in enumerate(schema.purpose_labels)}
    with open(path, "r", encoding="utf-8") as fh:
        header: list[str] | None = None
        for line_no, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if header is None:
                header = parts
                if "trip_id" not in header:
                    raise ParseError(path, line_no, "header must include trip_id")
                continue
            if len(parts) != len(header):
                raise ParseError(path, line_no, f"expected {len(header)} fields, got {len(parts)}")
            row = dict(zip(header, parts))
            trip_id = row.pop("trip_id")
            if trip_id in aux:
                raise ParseError(path, line_no, f"duplicate trip_id {trip_id!r}")
            mode_name = row.pop("mode", "")
            purpose_name = row.pop("purpose", "")
            if mode_name and mode_name not in mode_idx:
                raise ParseError(path, line_no, f"unknown mode label {mode_name!r}", column="mode")
            if purpose_name and purpose_name not in purpose_idx:
                raise ParseError(path, line_no, f"unknown purpose label {purpose_name!r}", column="purpose")
            aux[trip_id] = row
            labels[trip_id] = (
                mode_idx.get(mode_name) if mode_name else None,
                purpose_idx.get(purpose_name) if purpose_name else None,
            )
    if header is None:
        raise ParseError(path, 1, "empty auxiliary table")
    return aux, labels


def detect_trips(streams: dict[str, list[GpsPoint]], index: StationIndex | None):
    """Run trip breaking per respondent; trip ids are '<respondent>_<k>'.

    Returns (trips, n_segments_before_stitching) so callers can report how
    many stitches the transit rules performed.
    """
    trips = []
    raw_segments = 0
    for respondent in streams:
        points = streams[respondent]
        raw_segments += len(split_on_dwell_gaps(points))
        for k, seg in enumerate(break_trips(points, index)):
            trips.append((f"{respondent}_{k}", seg))
    return trips, raw_segments
