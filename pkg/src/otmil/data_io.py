"""Bag files, manifests, fold assignment and the synthetic bag generator.

Binary bag layout (little-endian, see docs/FORMATS.md)::

    offset  size  field
    0       8     magic  b"OTMILBAG"
    8       2     version (uint16, currently 1)
    10      4     N      (uint32, instances)
    14      4     D      (uint32, feature width)
    18      8     time   (float64)
    26      1     event  (0 or 1)
    27      4ND   features, float32, row-major
    27+4ND  4     CRC-32 of every preceding byte
"""

from __future__ import annotations

import csv
import io
import math
import os
import struct
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MAGIC = b"OTMILBAG"
VERSION = 1
_HEADER = struct.Struct("<8sHIIdB")

MANIFEST_COLUMNS = ("bag_id", "path", "time", "event", "fold", "cohort")


class DataError(ValueError):
    """Malformed dataset input."""


class BagFormatError(DataError):
    code = "corrupt"


class BadMagicError(BagFormatError):
    code = "bad_magic"


class VersionMismatchError(BagFormatError):
    code = "version"


class TruncatedBagError(BagFormatError):
    code = "truncated"


class ChecksumError(BagFormatError):
    code = "checksum"


@dataclass
class Bag:
    """One patient: instance features plus the survival label."""

    features: np.ndarray
    time: float
    event: bool
    bag_id: str = ""
    instance_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise DataError(f"bag {self.bag_id!r}: features must be N x D with N >= 1")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"bag {self.bag_id!r}: non-finite feature values")
        if not (self.time > 0 and math.isfinite(self.time)):
            raise DataError(f"bag {self.bag_id!r}: time must be positive")
        self.time = float(self.time)
        self.event = bool(self.event)
        if not self.instance_ids:
            self.instance_ids = [str(i) for i in range(self.n_instances)]
        if len(self.instance_ids) != self.n_instances:
            raise DataError(f"bag {self.bag_id!r}: instance_ids length mismatch")

    @property
    def n_instances(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def encode_bag(bag: Bag) -> bytes:
    n, d = bag.features.shape
    header = _HEADER.pack(MAGIC, VERSION, n, d, bag.time, int(bag.event))
    payload = header + np.ascontiguousarray(bag.features, dtype="<f4").tobytes()
    return payload + struct.pack("<I", zlib.crc32(payload))


def decode_bag(data: bytes, bag_id: str = "") -> Bag:
    if len(data) < _HEADER.size:
        raise TruncatedBagError(f"{bag_id or 'bag'}: {len(data)} bytes is shorter than the header")
    magic, version, n, d, time, event = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagicError(f"{bag_id or 'bag'}: bad magic {magic!r}")
    if version != VERSION:
        raise VersionMismatchError(f"{bag_id or 'bag'}: unsupported version {version}")
    expected = _HEADER.size + 4 * n * d + 4
    if len(data) < expected:
        raise TruncatedBagError(f"{bag_id or 'bag'}: {len(data)} bytes, header declares {expected}")
    if len(data) > expected:
        raise BagFormatError(f"{bag_id or 'bag'}: {len(data) - expected} trailing bytes")
    (crc,) = struct.unpack_from("<I", data, expected - 4)
    if zlib.crc32(data[: expected - 4]) != crc:
        raise ChecksumError(f"{bag_id or 'bag'}: checksum mismatch")
    if event not in (0, 1):
        raise BagFormatError(f"{bag_id or 'bag'}: event byte {event}")
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    return Bag(feats.astype(np.float64), time, bool(event), bag_id)


def write_bag(bag: Bag, path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "xb") as fh:
        fh.write(encode_bag(bag))
    os.replace(tmp, path)


def read_bag(path, bag_id: str | None = None) -> Bag:
    path = Path(path)
    return decode_bag(path.read_bytes(), bag_id if bag_id is not None else path.stem)


# ---------------------------------------------------------------------------
# manifest


@dataclass(frozen=True)
class ManifestRecord:
    bag_id: str
    path: str
    time: float
    event: bool
    fold: int | None = None
    cohort: str = "-"


def format_float(x: float) -> str:
    """17 significant digits; round-trips every float64."""
    return f"{x:.17g}"


def write_manifest(records, path) -> None:
    buf = io.StringIO()
    buf.write("\t".join(MANIFEST_COLUMNS) + "\n")
    for r in records:
        fold = "-" if r.fold is None else str(r.fold)
        row = (r.bag_id, r.path, format_float(r.time), str(int(r.event)), fold, r.cohort)
        buf.write("\t".join(row) + "\n")
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_manifest(path, check_paths: bool = True) -> list[ManifestRecord]:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise DataError(f"{path}: missing or wrong header line")
    records, seen = [], set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != len(MANIFEST_COLUMNS):
            raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields")
        bag_id, rel, time, event, fold, cohort = parts
        if bag_id in seen:
            raise DataError(f"{path}:{lineno}: duplicate bag_id {bag_id!r}")
        seen.add(bag_id)
        try:
            rec = ManifestRecord(
                bag_id, rel, float(time), bool(int(event)),
                None if fold == "-" else int(fold), cohort,
            )
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from None
        if check_paths and not (path.parent / rel).exists():
            raise DataError(f"{path}:{lineno}: bag file {rel} does not exist")
        records.append(rec)
    return records


def load_bags(manifest_path, records=None) -> list[Bag]:
    manifest_path = Path(manifest_path)
    if records is None:
        records = read_manifest(manifest_path)
    return [read_bag(manifest_path.parent / r.path, r.bag_id) for r in records]


def split_folds(records, k: int, seed: int) -> list[ManifestRecord]:
    """Event-stratified fold assignment.

    Events, then censored bags, are shuffled and dealt round-robin so fold
    sizes and event counts each differ by at most one.
    """
    records = list(records)
    if k < 2:
        raise DataError("need at least two folds")
    n_events = sum(r.event for r in records)
    if len(records) < k or n_events < k:
        raise DataError(f"{len(records)} bags / {n_events} events cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    events = [i for i, r in enumerate(records) if r.event]
    censored = [i for i, r in enumerate(records) if not r.event]
    order = [events[i] for i in rng.permutation(len(events))]
    order += [censored[i] for i in rng.permutation(len(censored))]
    folds = [0] * len(records)
    for slot, idx in enumerate(order):
        folds[idx] = slot % k
    return [replace(r, fold=f) for r, f in zip(records, folds)]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass(frozen=True)
class SynthConfig:
    """Long-tailed mixture bags with a hazard driven by one rare component.

    Component ``c`` has base weight proportional to ``(c + 1) ** -tail_exponent``.
    Each bag multiplies the prognostic component's weight by
    ``exp(enrichment_spread * U(-1, 1))`` before sampling instances.  The true
    log-hazard is ``effect_size * prevalence / base_prevalence``.
    """

    n_bags: int = 400
    min_instances: int = 60
    max_instances: int = 200
    dim: int = 32
    n_morph_components: int = 6
    tail_exponent: float = 1.0
    prognostic_component: int = -1
    effect_size: float = 2.0
    censoring_rate: float = 0.3
    noise_sigma: float = 1.0
    enrichment_spread: float = 2.0
    n_folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.tail_exponent <= 0:
            raise DataError("tail_exponent must be positive")
        if not (0.0 <= self.censoring_rate < 1.0):
            raise DataError("censoring_rate must lie in [0, 1)")
        if not (1 <= self.min_instances <= self.max_instances):
            raise DataError("instance range must satisfy 1 <= min <= max")
        if self.n_bags < 1 or self.dim < 1 or self.n_morph_components < 1:
            raise DataError("n_bags, dim and n_morph_components must be positive")
        if not (-self.n_morph_components <= self.prognostic_component < self.n_morph_components):
            raise DataError("prognostic_component out of range")

    @property
    def prognostic_index(self) -> int:
        return self.prognostic_component % self.n_morph_components

    def base_weights(self) -> np.ndarray:
        w = np.arange(1, self.n_morph_components + 1, dtype=np.float64) ** -self.tail_exponent
        return w / w.sum()


@dataclass
class GroundTruth:
    bag_ids: list[str]
    enrichment: np.ndarray
    prevalence: np.ndarray
    log_hazard: np.ndarray
    labels: list[np.ndarray]
    base_prevalence: float
    effect_size: float

    @property
    def hazard(self) -> np.ndarray:
        return np.exp(self.log_hazard)


def hazard_from_prevalence(prevalence, base_prevalence: float, effect_size: float) -> np.ndarray:
    return effect_size * np.asarray(prevalence, dtype=np.float64) / base_prevalence


def generate_bags(cfg: SynthConfig) -> tuple[list[Bag], GroundTruth]:
    """Draw the synthetic cohort in memory (single RNG stream, fixed order)."""
    rng = np.random.default_rng(cfg.seed)
    weights = cfg.base_weights()
    prog = cfg.prognostic_index
    means = rng.normal(0.0, 1.0, size=(cfg.n_morph_components, cfg.dim))
    width = len(str(cfg.n_bags - 1))
    bags, labels = [], []
    enrich = np.empty(cfg.n_bags)
    prev = np.empty(cfg.n_bags)
    for b in range(cfg.n_bags):
        n = int(rng.integers(cfg.min_instances, cfg.max_instances + 1))
        enrich[b] = math.exp(cfg.enrichment_spread * rng.uniform(-1.0, 1.0))
        wb = weights.copy()
        wb[prog] *= enrich[b]
        wb /= wb.sum()
        lab = rng.choice(cfg.n_morph_components, size=n, p=wb)
        feats = means[lab] + cfg.noise_sigma * rng.normal(size=(n, cfg.dim))
        prev[b] = np.mean(lab == prog)
        log_h = float(hazard_from_prevalence(prev[b], weights[prog], cfg.effect_size))
        true_time = rng.exponential(math.exp(-log_h))
        censored = rng.random() < cfg.censoring_rate
        cut = 1.0 - rng.random()
        time = true_time * cut if censored else true_time
        if time <= 0:
            time = np.nextafter(0.0, 1.0)
        feats32 = feats.astype(np.float32).astype(np.float64)
        bags.append(Bag(feats32, time, not censored, f"bag{b:0{width}d}"))
        labels.append(lab)
    truth = GroundTruth(
        [bag.bag_id for bag in bags], enrich, prev,
        hazard_from_prevalence(prev, weights[prog], cfg.effect_size),
        labels, float(weights[prog]), cfg.effect_size,
    )
    return bags, truth


def write_ground_truth(truth: GroundTruth, bags, out_dir) -> None:
    out_dir = Path(out_dir)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([
        "bag_id", "n_instances", "enrichment", "prevalence", "base_prevalence",
        "effect_size", "log_hazard", "hazard", "time", "event",
    ])
    for i, bag in enumerate(bags):
        w.writerow([
            bag.bag_id, bag.n_instances, format_float(truth.enrichment[i]),
            format_float(truth.prevalence[i]), format_float(truth.base_prevalence),
            format_float(truth.effect_size), format_float(truth.log_hazard[i]),
            format_float(truth.hazard[i]), format_float(bag.time), int(bag.event),
        ])
    (out_dir / "ground_truth.csv").write_text(buf.getvalue(), encoding="utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["bag_id", "instance_id", "component"])
    for bag, lab in zip(bags, truth.labels):
        for iid, c in zip(bag.instance_ids, lab):
            w.writerow([bag.bag_id, iid, int(c)])
    (out_dir / "instances.csv").write_text(buf.getvalue(), encoding="utf-8")


def read_ground_truth(out_dir) -> GroundTruth:
    out_dir = Path(out_dir)
    with open(out_dir / "ground_truth.csv", newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    with open(out_dir / "instances.csv", newline="", encoding="utf-8") as fh:
        inst = list(csv.DictReader(fh))
    by_bag: dict[str, list[int]] = {}
    for row in inst:
        by_bag.setdefault(row["bag_id"], []).append(int(row["component"]))
    if not rows:
        raise DataError(f"{out_dir}: empty ground truth")
    ids = [r["bag_id"] for r in rows]
    return GroundTruth(
        ids,
        np.array([float(r["enrichment"]) for r in rows]),
        np.array([float(r["prevalence"]) for r in rows]),
        np.array([float(r["log_hazard"]) for r in rows]),
        [np.array(by_bag.get(i, []), dtype=np.int64) for i in ids],
        base_prevalence=float(rows[0]["base_prevalence"]),
        effect_size=float(rows[0]["effect_size"]),
    )


def synth_dataset(cfg: SynthConfig, out_dir) -> tuple[list[ManifestRecord], GroundTruth]:
    """Write bags, manifest (with folds), and ground truth under ``out_dir``."""
    out_dir = Path(out_dir)
    (out_dir / "bags").mkdir(parents=True, exist_ok=True)
    bags, truth = generate_bags(cfg)
    records = []
    for bag in bags:
        rel = f"bags/{bag.bag_id}.bag"
        target = out_dir / rel
        if target.exists():
            target.unlink()
        write_bag(bag, target)
        records.append(ManifestRecord(bag.bag_id, rel, bag.time, bag.event, None, "synthetic"))
    if cfg.n_folds >= 2:
        records = split_folds(records, cfg.n_folds, cfg.seed)
    write_manifest(records, out_dir / "manifest.tsv")
    write_ground_truth(truth, bags, out_dir)
    return records, truth
