"""Run configuration, synthetic hierarchical data, and CSV files."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
import os
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from hypalign.hierarchy import HierarchyForest

METRICS_COLUMNS = (
    "epoch",
    "split",
    "level",
    "clean_acc",
    "robust_acc",
    "loss_total",
    "loss_hita",
    "loss_vic",
    "loss_gap_label",
    "loss_gap_intra",
)

STRATEGIES = ("leaf-only", "per-level", "universal")
WEIGHTINGS = ("equal", "linear")
NEGATIVES = ("none", "lower", "upper", "both")
REDUCTIONS = ("sum", "mean")
LEAF_ALIGNMENTS = ("average", "samples")


class ConfigError(ValueError):
    pass


class DataFormatError(ValueError):
    pass


@dataclass
class RunConfig:
    # geometry and loss hyperparameters
    r: float = 1.0
    xi: float = 1e-5
    zeta_vic: float = 0.05
    zeta_gap: float = 0.01
    lambda1: float = 0.3
    lambda2: float = 0.1
    temperature: float = 1.0
    weighting: str = "linear"
    negatives: str = "both"
    loss_reduction: str = "mean"
    leaf_alignment: str = "average"
    aux_on_clean: bool = False
    # threat model
    eps_x: float = 0.025
    alpha_x: float = 0.025
    eps_t: float = 2e-4
    alpha_t: float = 1e-4
    init_noise: float = 1e-3
    pgd_steps_train: int = 3
    pgd_steps_eval: int = 20
    eps_x_eval: float = 0.025
    alpha_x_eval: float = 0.0025
    strategy: str = "universal"
    attack_full_objective: bool = False
    # optimisation
    learning_rate: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    epochs: int = 30
    seed: int = 0
    # model and data
    embed_dim: int = 16
    feature_dim: int = 32
    hidden_dim: int = 0
    samples_per_leaf: int = 64
    test_samples_per_leaf: int = 256
    level_spread: float = 0.25
    leaf_noise: float = 0.25
    data_seed: int = 0
    forest: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("r", "learning_rate", "temperature"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        for name in (
            "xi", "zeta_vic", "zeta_gap", "lambda1", "lambda2", "eps_x", "alpha_x", "eps_t",
            "alpha_t", "init_noise", "eps_x_eval", "alpha_x_eval", "momentum",
            "level_spread", "leaf_noise",
        ):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigError(f"{name} must be a finite non-negative number")
        for name in ("pgd_steps_train", "pgd_steps_eval", "epochs", "hidden_dim"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "samples_per_leaf", "test_samples_per_leaf"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.embed_dim < 2 or self.feature_dim < 2:
            raise ConfigError("embed_dim and feature_dim must be >= 2")
        if self.xi >= 1:
            raise ConfigError("xi must be < 1")
        for name, allowed in (
            ("strategy", STRATEGIES),
            ("weighting", WEIGHTINGS),
            ("negatives", NEGATIVES),
            ("loss_reduction", REDUCTIONS),
            ("leaf_alignment", LEAF_ALIGNMENTS),
        ):
            if getattr(self, name) not in allowed:
                raise ConfigError(f"{name} must be one of {allowed}, got {getattr(self, name)!r}")

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_format_value(getattr(self, f.name))}\n" for f in fields(self))

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(name: str, kind: str, text: str):
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {text!r} as {kind}") from None
    return text


_FIELD_KINDS = {f.name: f.type for f in fields(RunConfig)}


def config_from_mapping(values: dict[str, str], base: RunConfig | None = None) -> RunConfig:
    """Overlay string-valued settings onto ``base``; unknown keys are errors."""
    out = {}
    for key, text in values.items():
        if key not in _FIELD_KINDS:
            raise ConfigError(f"unknown config key {key!r}")
        out[key] = _coerce(key, _FIELD_KINDS[key], str(text).strip())
    base = base or RunConfig()
    return dataclasses.replace(base, **out)


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse flat ``key = value`` text."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return config_from_mapping(values, base)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


# -- synthetic data -------------------------------------------------------


@dataclass(frozen=True)
class LabeledFeature:
    features: np.ndarray
    label: str


def class_means(forest: HierarchyForest, feature_dim: int, level_spread: float, seed: int) -> dict:
    """Recursive class means of the first tree, keyed by ``(level, index)``.

    A node at level ``l`` sits at its parent's mean plus isotropic Gaussian
    noise of scale ``level_spread * (l + 1) / L``; roots are offset from 0.
    Noise comes from numpy's PCG64 generator, so the draw is platform stable.
    """
    tree = forest[0]
    L = max(tree.depth, 1)
    rng = np.random.Generator(np.random.PCG64(seed))
    means = {}
    for level in range(tree.depth, -1, -1):
        scale = level_spread * (level + 1) / L
        for c in range(tree.num_classes(level)):
            p = tree.parent(level, c)
            base = np.zeros(feature_dim) if p is None else means[(level + 1, p)]
            means[(level, c)] = base + scale * rng.standard_normal(feature_dim)
    return means


def generate_synthetic(
    forest: HierarchyForest,
    samples_per_leaf: int,
    feature_dim: int,
    level_spread: float,
    leaf_noise: float,
    seed: int,
    split: int = 0,
) -> list[LabeledFeature]:
    """Seeded Gaussian samples around recursively generated class means.

    ``seed`` fixes the class means; ``split`` selects an independent noise
    stream, so train (0) and test (1) share means but not samples.
    """
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    means = class_means(forest, feature_dim, level_spread, seed)
    rng = np.random.Generator(np.random.PCG64([seed, split, 1]))
    out = []
    for c, name in enumerate(forest.leaves):
        mean = means[(0, c)]
        noise = rng.standard_normal((samples_per_leaf, feature_dim))
        for row in mean + leaf_noise * noise:
            out.append(LabeledFeature(row, name))
    return out


def stack(records: Sequence[LabeledFeature], forest: HierarchyForest):
    """Feature matrix (N, n) and leaf index vector (N,) as numpy arrays."""
    if not records:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    x = np.stack([r.features for r in records]).astype(np.float64)
    y = np.array([forest.leaf_index(r.label) for r in records], dtype=np.int64)
    return x, y


# -- files ------------------------------------------------------------------


def atomic_write_text(path, text: str) -> None:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def features_to_csv_text(records: Iterable[LabeledFeature]) -> str:
    records = list(records)
    n = len(records[0].features) if records else 0
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["label"] + [f"f{i}" for i in range(n)])
    for rec in records:
        if len(rec.features) != n:
            raise DataFormatError("records have differing feature dimensions")
        w.writerow([rec.label] + [repr(float(v)) for v in rec.features])
    return buf.getvalue()


def write_features_csv(records: Iterable[LabeledFeature], path) -> None:
    atomic_write_text(path, features_to_csv_text(records))


def load_features_csv(path, leaves: Iterable[str] | None = None) -> list[LabeledFeature]:
    """Read ``label,f0,...,f{n-1}`` rows; labels are checked against ``leaves`` if given."""
    known = set(leaves) if leaves is not None else None
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataFormatError(f"{path}: missing header")
        if not header or header[0] != "label" or header[1:] != [f"f{i}" for i in range(len(header) - 1)]:
            raise DataFormatError(f"{path}: header must be label,f0,...,f{{n-1}}")
        n = len(header) - 1
        out = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != n + 1:
                raise DataFormatError(f"{path}:{lineno}: expected {n + 1} cells, got {len(row)}")
            label = row[0]
            if known is not None and label not in known:
                raise DataFormatError(f"{path}:{lineno}: unknown label {label!r}")
            try:
                values = np.array([float(v) for v in row[1:]], dtype=np.float64)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: non-numeric feature cell") from None
            out.append(LabeledFeature(values, label))
    return out


def _metric_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def metrics_to_csv_text(records: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for rec in records:
        extra = set(rec) - set(METRICS_COLUMNS)
        if extra:
            raise DataFormatError(f"unknown metrics columns {sorted(extra)}")
        w.writerow([_metric_cell(rec.get(col)) for col in METRICS_COLUMNS])
    return buf.getvalue()


def write_metrics_csv(records: Iterable[dict], path) -> None:
    """Write metrics rows with the fixed column order of ``METRICS_COLUMNS``."""
    atomic_write_text(path, metrics_to_csv_text(records))


def read_metrics_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))
