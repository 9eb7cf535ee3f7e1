"""
Embedding datasets: ingestion, channel-wise mean pooling, split discipline and the
seeded synthetic ID/OOD benchmark.

File contracts:

- Embedding CSV: header `id,label,f0,...,f{h-1}`; label is `feasible`, `infeasible` or empty.
- Embedding XLSX: same columns in the first sheet.
- Node features: `#assembly <id> [label]` followed by P rows of h floats (whitespace or
  comma separated); each block is mean-pooled into one embedding on load.
"""

import csv
import logging
import math
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union
from zipfile import BadZipFile

import numpy as np
from openpyxl import load_workbook
from openpyxl.utils.exceptions import InvalidFileException
from pydantic import BaseModel, Field, model_validator
from scipy.special import logsumexp
from scipy.stats import multivariate_normal, ortho_group

from feasiflow.app.errors import DataError, ParseError, SplitError, UsageError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = ".17g"


class Label(str, Enum):
    FEASIBLE = "feasible"
    INFEASIBLE = "infeasible"


class DatasetFormat(str, Enum):
    CSV = "csv"
    XLSX = "xlsx"
    NODES = "nodes"


def parse_label(token: Optional[str]) -> Optional[Label]:
    if token is None:
        return None
    token = str(token).strip()
    if token == "":
        return None
    return Label(token)


def format_float(value: float) -> str:
    return format(float(value), FLOAT_FORMAT)


# ============================================================================
# DATASET TYPES
# ============================================================================

@dataclass
class LabeledDataset:
    embeddings: np.ndarray
    labels: List[Optional[Label]]
    ids: List[str]

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2:
            raise DataError(f"embeddings must be an N x h matrix, got shape {self.embeddings.shape}")
        n = self.embeddings.shape[0]
        if len(self.labels) != n or len(self.ids) != n:
            raise DataError(
                f"dataset has {n} rows but {len(self.labels)} labels and {len(self.ids)} ids"
            )
        self.labels = [None if label is None else Label(label) for label in self.labels]
        self.ids = [str(i) for i in self.ids]
        if len(set(self.ids)) != n:
            raise DataError("dataset ids must be unique")

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        indices = np.asarray(indices, dtype=np.int64)
        return LabeledDataset(
            embeddings=self.embeddings[indices],
            labels=[self.labels[i] for i in indices],
            ids=[self.ids[i] for i in indices],
        )

    def feasible_only(self) -> "LabeledDataset":
        return self.subset([i for i, label in enumerate(self.labels) if label is Label.FEASIBLE])

    def training_rows(self) -> "LabeledDataset":
        """Feasible and unlabeled rows. Infeasible rows are dropped with a warning."""
        keep = [i for i, label in enumerate(self.labels) if label is not Label.INFEASIBLE]
        dropped = len(self) - len(keep)
        if dropped:
            logger.warning("dropped %d infeasible rows from the training data", dropped)
        return self.subset(keep)

    def count(self, label: Optional[Label]) -> int:
        return sum(1 for item in self.labels if item is label)

    def has_both_labels(self) -> bool:
        return self.count(Label.FEASIBLE) > 0 and self.count(Label.INFEASIBLE) > 0

    def positive_mask(self) -> np.ndarray:
        """True where the row is feasible (the positive class); every row must be labeled."""
        if any(label is None for label in self.labels):
            raise DataError("positive_mask needs every row to be labeled")
        return np.array([label is Label.FEASIBLE for label in self.labels], dtype=bool)

    @classmethod
    def empty(cls, dim: int) -> "LabeledDataset":
        return cls(np.zeros((0, dim)), [], [])


@dataclass
class NodeFeatureBlock:
    assembly_id: str
    features: np.ndarray  # (P, h)
    label: Optional[Label] = None


def mean_pool(block: Union[NodeFeatureBlock, np.ndarray]) -> np.ndarray:
    """Column-wise mean over part nodes; output length h for any part count P >= 1."""
    features = block.features if isinstance(block, NodeFeatureBlock) else block
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise DataError(f"cannot pool an empty node-feature block (shape {features.shape})")
    return np.mean(features, axis=0)


# ============================================================================
# LOADING / SAVING
# ============================================================================

def _feature_columns(header: Sequence[str], path: Path) -> int:
    names = [str(h).strip() if h is not None else "" for h in header]
    if len(names) < 3 or names[0] != "id" or names[1] != "label":
        raise ParseError("header must start with id,label and have at least one feature column",
                         line=1, path=str(path))
    for k, name in enumerate(names[2:]):
        if name != f"f{k}":
            raise ParseError(f"feature column {k + 2} must be named f{k}, got {name!r}",
                             line=1, path=str(path))
    return len(names) - 2


def _parse_rows(rows: Iterable[Tuple[int, Sequence]], dim: int, path: Path) -> LabeledDataset:
    embeddings, labels, ids, seen = [], [], [], {}
    for line, cells in rows:
        if len(cells) != dim + 2:
            raise ParseError(f"expected {dim + 2} cells, found {len(cells)}", line=line, path=str(path))
        row_id = "" if cells[0] is None else str(cells[0]).strip()
        if not row_id:
            raise ParseError("missing id", line=line, path=str(path))
        if row_id in seen:
            raise ParseError(f"duplicate id {row_id!r} (first on line {seen[row_id]})", line=line, path=str(path))
        try:
            label = parse_label(cells[1])
        except ValueError:
            raise ParseError(f"unknown label {cells[1]!r}", line=line, path=str(path)) from None
        try:
            values = [float(cell) for cell in cells[2:]]
        except (TypeError, ValueError):
            raise ParseError("non-numeric feature value", line=line, path=str(path)) from None
        if not all(math.isfinite(v) for v in values):
            raise ParseError("non-finite feature value", line=line, path=str(path))
        seen[row_id] = line
        ids.append(row_id)
        labels.append(label)
        embeddings.append(values)
    matrix = np.array(embeddings, dtype=np.float64).reshape(len(embeddings), dim)
    return LabeledDataset(matrix, labels, ids)


def _load_csv(path: Path) -> LabeledDataset:
    with path.open("r", encoding="utf-8-sig", newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None:
            raise ParseError("file is empty", line=1, path=str(path))
        dim = _feature_columns(header, path)
        rows = [(reader.line_num, row) for row in reader if row]
    return _parse_rows(rows, dim, path)


def _load_xlsx(path: Path) -> LabeledDataset:
    try:
        workbook = load_workbook(filename=path, read_only=True, data_only=True)
    except (InvalidFileException, BadZipFile):
        raise ParseError("file is not a readable XLSX workbook", path=str(path)) from None
    try:
        sheet = workbook.worksheets[0]
        all_rows = list(sheet.iter_rows(values_only=True))
    finally:
        workbook.close()
    if not all_rows:
        raise ParseError("workbook is empty", line=1, path=str(path))
    header = list(all_rows[0])
    while header and header[-1] is None:
        header.pop()
    dim = _feature_columns(header, path)
    rows = []
    for number, row in enumerate(all_rows[1:], start=2):
        if not any(cell is not None for cell in row):
            continue
        cells = list(row)
        while len(cells) > dim + 2 and cells[-1] is None:
            cells.pop()
        rows.append((number, cells))
    return _parse_rows(rows, dim, path)


def load_node_features(path: Union[str, Path]) -> List[NodeFeatureBlock]:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"node-feature file not found: {path}")
    blocks: List[NodeFeatureBlock] = []
    current: Optional[Tuple[int, str, Optional[Label], List[List[float]]]] = None
    dim: Optional[int] = None
    seen = set()

    def close(block):
        line, block_id, label, rows = block
        if not rows:
            raise ParseError(f"assembly {block_id!r} has no part rows", line=line, path=str(path))
        blocks.append(NodeFeatureBlock(block_id, np.array(rows, dtype=np.float64), label))

    try:
        with path.open("r", encoding="utf-8-sig") as handle:
            for line_no, raw in enumerate(handle, start=1):
                text = raw.strip()
                if not text:
                    continue
                if text.startswith("#assembly"):
                    if current is not None:
                        close(current)
                    parts = text.split()
                    if len(parts) not in (2, 3):
                        raise ParseError("expected '#assembly <id> [label]'", line=line_no, path=str(path))
                    if parts[1] in seen:
                        raise ParseError(f"duplicate id {parts[1]!r}", line=line_no, path=str(path))
                    try:
                        label = parse_label(parts[2]) if len(parts) == 3 else None
                    except ValueError:
                        raise ParseError(f"unknown label {parts[2]!r}", line=line_no, path=str(path)) from None
                    seen.add(parts[1])
                    current = (line_no, parts[1], label, [])
                    continue
                if current is None:
                    raise ParseError("feature row before the first '#assembly' line", line=line_no, path=str(path))
                try:
                    values = [float(tok) for tok in text.replace(",", " ").split()]
                except ValueError:
                    raise ParseError("non-numeric feature value", line=line_no, path=str(path)) from None
                if not all(math.isfinite(v) for v in values):
                    raise ParseError("non-finite feature value", line=line_no, path=str(path))
                if dim is None:
                    dim = len(values)
                if len(values) != dim:
                    raise ParseError(f"expected {dim} values, found {len(values)}", line=line_no, path=str(path))
                current[3].append(values)
    except UnicodeDecodeError:
        raise ParseError("file is not valid UTF-8", path=str(path)) from None
    if current is not None:
        close(current)
    if not blocks:
        raise ParseError("file contains no assemblies", line=1, path=str(path))
    return blocks


def pool_node_features(blocks: Sequence[NodeFeatureBlock]) -> LabeledDataset:
    return LabeledDataset(
        embeddings=np.stack([mean_pool(block) for block in blocks]),
        labels=[block.label for block in blocks],
        ids=[block.assembly_id for block in blocks],
    )


def detect_format(path: Union[str, Path]) -> DatasetFormat:
    suffix = Path(path).suffix.lower()
    if suffix in (".xlsx", ".xlsm"):
        return DatasetFormat.XLSX
    if suffix in (".nodes", ".txt"):
        return DatasetFormat.NODES
    return DatasetFormat.CSV


def load_dataset(path: Union[str, Path], format: Optional[DatasetFormat] = None) -> LabeledDataset:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"dataset not found: {path}")
    fmt = DatasetFormat(format) if format is not None else detect_format(path)
    if fmt is DatasetFormat.XLSX:
        data = _load_xlsx(path)
    elif fmt is DatasetFormat.NODES:
        data = pool_node_features(load_node_features(path))
    else:
        try:
            data = _load_csv(path)
        except UnicodeDecodeError:
            raise ParseError("file is not valid UTF-8", path=str(path)) from None
    logger.info("loaded %d rows (h=%d) from %s", len(data), data.dim, path)
    return data


def save_dataset(data: LabeledDataset, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["id", "label"] + [f"f{k}" for k in range(data.dim)])
        for row_id, label, values in zip(data.ids, data.labels, data.embeddings):
            writer.writerow([row_id, "" if label is None else label.value] + [format_float(v) for v in values])
    return path


# ============================================================================
# SPLITS
# ============================================================================

def _per_class(fraction: float, total: int) -> int:
    return int(math.floor(fraction * total / 2.0 + 1e-9))


def make_splits(
    data: LabeledDataset, val_frac: float, test_frac: float, seed: int
) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """
    Train holds feasible rows only; val and test each hold equal feasible/infeasible counts.

    Each balanced split gets floor(frac * N / 2) rows per class, shrunk proportionally when
    the smaller class cannot cover both. Feasible rows left over go to train; infeasible
    rows left over are dropped and logged.
    """
    for name, value in (("val_frac", val_frac), ("test_frac", test_frac)):
        if not 0.0 < value < 1.0:
            raise SplitError(f"{name} must lie in (0, 1), got {value}")
    if val_frac + test_frac >= 1.0:
        raise SplitError(f"val_frac + test_frac must be < 1, got {val_frac + test_frac}")

    feasible = np.array([i for i, l in enumerate(data.labels) if l is Label.FEASIBLE], dtype=np.int64)
    infeasible = np.array([i for i, l in enumerate(data.labels) if l is Label.INFEASIBLE], dtype=np.int64)
    unlabeled = len(data) - feasible.size - infeasible.size
    if unlabeled:
        logger.warning("make_splits: ignoring %d unlabeled rows", unlabeled)
    if feasible.size == 0 or infeasible.size == 0:
        raise SplitError("balanced splits need both feasible and infeasible rows")

    total = feasible.size + infeasible.size
    k_val, k_test = _per_class(val_frac, total), _per_class(test_frac, total)
    capacity = min(feasible.size, infeasible.size)
    if k_val + k_test > capacity:
        wanted = k_val + k_test
        k_val = int(math.floor(capacity * k_val / wanted))
        k_test = int(math.floor(capacity * k_test / wanted))
    if k_val < 1 or k_test < 1:
        raise SplitError(
            f"too few rows for non-empty balanced splits ({feasible.size} feasible, {infeasible.size} infeasible)"
        )

    rng = np.random.default_rng(seed)
    feasible = rng.permutation(feasible)
    infeasible = rng.permutation(infeasible)
    cut = k_val + k_test
    val_idx = np.concatenate([feasible[:k_val], infeasible[:k_val]])
    test_idx = np.concatenate([feasible[k_val:cut], infeasible[k_val:cut]])
    train_idx = feasible[cut:]
    dropped = infeasible.size - cut
    if train_idx.size == 0:
        raise SplitError("no feasible rows left for the training split")
    if dropped:
        logger.warning("make_splits: dropped %d infeasible rows that did not fit the balanced splits", dropped)

    return (
        data.subset(np.sort(train_idx)),
        data.subset(np.sort(val_idx)),
        data.subset(np.sort(test_idx)),
    )


# ============================================================================
# SYNTHETIC BENCHMARK
# ============================================================================

class SynthSpec(BaseModel):
    """ID data: mixture of Gaussians with means in a ball; OOD: the same mixture shifted/inflated."""

    dim: int = Field(default=94, ge=2)
    n_id: int = Field(default=2000, ge=2)
    n_ood: int = Field(default=1000, ge=2)
    n_components: int = Field(default=3, ge=1)
    mean_radius: float = Field(default=3.0, ge=0)
    sigma_max: float = Field(default=1.0, gt=0)
    sigma_min_ratio: float = Field(default=0.5, gt=0, le=1)
    shift_distance: float = Field(default=4.0, ge=0, description="OOD mean shift in units of sigma_max")
    cov_inflation: float = Field(default=1.0, gt=0)
    val_frac: float = Field(default=0.2, gt=0, lt=1)
    test_frac: float = Field(default=0.2, gt=0, lt=1)

    @model_validator(mode="after")
    def check_fractions(self) -> "SynthSpec":
        if self.val_frac + self.test_frac >= 1.0:
            raise ValueError("val_frac + test_frac must be < 1")
        return self


@dataclass
class GaussianMixture:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, h)
    covariances: np.ndarray  # (K, h, h)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        parts = np.stack([
            np.log(w) + multivariate_normal(mean=m, cov=c).logpdf(x).reshape(-1)
            for w, m, c in zip(self.weights, self.means, self.covariances)
        ])
        return logsumexp(parts, axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        components = rng.choice(len(self.weights), size=n, p=self.weights)
        factors = np.linalg.cholesky(self.covariances)
        noise = rng.standard_normal((n, self.dim))
        return self.means[components] + np.einsum("nij,nj->ni", factors[components], noise)


def build_mixtures(spec: SynthSpec, seed: int) -> Tuple[GaussianMixture, GaussianMixture]:
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[0])
    k, h = spec.n_components, spec.dim

    directions = rng.standard_normal((k, h))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    radii = spec.mean_radius * rng.uniform(size=k) ** (1.0 / h)
    means = directions * radii[:, None]

    covariances = np.empty((k, h, h))
    for j in range(k):
        rotation = ortho_group.rvs(h, random_state=rng)
        scales = rng.uniform(spec.sigma_min_ratio * spec.sigma_max, spec.sigma_max, size=h)
        cov = (rotation * scales ** 2) @ rotation.T
        covariances[j] = 0.5 * (cov + cov.T)
    weights = np.full(k, 1.0 / k)

    shifts = rng.standard_normal((k, h))
    shifts /= np.linalg.norm(shifts, axis=1, keepdims=True)
    ood_means = means + spec.shift_distance * spec.sigma_max * shifts
    ood_covariances = covariances * spec.cov_inflation ** 2

    return (
        GaussianMixture(weights, means, covariances),
        GaussianMixture(weights.copy(), ood_means, ood_covariances),
    )


def synth_dataset(spec: SynthSpec, seed: int) -> LabeledDataset:
    """All synthetic rows before splitting: ID rows labeled feasible, then OOD rows infeasible."""
    id_mix, ood_mix = build_mixtures(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(2)[1])
    embeddings = np.concatenate([id_mix.sample(spec.n_id, rng), ood_mix.sample(spec.n_ood, rng)])
    labels = [Label.FEASIBLE] * spec.n_id + [Label.INFEASIBLE] * spec.n_ood
    ids = [f"a{i:06d}" for i in range(len(labels))]
    return LabeledDataset(embeddings, labels, ids)


def synth_benchmark(
    spec: SynthSpec, seed: int
) -> Tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    return make_splits(synth_dataset(spec, seed), spec.val_frac, spec.test_frac, seed)
