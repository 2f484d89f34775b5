"""Synthetic heterogeneous client populations.

Every client shares one set of class-conditional Gaussian means (optionally
several modes per class). Heterogeneity comes from:

* dataset size (``sizes``),
* label skew: each client's class prior is drawn from Dirichlet(alpha),
* feature shift: each client's inputs are rotated by its own angle in every
  consecutive coordinate plane (0,1), (2,3), ... and then translated by a
  client offset of length ``domain_shift``. The offset avoids the span of the
  class means when the input dimension leaves room, so it mostly tells
  clients apart rather than moving class boundaries.

Datasets round-trip through a plain text format, one file per split::

    # fedlorar-dataset v1 client_id=3 split=train input_dim=20 num_classes=5 n=78
    0.125,-1.5,...<TAB>2
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import EmptyInput, IncompatibleSchemas, InvalidSpec

# Train/dev/test sizes of the eight text-to-SQL clients (Advising, ATIS,
# GeoQuery, Restaurants, Scholar, Academic, IMDB, Yelp).
TEXT2SQL_TRAIN_SIZES = (2629, 4347, 549, 228, 499, 120, 78, 78)
TEXT2SQL_DEV_SIZES = (229, 486, 49, 76, 100, 38, 26, 26)
REPORTED_TEST_SIZES = (573, 447, 279, 74, 218, 38, 26, 24)
TEXT2SQL_CLIENT_NAMES = ("Advising", "ATIS", "GeoQuery", "Restaurants", "Scholar", "Academic", "IMDB", "Yelp")

SPLIT_RATIOS = (0.7, 0.1, 0.2)
SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class Split:
    inputs: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)

    def class_histogram(self, num_classes: int) -> np.ndarray:
        return np.bincount(self.targets, minlength=num_classes)


@dataclass(frozen=True)
class ClientDataset:
    client_id: int
    train: Split
    dev: Split
    test: Split
    num_classes: int

    @property
    def size(self) -> int:
        return len(self.train)

    @property
    def input_dim(self) -> int:
        return self.train.inputs.shape[1]

    def split(self, name: str) -> Split:
        return getattr(self, name)


@dataclass(frozen=True)
class PopulationSpec:
    sizes: tuple[int, ...] = TEXT2SQL_TRAIN_SIZES
    label_skew_alpha: float = 0.3
    feature_rotation: tuple[float, ...] | None = None
    num_classes: int = 5
    input_dim: int = 20
    seed: int = 0
    dev_sizes: tuple[int, ...] | None = None
    test_sizes: tuple[int, ...] | None = None
    class_sep: float = 2.0
    noise_std: float = 1.0
    max_rotation: float = 0.3
    domain_shift: float = 8.0
    modes_per_class: int = 1

    def __post_init__(self):
        for name in ("sizes", "feature_rotation", "dev_sizes", "test_sizes"):
            value = getattr(self, name)
            if value is not None:
                object.__setattr__(self, name, tuple(value))
        if len(self.sizes) < 1:
            raise InvalidSpec("a population needs at least one client")
        if any(int(s) < 1 for s in self.sizes):
            raise InvalidSpec("every client needs at least one training example")
        if not self.label_skew_alpha > 0:
            raise InvalidSpec("label_skew_alpha must be positive")
        if self.num_classes < 2 or self.input_dim < 1:
            raise InvalidSpec("need num_classes >= 2 and input_dim >= 1")
        for name in ("feature_rotation", "dev_sizes", "test_sizes"):
            value = getattr(self, name)
            if value is not None and len(value) != len(self.sizes):
                raise InvalidSpec(f"{name} must have one entry per client")
        if self.noise_std <= 0:
            raise InvalidSpec("noise_std must be positive")
        if self.modes_per_class < 1:
            raise InvalidSpec("modes_per_class must be >= 1")
        if self.domain_shift < 0:
            raise InvalidSpec("domain_shift must be nonnegative")

    @property
    def num_clients(self) -> int:
        return len(self.sizes)

    def rotations(self) -> tuple[float, ...]:
        if self.feature_rotation is not None:
            return self.feature_rotation
        n = self.num_clients
        if n == 1:
            return (0.0,)
        return tuple(float(a) for a in np.linspace(0.0, self.max_rotation, n))

    def split_sizes(self, i: int) -> tuple[int, int, int]:
        train = int(self.sizes[i])
        if self.dev_sizes is not None:
            dev = int(self.dev_sizes[i])
        else:
            dev = max(1, round(train * SPLIT_RATIOS[1] / SPLIT_RATIOS[0]))
        if self.test_sizes is not None:
            test = int(self.test_sizes[i])
        else:
            test = max(1, round(train * SPLIT_RATIOS[2] / SPLIT_RATIOS[0]))
        return train, dev, test


def text2sql_population(seed: int = 0, **overrides) -> PopulationSpec:
    """The eight-client population with the text-to-SQL train/dev/test sizes."""
    kwargs = dict(
        sizes=TEXT2SQL_TRAIN_SIZES,
        dev_sizes=TEXT2SQL_DEV_SIZES,
        test_sizes=REPORTED_TEST_SIZES,
        seed=seed,
    )
    kwargs.update(overrides)
    return PopulationSpec(**kwargs)


def rotation_matrix(dim: int, angle: float) -> np.ndarray:
    R = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for k in range(0, dim - 1, 2):
        R[k, k], R[k, k + 1] = c, -s
        R[k + 1, k], R[k + 1, k + 1] = s, c
    return R


def _draw_split(rng, n, prior, means, rot, noise_std, offset) -> Split:
    labels = rng.choice(len(prior), size=n, p=prior)
    modes = rng.integers(0, means.shape[1], size=n)
    x = means[labels, modes] + noise_std * rng.standard_normal((n, means.shape[2]))
    return Split(inputs=x @ rot.T + offset, targets=labels.astype(np.int64))


def _domain_offsets(rng, spec: PopulationSpec, means: np.ndarray) -> np.ndarray:
    # One random direction per client, kept out of the span of the class
    # means when there is room, scaled to length domain_shift.
    dirs = rng.standard_normal((spec.num_clients, spec.input_dim))
    basis = np.linalg.qr(means.reshape(-1, spec.input_dim).T)[0]
    if basis.shape[1] < spec.input_dim:
        dirs -= (dirs @ basis) @ basis.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return spec.domain_shift * dirs


def class_priors(spec: PopulationSpec) -> np.ndarray:
    """The per-client class priors that ``generate_population`` uses (N x K)."""
    rng = np.random.default_rng(spec.seed)
    _ = _class_means(rng, spec)
    return rng.dirichlet(np.full(spec.num_classes, spec.label_skew_alpha), size=spec.num_clients)


def _class_means(rng, spec: PopulationSpec) -> np.ndarray:
    means = rng.standard_normal((spec.num_classes, spec.modes_per_class, spec.input_dim))
    means /= np.linalg.norm(means, axis=2, keepdims=True)
    return spec.class_sep * means


def _safe_prior(p: np.ndarray) -> np.ndarray:
    # Dirichlet draws with tiny alpha can underflow to exact zeros; renormalize.
    p = np.clip(p, 0.0, None)
    return p / p.sum()


def generate_population(spec: PopulationSpec) -> list[ClientDataset]:
    """Draw every client's train/dev/test splits from one seeded stream."""
    rng = np.random.default_rng(spec.seed)
    means = _class_means(rng, spec)
    priors = rng.dirichlet(np.full(spec.num_classes, spec.label_skew_alpha), size=spec.num_clients)
    angles = spec.rotations()
    offsets = _domain_offsets(rng, spec, means)
    clients = []
    for i in range(spec.num_clients):
        prior = _safe_prior(priors[i])
        rot = rotation_matrix(spec.input_dim, angles[i])
        splits = [
            _draw_split(rng, n, prior, means, rot, spec.noise_std, offsets[i])
            for n in spec.split_sizes(i)
        ]
        clients.append(ClientDataset(i, *splits, num_classes=spec.num_classes))
    return clients


def merge(datasets: Sequence[ClientDataset]) -> ClientDataset:
    """Concatenate clients (ascending client_id) into one centralized dataset."""
    if len(datasets) == 0:
        raise EmptyInput("merge needs at least one dataset")
    ordered = sorted(datasets, key=lambda d: d.client_id)
    if len(ordered) == 1:
        return ordered[0]
    head = ordered[0]
    for d in ordered[1:]:
        if d.input_dim != head.input_dim or d.num_classes != head.num_classes:
            raise IncompatibleSchemas(
                f"client {d.client_id} has (input_dim={d.input_dim}, num_classes={d.num_classes}), "
                f"expected ({head.input_dim}, {head.num_classes})"
            )
    merged = {}
    for name in SPLITS:
        parts = [d.split(name) for d in ordered]
        merged[name] = Split(
            inputs=np.concatenate([p.inputs for p in parts], axis=0),
            targets=np.concatenate([p.targets for p in parts]),
        )
    return ClientDataset(head.client_id, merged["train"], merged["dev"], merged["test"], num_classes=head.num_classes)


def size_weights(datasets: Sequence[ClientDataset]) -> list[float]:
    total = sum(d.size for d in datasets)
    return [d.size / total for d in datasets]


# -- text format ------------------------------------------------------------

def _header(d: ClientDataset, split: str, n: int) -> str:
    return (
        f"# fedlorar-dataset v1 client_id={d.client_id} split={split} "
        f"input_dim={d.input_dim} num_classes={d.num_classes} n={n}"
    )


def format_split(d: ClientDataset, split: str) -> str:
    s = d.split(split)
    lines = [_header(d, split, len(s))]
    for row, label in zip(s.inputs, s.targets):
        lines.append(",".join(repr(float(v)) for v in row) + "\t" + str(int(label)))
    return "\n".join(lines) + "\n"


def parse_split(text: str) -> tuple[dict, Split]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# fedlorar-dataset v1"):
        raise IncompatibleSchemas("missing dataset header line")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[3:])
    input_dim = int(meta["input_dim"])
    rows, labels = [], []
    for line in lines[1:]:
        if not line:
            continue
        feats, label = line.split("\t")
        rows.append([float(v) for v in feats.split(",")])
        labels.append(int(label))
    if len(rows) != int(meta["n"]):
        raise IncompatibleSchemas(f"header says n={meta['n']}, found {len(rows)} rows")
    inputs = np.array(rows, dtype=np.float64).reshape(len(rows), input_dim)
    return meta, Split(inputs=inputs, targets=np.array(labels, dtype=np.int64))


def save_population(datasets: Sequence[ClientDataset], directory: str | Path) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for d in datasets:
        for split in SPLITS:
            path = directory / f"client_{d.client_id}_{split}.tsv"
            path.write_text(format_split(d, split))
            written.append(path)
    return written


def load_client(directory: str | Path, client_id: int) -> ClientDataset:
    directory = Path(directory)
    splits = {}
    meta = {}
    for split in SPLITS:
        meta, splits[split] = parse_split((directory / f"client_{client_id}_{split}.tsv").read_text())
    return ClientDataset(client_id, splits["train"], splits["dev"], splits["test"], num_classes=int(meta["num_classes"]))


def load_population(directory: str | Path) -> list[ClientDataset]:
    directory = Path(directory)
    ids = sorted(int(p.name.split("_")[1]) for p in directory.glob("client_*_train.tsv"))
    if not ids:
        raise EmptyInput(f"no client files in {directory}")
    return [load_client(directory, i) for i in ids]
