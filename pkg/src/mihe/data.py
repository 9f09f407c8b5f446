"""Bag-structured hyperspectral data, dictionaries and their file formats.

Instances are stored row-wise: a bag with ``n`` spectra of ``d`` bands is an
``(n, d)`` float64 array. Dictionaries keep signatures column-wise, as
``(d, T)`` target and ``(d, M)`` background blocks.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

POSITIVE = "+"
NEGATIVE = "-"
_LABEL_TOKENS = {POSITIVE: 1, NEGATIVE: 0}

# Unit-norm tolerance applied when saving or loading dictionaries.
NORM_TOL = 1e-9


class DatasetError(ValueError):
    """Raised when bag data or a model file violates its contract."""


def _frozen(a, ndim=None, name="array"):
    a = np.array(a, dtype=np.float64, copy=True)
    if ndim is not None and a.ndim != ndim:
        raise DatasetError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DatasetError(f"{name} contains non-finite values")
    a.setflags(write=False)
    return a


def parse_label(token) -> int:
    """Map a ``"+"``/``"-"`` token (or 1/0) to a binary bag label."""
    if isinstance(token, (bool, np.bool_)):
        return int(token)
    if isinstance(token, (int, np.integer)) and token in (0, 1):
        return int(token)
    try:
        return _LABEL_TOKENS[str(token).strip()]
    except KeyError:
        raise DatasetError(f"unknown label token {token!r}; expected '+' or '-'") from None


def format_label(label: int) -> str:
    return POSITIVE if label else NEGATIVE


@dataclass(frozen=True)
class Spectrum:
    """One reflectance spectrum, optionally with its wavelength grid (micrometers)."""

    values: np.ndarray
    wavelengths: np.ndarray | None = None
    name: str | None = None

    def __post_init__(self):
        values = _frozen(self.values, 1, "spectrum values")
        if values.size < 1:
            raise DatasetError("spectrum must have at least one band")
        object.__setattr__(self, "values", values)
        if self.wavelengths is not None:
            wl = _frozen(self.wavelengths, 1, "wavelengths")
            if wl.shape != values.shape:
                raise DatasetError("wavelengths and values differ in length")
            if np.any(np.diff(wl) <= 0):
                raise DatasetError("wavelengths must be strictly increasing")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def n_bands(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class Bag:
    """A labeled set of instances; ``instances`` has shape ``(n_i, d)``."""

    id: str
    label: int
    instances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "label", parse_label(self.label))
        inst = np.asarray(self.instances, dtype=np.float64)
        if inst.ndim == 1:
            inst = inst[None, :]
        inst = _frozen(inst, 2, f"bag {self.id!r} instances")
        if inst.shape[0] < 1:
            raise DatasetError(f"bag {self.id!r} has zero instances")
        if inst.shape[1] < 1:
            raise DatasetError(f"bag {self.id!r} has zero bands")
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "instances", inst)

    @property
    def n_instances(self) -> int:
        return self.instances.shape[0]

    @property
    def n_bands(self) -> int:
        return self.instances.shape[1]

    @property
    def spectra(self) -> list[Spectrum]:
        return [Spectrum(row) for row in self.instances]


@dataclass(frozen=True)
class BagDataset:
    """An ordered collection of bags sharing one band count."""

    bags: tuple[Bag, ...]
    wavelengths: np.ndarray | None = None
    instance_labels: tuple[np.ndarray, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        bags = tuple(self.bags)
        if not bags:
            raise DatasetError("dataset has no bags")
        d = bags[0].n_bands
        for bag in bags:
            if bag.n_bands != d:
                raise DatasetError(
                    f"dimension mismatch: bag {bag.id!r} has {bag.n_bands} bands, expected {d}"
                )
        ids = [b.id for b in bags]
        if len(set(ids)) != len(ids):
            raise DatasetError("duplicate bag ids")
        object.__setattr__(self, "bags", bags)
        if self.wavelengths is not None:
            object.__setattr__(self, "wavelengths", Spectrum(np.zeros(d), self.wavelengths).wavelengths)
        if self.instance_labels is not None:
            labels = tuple(np.asarray(l, dtype=np.int64) for l in self.instance_labels)
            if len(labels) != len(bags) or any(
                l.shape != (b.n_instances,) for l, b in zip(labels, bags)
            ):
                raise DatasetError("instance labels do not match bag sizes")
            for l in labels:
                l.setflags(write=False)
            object.__setattr__(self, "instance_labels", labels)

    @classmethod
    def from_arrays(cls, bags: Sequence, labels: Sequence, ids: Sequence | None = None, **kwargs):
        if len(bags) != len(labels):
            raise DatasetError("bags and labels differ in length")
        if ids is None:
            ids = [f"bag{i + 1:03d}" for i in range(len(bags))]
        return cls(tuple(Bag(i, l, b) for i, l, b in zip(ids, labels, bags)), **kwargs)

    @property
    def n_bands(self) -> int:
        return self.bags[0].n_bands

    @property
    def positive_bags(self) -> list[Bag]:
        return [b for b in self.bags if b.label == 1]

    @property
    def negative_bags(self) -> list[Bag]:
        return [b for b in self.bags if b.label == 0]

    @property
    def K(self) -> int:
        return len(self.bags)

    @property
    def K_pos(self) -> int:
        return len(self.positive_bags)

    @property
    def K_neg(self) -> int:
        return len(self.negative_bags)

    @property
    def N(self) -> int:
        return sum(b.n_instances for b in self.bags)

    @property
    def N_pos(self) -> int:
        return sum(b.n_instances for b in self.positive_bags)

    @property
    def N_neg(self) -> int:
        return sum(b.n_instances for b in self.negative_bags)

    def instances(self) -> np.ndarray:
        """All instances stacked in bag order, shape ``(N, d)``."""
        return np.vstack([b.instances for b in self.bags])

    def bag_index(self) -> np.ndarray:
        """Position of each stacked instance's bag in ``self.bags``."""
        return np.repeat(np.arange(self.K), [b.n_instances for b in self.bags])

    def require_trainable(self):
        if self.K_pos < 1 or self.K_neg < 1:
            raise DatasetError(
                f"training needs at least one positive and one negative bag "
                f"(got K+={self.K_pos}, K-={self.K_neg})"
            )


def normalize_rows(X) -> np.ndarray:
    """Scale every row of ``X`` to unit Euclidean norm.

    Raises ``DatasetError`` on an all-zero row, which has no direction.
    """
    X = np.asarray(X, dtype=np.float64)
    norms = np.linalg.norm(X, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise DatasetError("cannot normalize an all-zero spectrum")
    return X / norms


def normalize_dataset(dataset: BagDataset) -> BagDataset:
    """Copy of ``dataset`` with every instance scaled to unit norm."""
    bags = tuple(Bag(b.id, b.label, normalize_rows(b.instances)) for b in dataset.bags)
    return BagDataset(bags, dataset.wavelengths, dataset.instance_labels)


@dataclass(frozen=True)
class Dictionary:
    """Target signatures ``targets`` (d, T) next to background signatures ``backgrounds`` (d, M)."""

    targets: np.ndarray
    backgrounds: np.ndarray

    def __post_init__(self):
        t = _frozen(self.targets, 2, "targets")
        b = _frozen(self.backgrounds, 2, "backgrounds")
        if t.shape[1] < 1 or b.shape[1] < 1:
            raise DatasetError(f"dictionary needs T >= 1 and M >= 1, got T={t.shape[1]}, M={b.shape[1]}")
        if t.shape[0] != b.shape[0]:
            raise DatasetError("target and background columns differ in length")
        object.__setattr__(self, "targets", t)
        object.__setattr__(self, "backgrounds", b)

    @property
    def n_bands(self) -> int:
        return self.targets.shape[0]

    @property
    def n_targets(self) -> int:
        return self.targets.shape[1]

    @property
    def n_backgrounds(self) -> int:
        return self.backgrounds.shape[1]

    @property
    def matrix(self) -> np.ndarray:
        """Concatenated ``[D+ D-]`` of shape ``(d, T + M)``."""
        return np.hstack([self.targets, self.backgrounds])

    def column_norms(self) -> np.ndarray:
        return np.linalg.norm(self.matrix, axis=0)

    def is_unit_norm(self, tol: float = NORM_TOL) -> bool:
        return bool(np.all(np.abs(self.column_norms() - 1.0) <= tol))

    def normalized(self) -> "Dictionary":
        t = self.targets / np.linalg.norm(self.targets, axis=0)
        b = self.backgrounds / np.linalg.norm(self.backgrounds, axis=0)
        return Dictionary(t, b)

    @classmethod
    def from_matrix(cls, matrix, n_targets: int) -> "Dictionary":
        matrix = np.asarray(matrix, dtype=np.float64)
        return cls(matrix[:, :n_targets], matrix[:, n_targets:])


@dataclass(frozen=True)
class HyperParams:
    """Objective weights and optimizer controls for training."""

    p: float = 5.0
    rho: float | None = None
    beta: float = 5.0
    lam: float = 1e-3
    n_targets: int = 1
    n_backgrounds: int = 5
    max_outer_iters: int = 100
    step_size: float = 0.1
    obj_tol: float = 1e-6
    ista_iters: int = 200
    ista_tol: float = 1e-6
    nonneg: bool = False
    init_quantile: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.p == 0 or math.isnan(self.p):
            raise ValueError("p must be nonzero")
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not self.lam >= 0:
            raise ValueError("lam must be nonnegative")
        if self.rho is not None and not 0 < self.rho <= 1:
            raise ValueError("rho must lie in (0, 1]")
        if self.n_targets < 1 or self.n_backgrounds < 1:
            raise ValueError("n_targets and n_backgrounds must be positive")
        if self.max_outer_iters < 0 or self.ista_iters < 1:
            raise ValueError("iteration counts must be nonnegative (ista_iters >= 1)")
        if not self.step_size > 0 or not self.obj_tol >= 0 or not self.ista_tol >= 0:
            raise ValueError("step_size must be positive and tolerances nonnegative")
        if not 0 < self.init_quantile <= 1:
            raise ValueError("init_quantile must lie in (0, 1]")

    def resolved_rho(self, dataset: BagDataset) -> float:
        """Negative-bag weight; defaults to ``min(1, N+/N-)``."""
        if self.rho is not None:
            return float(self.rho)
        return min(1.0, dataset.N_pos / dataset.N_neg)


# --------------------------------------------------------------------------
# file I/O


def _write_matrix(path: Path, matrix: np.ndarray):
    np.savetxt(path, np.atleast_2d(matrix), delimiter=",", fmt="%.17g", encoding="utf-8")


def _read_matrix(path: Path) -> np.ndarray:
    if not path.is_file():
        raise FileNotFoundError(f"instance file not found: {path}")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            m = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2, encoding="utf-8")
    except ValueError as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    if m.size == 0:
        raise DatasetError(f"bag file {path} has zero instances")
    return m


def save_dataset(dataset: BagDataset, directory, truth_file: str | None = None,
                 metadata: dict | None = None) -> Path:
    """Write a manifest plus one CSV per bag; returns the manifest path.

    ``metadata`` is stored under the manifest's ``"metadata"`` key.
    """
    directory = Path(directory)
    (directory / "bags").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in dataset.bags:
        rel = f"bags/{bag.id}.csv"
        _write_matrix(directory / rel, bag.instances)
        entries.append({"id": bag.id, "label": format_label(bag.label), "file": rel})
    manifest = {"n_bands": dataset.n_bands, "bags": entries}
    if dataset.wavelengths is not None:
        manifest["wavelengths"] = dataset.wavelengths.tolist()
    if truth_file is not None:
        manifest["truth"] = truth_file
    if metadata:
        manifest["metadata"] = metadata
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1) + "\n", encoding="utf-8")
    return path


def resolve_manifest(path) -> Path:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return path


def manifest_metadata(manifest_path) -> dict:
    """The free-form ``"metadata"`` block of a manifest (empty if absent)."""
    path = resolve_manifest(manifest_path)
    try:
        meta = json.loads(path.read_text(encoding="utf-8")).get("metadata", {})
    except (json.JSONDecodeError, AttributeError) as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    return meta if isinstance(meta, dict) else {}


def load_dataset(manifest_path) -> BagDataset:
    """Load a dataset from a manifest file (or a directory holding ``manifest.json``).

    Instance labels are attached when the manifest names a ground-truth file.
    """
    path = resolve_manifest(manifest_path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
        entries = manifest["bags"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise DatasetError(f"malformed manifest {path}: {exc}") from exc
    root = path.parent
    bags = []
    for entry in entries:
        try:
            bag_id, label, rel = entry["id"], entry["label"], entry["file"]
        except (KeyError, TypeError):
            raise DatasetError(f"manifest entry missing id/label/file: {entry!r}") from None
        bags.append(Bag(bag_id, parse_label(label), _read_matrix(root / rel)))
    dataset = BagDataset(tuple(bags), wavelengths=manifest.get("wavelengths"))
    if "n_bands" in manifest and manifest["n_bands"] != dataset.n_bands:
        raise DatasetError(
            f"dimension mismatch: manifest declares {manifest['n_bands']} bands, files have {dataset.n_bands}"
        )
    if manifest.get("truth"):
        truth = load_truth(root / manifest["truth"])
        labels = tuple(truth.labels_for(bag.id, bag.n_instances) for bag in dataset.bags)
        dataset = BagDataset(dataset.bags, dataset.wavelengths, labels)
    return dataset


@dataclass(frozen=True)
class GroundTruth:
    """Per-instance true labels and mixing proportions."""

    bag_ids: np.ndarray
    instance: np.ndarray
    labels: np.ndarray
    proportions: np.ndarray
    endmembers: tuple[str, ...]

    def labels_for(self, bag_id: str, n: int) -> np.ndarray:
        mask = self.bag_ids == bag_id
        if mask.sum() != n:
            raise DatasetError(f"ground truth has {mask.sum()} rows for bag {bag_id!r}, expected {n}")
        order = np.argsort(self.instance[mask], kind="stable")
        return self.labels[mask][order]


def save_truth(path, bag_ids: Iterable[str], labels, proportions, endmembers: Sequence[str]):
    bag_ids = list(bag_ids)
    labels = np.asarray(labels)
    proportions = np.atleast_2d(np.asarray(proportions, dtype=np.float64))
    counters: dict[str, int] = {}
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bag_id", "instance", "label", *endmembers])
        for bag_id, label, row in zip(bag_ids, labels, proportions):
            j = counters.get(bag_id, 0)
            counters[bag_id] = j + 1
            w.writerow([bag_id, j, int(label), *(repr(float(v)) for v in row)])


def load_truth(path) -> GroundTruth:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"ground-truth file not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0][:3] != ["bag_id", "instance", "label"]:
        raise DatasetError(f"malformed ground-truth header in {path}")
    names = tuple(rows[0][3:])
    body = rows[1:]
    try:
        props = np.array([[float(v) for v in r[3:]] for r in body], dtype=np.float64).reshape(len(body), len(names))
        return GroundTruth(
            np.array([r[0] for r in body]),
            np.array([int(r[1]) for r in body]),
            np.array([int(r[2]) for r in body]),
            props,
            names,
        )
    except (ValueError, IndexError) as exc:
        raise DatasetError(f"malformed ground-truth row in {path}: {exc}") from exc


def save_dictionary(dictionary: Dictionary, path, strict: bool = True, wavelengths=None):
    """Write a dictionary as JSON with explicit columns; ``strict`` rejects non-unit columns."""
    if strict and not dictionary.is_unit_norm():
        raise DatasetError(f"dictionary columns are not unit norm: {dictionary.column_norms()}")
    doc = {
        "format": "mihe-dictionary",
        "version": 1,
        "n_bands": dictionary.n_bands,
        "n_targets": dictionary.n_targets,
        "n_backgrounds": dictionary.n_backgrounds,
        "targets": dictionary.targets.T.tolist(),
        "backgrounds": dictionary.backgrounds.T.tolist(),
    }
    if wavelengths is not None:
        doc["wavelengths"] = np.asarray(wavelengths, dtype=np.float64).tolist()
    Path(path).write_text(json.dumps(doc) + "\n", encoding="utf-8")


def load_dictionary(path, renormalize: bool = False) -> Dictionary:
    """Read a dictionary file.

    Columns that are not unit norm raise ``DatasetError`` unless ``renormalize``
    is set, in which case they are rescaled with a warning.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
        t = np.array(doc["targets"], dtype=np.float64)
        b = np.array(doc["backgrounds"], dtype=np.float64)
        T, M, d = int(doc["n_targets"]), int(doc["n_backgrounds"]), int(doc["n_bands"])
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"malformed dictionary file {path}: {exc}") from exc
    if T < 1 or M < 1 or t.shape != (T, d) or b.shape != (M, d):
        raise DatasetError(f"dictionary file {path} declares T={T}, M={M}, d={d} inconsistent with its columns")
    dictionary = Dictionary(t.T, b.T)
    if not dictionary.is_unit_norm():
        if not renormalize:
            raise DatasetError(f"dictionary file {path} has non-unit columns")
        warnings.warn(f"renormalizing non-unit columns in {path}", stacklevel=2)
        dictionary = dictionary.normalized()
    return dictionary


def _sniff_delimiter(line: str) -> str | None:
    for delim in (",", "\t", ";"):
        if delim in line:
            return delim
    return None


def load_spectral_library(path, delimiter: str | None = None) -> list[Spectrum]:
    """Read named spectra from a delimited table.

    The header names the columns; the first column holds wavelengths in
    micrometers and each remaining column one reflectance spectrum.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"spectral library not found: {path}")
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip() and not ln.startswith("#")]
    if not lines:
        raise DatasetError(f"spectral library {path} is empty")
    delimiter = delimiter or _sniff_delimiter(lines[0])

    def split(ln):
        return [c.strip() for c in (ln.split(delimiter) if delimiter else ln.split())]

    header = split(lines[0])
    names = header[1:]
    if not names:
        raise DatasetError(f"spectral library {path} has no spectrum columns")
    if len(set(names)) != len(names):
        raise DatasetError(f"duplicate spectrum names in {path}")
    rows = []
    for k, ln in enumerate(lines[1:], start=2):
        cells = split(ln)
        if len(cells) != len(header):
            raise DatasetError(f"ragged row {k} in {path}: {len(cells)} cells, expected {len(header)}")
        try:
            rows.append([float(c) for c in cells])
        except ValueError as exc:
            raise DatasetError(f"non-numeric cell in row {k} of {path}") from exc
    if not rows:
        raise DatasetError(f"spectral library {path} has no data rows")
    table = np.array(rows, dtype=np.float64)
    wl = table[:, 0]
    if np.any(np.diff(wl) <= 0):
        raise DatasetError(f"wavelengths in {path} are not strictly increasing")
    return [Spectrum(table[:, i + 1], wl, name) for i, name in enumerate(names)]


def save_spectral_library(spectra: Sequence[Spectrum], path):
    wl = spectra[0].wavelengths
    if wl is None:
        raise DatasetError("spectra need wavelengths to be written as a library")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["wavelength", *(s.name for s in spectra)])
        for i in range(wl.shape[0]):
            w.writerow([repr(float(wl[i])), *(repr(float(s.values[i])) for s in spectra)])
