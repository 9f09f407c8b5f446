"""Synthetic bag-structured hyperspectral data under the linear mixing model.

Each instance is a convex combination of endmember spectra plus white
Gaussian noise. Positive bags contain a fixed number of target instances
whose target proportion averages ``p_t_mean``; every other instance mixes
only the background endmembers assigned to its bag.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Bag, BagDataset, Spectrum, save_dataset, save_truth

N_BANDS = 211
WAVELENGTHS = np.linspace(0.4, 2.5, N_BANDS)

TARGET = "red_slate"
CONFUSER = "verde_antique"


def _gauss(wl, center, width, depth):
    return depth * np.exp(-0.5 * ((wl - center) / width) ** 2)


def _sigmoid(wl, center, width):
    return 1.0 / (1.0 + np.exp(-(wl - center) / width))


def synthetic_endmembers(wavelengths=None) -> list[Spectrum]:
    """Four smooth rock-like reflectance spectra used when no library file is given.

    They stand in for Red Slate, Verde Antique, Phyllite and Pyroxenite: a
    reddish target with a steep ferric edge, a greenish serpentine-like
    spectrum, a dark flat phyllite and a pyroxenite with broad 1 and 2 um
    bands. Shapes are analytic, not measured.
    """
    wl = WAVELENGTHS if wavelengths is None else np.asarray(wavelengths, dtype=np.float64)
    red_slate = (0.08 + 0.22 * _sigmoid(wl, 0.62, 0.03) + 0.04 * wl
                 - _gauss(wl, 0.88, 0.10, 0.07) - _gauss(wl, 2.20, 0.04, 0.05)
                 - _gauss(wl, 1.42, 0.03, 0.03))
    verde = (0.12 + _gauss(wl, 0.55, 0.06, 0.08) + 0.05 * _sigmoid(wl, 1.3, 0.2)
             - _gauss(wl, 1.05, 0.18, 0.06) - _gauss(wl, 2.32, 0.04, 0.07)
             - _gauss(wl, 1.39, 0.025, 0.05) + 0.03 * np.sin(2.2 * wl))
    phyllite = (0.16 - 0.02 * wl - _gauss(wl, 2.21, 0.05, 0.04)
                + _gauss(wl, 0.50, 0.10, 0.03) - _gauss(wl, 1.90, 0.10, 0.02))
    pyroxenite = (0.22 + 0.02 * _sigmoid(wl, 0.7, 0.05) - _gauss(wl, 0.95, 0.12, 0.09)
                  - _gauss(wl, 2.00, 0.25, 0.08) + 0.02 * wl)
    names = (TARGET, CONFUSER, "phyllite", "pyroxenite")
    return [Spectrum(v, wl, n) for v, n in zip((red_slate, verde, phyllite, pyroxenite), names)]


@dataclass(frozen=True)
class BagSpec:
    """``count`` bags sharing a label and a background endmember subset."""

    count: int
    label: int
    backgrounds: tuple[str, ...]


TABLE1_BAGS = (
    BagSpec(5, 1, (CONFUSER, "phyllite", "pyroxenite")),
    BagSpec(5, 1, ("phyllite", "pyroxenite")),
    BagSpec(5, 1, ("pyroxenite",)),
    BagSpec(5, 0, ("phyllite", "pyroxenite")),
)


@dataclass(frozen=True)
class SimConfig:
    endmembers: tuple[Spectrum, ...]
    target: str = TARGET
    bag_specs: tuple[BagSpec, ...] = TABLE1_BAGS
    points_per_bag: int = 500
    targets_per_positive_bag: int = 100
    p_t_mean: float = 0.3
    snr_db: float = 30.0
    seed: int = 0
    # Half-width of the uniform target-proportion draw around p_t_mean.
    target_spread: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "endmembers", tuple(self.endmembers))
        object.__setattr__(self, "bag_specs", tuple(self.bag_specs))
        self.validate()

    def validate(self):
        names = [e.name for e in self.endmembers]
        if len(set(names)) != len(names) or None in names:
            raise ValueError("endmembers need unique names")
        if len({e.n_bands for e in self.endmembers}) != 1:
            raise ValueError("endmembers differ in band count")
        if self.target not in names:
            raise ValueError(f"target endmember {self.target!r} not among {names}")
        if not 0 < self.p_t_mean < 1:
            raise ValueError(f"p_t_mean must lie in (0, 1), got {self.p_t_mean}")
        if self.points_per_bag < 1:
            raise ValueError("points_per_bag must be positive")
        if not 0 <= self.targets_per_positive_bag <= self.points_per_bag:
            raise ValueError("targets_per_positive_bag must lie in [0, points_per_bag]")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be a number or +inf, got {self.snr_db}")
        if not self.bag_specs:
            raise ValueError("no bag specs")
        for spec in self.bag_specs:
            if not spec.backgrounds:
                raise ValueError("every bag needs a nonempty background subset")
            if self.target in spec.backgrounds:
                raise ValueError("the target endmember cannot be a background")
            unknown = set(spec.backgrounds) - set(names)
            if unknown:
                raise ValueError(f"unknown background endmembers {sorted(unknown)}")
            if spec.count < 1 or spec.label not in (0, 1):
                raise ValueError("bag spec needs count >= 1 and label in {0, 1}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(e.name for e in self.endmembers)

    @property
    def background_names(self) -> tuple[str, ...]:
        seen = []
        for spec in self.bag_specs:
            for n in spec.backgrounds:
                if n not in seen:
                    seen.append(n)
        return tuple(seen)


def table1_design(names: Sequence[str], target: str = TARGET, confuser: str = CONFUSER) -> tuple[BagSpec, ...]:
    """Bag groups of the standard design for four named endmembers.

    The two endmembers other than ``target`` and ``confuser`` are the shared
    backgrounds, in the order given.
    """
    names = list(names)
    if len(names) != 4 or len(set(names)) != 4:
        raise ValueError(f"the standard design needs exactly 4 distinct endmembers, got {names}")
    for n in (target, confuser):
        if n not in names:
            raise ValueError(f"endmember {n!r} not among {names}")
    if target == confuser:
        raise ValueError("target and confuser must differ")
    a, b = [n for n in names if n not in (target, confuser)]
    return (
        BagSpec(5, 1, (confuser, a, b)),
        BagSpec(5, 1, (a, b)),
        BagSpec(5, 1, (b,)),
        BagSpec(5, 0, (a, b)),
    )


def table1_config(endmembers: Sequence[Spectrum] | None = None, target: str | None = None,
                  confuser: str | None = None, **kwargs) -> SimConfig:
    """Standard design: 15 positive and 5 negative bags of 500 points.

    Only the first positive group contains the confuser endmember, so the
    negative bags never show it. With custom ``endmembers`` the target and
    confuser default to the first and second spectrum.
    """
    if endmembers is None:
        endmembers = synthetic_endmembers()
    names = [e.name for e in endmembers]
    if target is None:
        target = TARGET if TARGET in names else names[0]
    if confuser is None:
        confuser = CONFUSER if CONFUSER in names else next(n for n in names if n != target)
    specs = table1_design(names, target, confuser)
    return SimConfig(tuple(endmembers), target=target, bag_specs=specs, **kwargs)


@dataclass(frozen=True)
class SimResult:
    dataset: BagDataset
    clean: np.ndarray
    proportions: np.ndarray
    labels: np.ndarray
    bag_ids: tuple[str, ...]
    endmember_names: tuple[str, ...]
    noise_variance: float = field(default=0.0)
    metadata: dict = field(default_factory=dict)

    def save(self, directory):
        """Write manifest, bag files and ``truth.csv`` to ``directory``."""
        from pathlib import Path

        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_truth(directory / "truth.csv", self.bag_ids, self.labels, self.proportions, self.endmember_names)
        return save_dataset(self.dataset, directory, truth_file="truth.csv", metadata=self.metadata)


def generate(config: SimConfig) -> SimResult:
    """Draw a bag dataset with per-instance ground truth.

    Target instances take a target proportion from
    ``Uniform(p - w, p + w)`` with ``w = min(target_spread, p, 1 - p)`` and
    split the remainder across the bag's backgrounds by a flat Dirichlet
    draw; other instances are flat-Dirichlet mixtures of the backgrounds.
    Noise variance is set so the SNR over the whole dataset equals
    ``snr_db`` (``inf`` disables noise).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    names = config.names
    E = np.stack([e.values for e in config.endmembers])  # (n_endmembers, d)
    t_idx = names.index(config.target)
    p = config.p_t_mean
    half = min(config.target_spread, p, 1.0 - p)

    props, labels, bag_ids, bag_sizes, bag_labels = [], [], [], [], []
    n_bags = sum(s.count for s in config.bag_specs)
    width = len(str(n_bags))
    k = 0
    for spec in config.bag_specs:
        bg_idx = [names.index(n) for n in spec.backgrounds]
        for _ in range(spec.count):
            k += 1
            n = config.points_per_bag
            P = np.zeros((n, len(names)))
            P[:, bg_idx] = rng.dirichlet(np.ones(len(bg_idx)), size=n)
            lab = np.zeros(n, dtype=np.int64)
            if spec.label == 1 and config.targets_per_positive_bag:
                n_t = config.targets_per_positive_bag
                where = np.sort(rng.permutation(n)[:n_t])
                a_t = rng.uniform(p - half, p + half, size=n_t)
                P[where] *= (1.0 - a_t)[:, None]
                P[where, t_idx] = a_t
                lab[where] = (a_t > 0).astype(np.int64)
            props.append(P)
            labels.append(lab)
            bag_ids.append(f"bag{k:0{width}d}")
            bag_sizes.append(n)
            bag_labels.append(spec.label)

    P = np.vstack(props)
    clean = P @ E
    if math.isinf(config.snr_db) and config.snr_db > 0:
        sigma2 = 0.0
        noisy = clean.copy()
    else:
        sigma2 = float(np.mean(clean**2) / 10.0 ** (config.snr_db / 10.0))
        noisy = clean + rng.normal(0.0, math.sqrt(sigma2), size=clean.shape)

    bags, offset = [], 0
    for bag_id, n, lab in zip(bag_ids, bag_sizes, bag_labels):
        bags.append(Bag(bag_id, lab, noisy[offset : offset + n]))
        offset += n
    wl = config.endmembers[0].wavelengths
    dataset = BagDataset(tuple(bags), wavelengths=wl, instance_labels=tuple(labels))
    flat_ids = tuple(np.repeat(bag_ids, bag_sizes))
    meta = {
        "target": config.target,
        "background_endmembers": list(config.background_names),
        "p_t_mean": config.p_t_mean,
        "snr_db": config.snr_db if math.isfinite(config.snr_db) else "inf",
        "seed": config.seed,
    }
    return SimResult(dataset, clean, P, np.concatenate(labels), flat_ids, names, sigma2, meta)


def measure_snr(clean, noisy) -> float:
    """``10 log10(mean(clean^2) / mean((noisy - clean)^2))``; ``inf`` for zero noise."""
    clean = np.asarray(clean, dtype=np.float64)
    noisy = np.asarray(noisy, dtype=np.float64)
    if clean.shape != noisy.shape:
        raise ValueError(f"shape mismatch {clean.shape} vs {noisy.shape}")
    noise_power = float(np.mean((noisy - clean) ** 2))
    if noise_power == 0.0:
        return math.inf
    return 10.0 * math.log10(float(np.mean(clean**2)) / noise_power)
