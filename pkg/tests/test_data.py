import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mihe.data import (
    BagDataset,
    DatasetError,
    Dictionary,
    HyperParams,
    Spectrum,
    load_dataset,
    load_dictionary,
    load_spectral_library,
    load_truth,
    manifest_metadata,
    parse_label,
    save_dataset,
    save_dictionary,
    save_spectral_library,
)
from mihe.simulate import WAVELENGTHS, generate, synthetic_endmembers, table1_config


def write_manifest(tmp_path, entries, n_bands=None):
    (tmp_path / "bags").mkdir(exist_ok=True)
    bags = []
    for bag_id, label, rows in entries:
        np.savetxt(tmp_path / "bags" / f"{bag_id}.csv", rows, delimiter=",")
        bags.append({"id": bag_id, "label": label, "file": f"bags/{bag_id}.csv"})
    doc = {"bags": bags}
    if n_bands is not None:
        doc["n_bands"] = n_bands
    (tmp_path / "manifest.json").write_text(json.dumps(doc))
    return tmp_path / "manifest.json"


def test_manifest_counts(tmp_path):
    rng = np.random.default_rng(0)
    path = write_manifest(tmp_path, [("a", "+", rng.random((3, 4))), ("b", "-", rng.random((3, 4)))], 4)
    ds = load_dataset(path)
    assert (ds.K, ds.N, ds.K_pos, ds.K_neg, ds.N_pos, ds.N_neg, ds.n_bands) == (2, 6, 1, 1, 3, 3, 4)


def test_manifest_band_mismatch(tmp_path):
    rng = np.random.default_rng(0)
    path = write_manifest(tmp_path, [("a", "+", rng.random((3, 4))), ("b", "-", rng.random((3, 5)))])
    with pytest.raises(DatasetError, match="dimension mismatch"):
        load_dataset(path)


def test_manifest_declared_bands_checked(tmp_path):
    path = write_manifest(tmp_path, [("a", "+", np.ones((2, 4)))], n_bands=5)
    with pytest.raises(DatasetError, match="dimension mismatch"):
        load_dataset(path)


def test_missing_bag_file(tmp_path):
    path = write_manifest(tmp_path, [("a", "+", np.ones((2, 4)))])
    (tmp_path / "bags" / "a.csv").unlink()
    with pytest.raises(FileNotFoundError):
        load_dataset(path)


@pytest.mark.parametrize("token", ["pos", "2", "", "++"])
def test_bad_label_token(tmp_path, token):
    path = write_manifest(tmp_path, [("a", token, np.ones((2, 4)))])
    with pytest.raises(DatasetError, match="label"):
        load_dataset(path)


def test_label_tokens():
    assert parse_label("+") == 1 and parse_label("-") == 0
    assert parse_label(1) == 1 and parse_label(0) == 0


def test_simulated_manifest_has_standard_size(tmp_path):
    res = generate(table1_config(p_t_mean=0.3, seed=0))
    res.save(tmp_path)
    ds = load_dataset(tmp_path)
    assert ds.K == 20 and ds.N == 10000 and ds.K_pos == 15
    assert ds.instance_labels is not None
    assert sum(int(l.sum()) for l in ds.instance_labels) == 15 * 100
    meta = manifest_metadata(tmp_path)
    assert len(meta["background_endmembers"]) == 3


def test_dataset_round_trip_is_exact(tmp_path):
    rng = np.random.default_rng(1)
    ds = BagDataset.from_arrays([rng.normal(size=(4, 6)), rng.normal(size=(2, 6)) * 1e-7], [1, 0])
    save_dataset(ds, tmp_path)
    back = load_dataset(tmp_path)
    for a, b in zip(ds.bags, back.bags):
        assert a.id == b.id and a.label == b.label
        assert np.array_equal(a.instances, b.instances)


@settings(max_examples=25, deadline=None)
@given(sizes=st.lists(st.integers(1, 6), min_size=2, max_size=6), d=st.integers(1, 5))
def test_counts_partition(sizes, d):
    labels = [i % 2 for i in range(len(sizes))]
    ds = BagDataset.from_arrays([np.zeros((n, d)) for n in sizes], labels)
    assert ds.N == sum(sizes)
    assert ds.N_pos + ds.N_neg == ds.N
    assert ds.instances().shape == (ds.N, d)
    assert np.array_equal(np.bincount(ds.bag_index()), sizes)


def test_dataset_rejects_bad_input():
    with pytest.raises(DatasetError):
        BagDataset(())
    with pytest.raises(DatasetError):
        BagDataset.from_arrays([np.ones((2, 3)), np.ones((2, 3))], [1, 0], ids=["x", "x"])
    with pytest.raises(DatasetError):
        BagDataset.from_arrays([np.full((2, 3), np.nan)], [1])
    with pytest.raises(DatasetError):
        BagDataset.from_arrays([np.ones((0, 3))], [1])


def test_arrays_are_read_only():
    ds = BagDataset.from_arrays([np.ones((2, 3))], [1])
    with pytest.raises(ValueError):
        ds.bags[0].instances[0, 0] = 5.0


def test_require_trainable():
    ds = BagDataset.from_arrays([np.ones((2, 3))], [0])
    with pytest.raises(DatasetError, match="positive"):
        ds.require_trainable()


def _random_dictionary(rng, d=10, T=1, M=3):
    D = rng.normal(size=(d, T + M))
    return Dictionary.from_matrix(D / np.linalg.norm(D, axis=0), T)


def test_dictionary_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    D = _random_dictionary(rng)
    save_dictionary(D, tmp_path / "d.json")
    back = load_dictionary(tmp_path / "d.json")
    assert np.max(np.abs(back.matrix - D.matrix)) <= 1e-12
    assert (back.n_targets, back.n_backgrounds) == (1, 3)


def test_dictionary_zero_targets_rejected(tmp_path):
    rng = np.random.default_rng(3)
    save_dictionary(_random_dictionary(rng), tmp_path / "d.json")
    doc = json.loads((tmp_path / "d.json").read_text())
    doc["n_targets"] = 0
    doc["targets"] = []
    (tmp_path / "d.json").write_text(json.dumps(doc))
    with pytest.raises(DatasetError):
        load_dictionary(tmp_path / "d.json")


def test_dictionary_strict_norm(tmp_path):
    rng = np.random.default_rng(4)
    D = _random_dictionary(rng).matrix.copy()
    D[:, 2] *= 0.5
    with pytest.raises(DatasetError, match="unit norm"):
        save_dictionary(Dictionary.from_matrix(D, 1), tmp_path / "d.json")
    save_dictionary(Dictionary.from_matrix(D, 1), tmp_path / "d.json", strict=False)
    with pytest.raises(DatasetError):
        load_dictionary(tmp_path / "d.json")
    with pytest.warns(UserWarning, match="renormaliz"):
        fixed = load_dictionary(tmp_path / "d.json", renormalize=True)
    assert fixed.is_unit_norm()


def test_dictionary_mutations_rejected(tmp_path):
    rng = np.random.default_rng(5)
    save_dictionary(_random_dictionary(rng), tmp_path / "d.json")
    base = json.loads((tmp_path / "d.json").read_text())
    mutations = [
        lambda d: d.pop("targets"),
        lambda d: d.update(n_bands=9),
        lambda d: d.update(n_backgrounds=2),
        lambda d: d["backgrounds"][0].append(0.0),
        lambda d: d.update(targets="abc"),
    ]
    for mutate in mutations:
        doc = json.loads(json.dumps(base))
        mutate(doc)
        (tmp_path / "m.json").write_text(json.dumps(doc))
        with pytest.raises(DatasetError):
            load_dictionary(tmp_path / "m.json")


def test_spectral_library_round_trip(tmp_path):
    spectra = synthetic_endmembers()
    save_spectral_library(spectra, tmp_path / "lib.csv")
    back = load_spectral_library(tmp_path / "lib.csv")
    assert len(back) == 4 and all(s.n_bands == 211 for s in back)
    assert [s.name for s in back] == [s.name for s in spectra]
    assert np.array_equal(back[0].wavelengths, WAVELENGTHS)
    assert back[0].wavelengths[0] == pytest.approx(0.4) and back[0].wavelengths[-1] == pytest.approx(2.5)
    for a, b in zip(spectra, back):
        assert np.array_equal(a.values, b.values)


@pytest.mark.parametrize(
    "text, match",
    [
        ("wavelength\n0.4\n0.5\n", "no spectrum columns"),
        ("wavelength,a,a\n0.4,1,2\n", "duplicate"),
        ("wavelength,a\n0.4,1,2\n", "ragged"),
        ("wavelength,a\n0.5,1\n0.4,1\n", "increasing"),
        ("wavelength,a\n0.4,x\n", "non-numeric"),
    ],
)
def test_spectral_library_errors(tmp_path, text, match):
    (tmp_path / "lib.csv").write_text(text)
    with pytest.raises(DatasetError, match=match):
        load_spectral_library(tmp_path / "lib.csv")


def test_spectral_library_tab_delimited(tmp_path):
    (tmp_path / "lib.txt").write_text("wavelength\ta\tb\n0.4\t0.1\t0.2\n0.5\t0.3\t0.4\n")
    a, b = load_spectral_library(tmp_path / "lib.txt")
    assert a.name == "a" and np.array_equal(b.values, [0.2, 0.4])


def test_spectrum_validation():
    with pytest.raises(DatasetError):
        Spectrum([1.0, 2.0], wavelengths=[0.5, 0.4])
    with pytest.raises(DatasetError):
        Spectrum([1.0, np.inf])


def test_truth_file_matches_generator(tmp_path):
    res = generate(table1_config(points_per_bag=30, targets_per_positive_bag=5, seed=3))
    res.save(tmp_path)
    truth = load_truth(tmp_path / "truth.csv")
    assert np.array_equal(truth.labels, res.labels)
    assert np.array_equal(truth.proportions, res.proportions)


def test_hyperparams_defaults_and_rho():
    hp = HyperParams()
    assert (hp.p, hp.beta, hp.lam, hp.n_targets, hp.max_outer_iters, hp.obj_tol) == (5.0, 5.0, 1e-3, 1, 100, 1e-6)
    ds = BagDataset.from_arrays([np.ones((3, 2)), np.ones((6, 2))], [1, 0])
    assert hp.resolved_rho(ds) == 0.5
    ds = BagDataset.from_arrays([np.ones((6, 2)), np.ones((3, 2))], [1, 0])
    assert hp.resolved_rho(ds) == 1.0


@pytest.mark.parametrize("bad", [dict(p=0), dict(beta=0), dict(lam=-1), dict(rho=1.5), dict(rho=0),
                                 dict(n_targets=0), dict(step_size=0), dict(init_quantile=0)])
def test_hyperparams_validation(bad):
    with pytest.raises(ValueError):
        HyperParams(**bad)


def test_normalize_rows_and_dataset():
    from mihe.data import normalize_dataset, normalize_rows

    X = normalize_rows([[3.0, 4.0], [0.0, 2.0]])
    assert np.array_equal(X, [[0.6, 0.8], [0.0, 1.0]])
    with pytest.raises(DatasetError):
        normalize_rows([[0.0, 0.0]])
    ds = BagDataset.from_arrays([np.array([[3.0, 4.0]]), np.array([[0.0, 5.0]])], [1, 0])
    out = normalize_dataset(ds)
    assert [b.id for b in out.bags] == [b.id for b in ds.bags]
    assert np.allclose(np.linalg.norm(out.instances(), axis=1), 1.0)
