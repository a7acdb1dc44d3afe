import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from tep import datasets


def test_mixture_constants():
    assert datasets.MIXTURE_WEIGHTS == (0.05, 0.25, 0.45, 0.25)
    assert datasets.MIXTURE_VAR == 0.05
    # components at x1 = +1 carry label +1
    for c, lab in zip(datasets.MIXTURE_CENTERS, datasets.MIXTURE_LABELS):
        assert lab == (1 if c[0] > 0 else -1)


def test_mixture_component_counts():
    ds = datasets.gen_bpm_mixture(10_000, seed=0)
    centers = np.asarray(datasets.MIXTURE_CENTERS)
    comp = np.argmin(((ds.X[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    counts = np.bincount(comp, minlength=4)
    _, p = stats.chisquare(counts, 10_000 * np.asarray(datasets.MIXTURE_WEIGHTS))
    assert p > 0.01
    assert_array_equal(ds.y, np.asarray(datasets.MIXTURE_LABELS)[comp])


def test_determinism():
    a = datasets.gen_bpm_mixture(50, seed=7)
    b = datasets.gen_bpm_mixture(50, seed=7)
    assert a.X.tobytes() == b.X.tobytes() and a.y.tobytes() == b.y.tobytes()
    c = datasets.gen_stp_clusters(50, 3, seed=7)
    d = datasets.gen_stp_clusters(50, 3, seed=7)
    assert c.X.tobytes() == d.X.tobytes()
    assert not np.array_equal(datasets.gen_bpm_mixture(50, seed=8).X, a.X)


def test_clusters_shape_and_outliers():
    ds = datasets.gen_stp_clusters(200, 3, seed=0)
    assert len(ds) == 203
    assert ds.outlier_mask.sum() == 3 and ds.outlier_mask[-3:].all()
    # outliers sit at the opposite class centre with the flipped label
    Xo, yo = ds.X[ds.outlier_mask], ds.y[ds.outlier_mask]
    assert_allclose(Xo, -yo[:, None] * np.ones(2), atol=0.5)
    clean = ds.clean
    assert len(clean) == 200 and not clean.outlier_mask.any()


def test_clusters_no_outliers():
    ds = datasets.gen_stp_clusters(100, 0, seed=1)
    assert len(ds) == 100 and not ds.outlier_mask.any()
    # near-linearly separable: the x1 + x2 = 0 rule gets most points right
    assert np.mean(np.sign(ds.X.sum(1)) == ds.y) > 0.85


def test_clusters_class_means():
    n = 4000
    ds = datasets.gen_stp_clusters(n, 0, seed=2)
    for lab in (-1, 1):
        sel = ds.y == lab
        m = ds.X[sel].mean(0)
        assert np.all(np.abs(m - lab) < 3.0 / np.sqrt(sel.sum()))
        assert_allclose(ds.X[sel].std(0), 1.0, atol=0.1)


def test_outlier_options():
    ds = datasets.gen_stp_clusters(20, 2, seed=0, outlier_label=-1, outlier_distance=3.0, outlier_noise=0.0)
    assert_allclose(ds.X[-2:], 3.0)
    assert (ds.y[-2:] == -1).all()


def test_csv_round_trip(tmp_path):
    ds = datasets.gen_stp_clusters(30, 3, seed=5)
    path = datasets.save(ds, tmp_path / "d.csv")
    back = datasets.LabeledSet.from_csv(path)
    assert_array_equal(back.X, ds.X)
    assert_array_equal(back.y, ds.y)
    assert_array_equal(back.outlier_mask, ds.outlier_mask)
    header = path.read_text().splitlines()[0]
    assert header == "x1,x2,y,is_outlier"


def test_validation():
    with pytest.raises(ValueError):
        datasets.gen_bpm_mixture(0)
    with pytest.raises(ValueError):
        datasets.gen_stp_clusters(1)
    with pytest.raises(ValueError):
        datasets.LabeledSet(np.zeros((2, 2)), [1, 0], [False, False])
    with pytest.raises(ValueError):
        datasets.LabeledSet(np.zeros((2, 2)), [1], [False, False])
