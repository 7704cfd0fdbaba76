import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from layerquant.errors import DegenerateActivations, InvalidInput
from layerquant.importance import (
    ImportanceReport,
    build_report,
    descending_order,
    lim_from_traces,
    lim_scores,
    zd_from_weights,
    zd_scores,
)
from layerquant.model import BLOCK_MATRICES


def identity_block(model, i):
    d = model.config.d_model
    return model.with_weights({f"blocks.{i}.attn_o": np.zeros((d, d), np.float32),
                               f"blocks.{i}.mlp_out": np.zeros((model.config.d_ff, d), np.float32)})


def test_lim_identity_block(tiny_model, tiny_batch):
    m = identity_block(tiny_model, 2)
    lim = lim_scores(m, tiny_batch)
    assert lim[2] == pytest.approx(-1, abs=1e-6)
    assert all(-1 <= v <= 1 for v in lim)


def test_lim_synthetic_traces():
    x = np.random.default_rng(0).normal(size=(7, 5))
    orth_in = np.array([[1.0, 0.0], [0.0, 3.0]])
    orth_out = np.array([[0.0, 2.0], [-1.0, 0.0]])
    lim = lim_from_traces([(x, x), (x, -x), (orth_in, orth_out), (np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]))])
    assert lim[0] == pytest.approx(-1, abs=1e-6)
    assert lim[1] == pytest.approx(1, abs=1e-6)
    assert lim[2] == pytest.approx(0, abs=1e-6)
    assert lim[3] == pytest.approx(-0.7071, abs=1e-4)


def test_lim_skips_zero_positions():
    a = np.array([[0.0, 0.0], [1.0, 0.0]])
    b = np.array([[1.0, 0.0], [1.0, 0.0]])
    assert lim_from_traces([(a, b)]) == [-1.0]
    with pytest.raises(DegenerateActivations):
        lim_from_traces([(np.zeros((3, 2)), b[:1].repeat(3, 0))])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-10, 10)),
       arrays(np.float64, (6, 4), elements=st.floats(-10, 10)),
       st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_lim_scale_invariant(a, b, c1, c2):
    ok = (np.linalg.norm(a, axis=1) > 1e-6) & (np.linalg.norm(b, axis=1) > 1e-6)
    if not ok.any():
        return
    a, b = a[ok], b[ok]
    base = lim_from_traces([(a, b)])[0]
    assert lim_from_traces([(c1 * a, c2 * b)])[0] == pytest.approx(base, abs=1e-9)


def test_zd_examples():
    assert zd_from_weights([np.array([0, 0, 0, 0, 10.0])]) == 0.2
    assert zd_from_weights([np.full((3, 3), 0.7)]) == 0.0
    two = [np.array([0.0, 0.0]), np.array([0.0, 0.0, 10.0])]
    assert zd_from_weights(two) == 0.2
    assert zd_from_weights([np.array([-10.0, 0, 0, 0, 0])], two_sided=True) == 0.2
    assert zd_from_weights([np.array([-10.0, 0, 0, 0, 0])]) == 0.0


def test_zd_normal_samples():
    w = np.random.default_rng(11).standard_normal(1_000_000)
    assert abs(zd_from_weights([w]) - 0.158655) <= 0.003


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(2, 200), elements=st.floats(-5, 5)),
       st.floats(0.01, 100), st.floats(-100, 100))
def test_zd_affine_invariant(w, c, d):
    z = (w - w.mean()) / w.std() if w.std() > 1e-6 else None
    if z is None or np.any(np.abs(z - 1) < 1e-6):
        return  # values sitting on the threshold may flip under rounding
    assert abs(zd_from_weights([c * w + d]) - zd_from_weights([w])) <= 1e-9


def test_zd_scores_per_block(tiny_model):
    zd = zd_scores(tiny_model)
    assert len(zd) == tiny_model.n_layers and all(0 <= v <= 1 for v in zd)
    per = zd_scores(tiny_model, pooled=False)
    assert per[0] == pytest.approx(np.mean([zd_from_weights([m]) for m in tiny_model.block_matrices(0)]))
    assert len(BLOCK_MATRICES) == 6


def test_descending_order():
    assert descending_order([0.9, 0.1, 0.5, 0.7]) == [0, 3, 2, 1]
    assert descending_order([0.3] * 5) == [0, 1, 2, 3, 4]
    assert descending_order([1, 2, 2, 0]) == [1, 2, 0, 3]


def test_report(tiny_model, tiny_batch):
    r = build_report(tiny_model, tiny_batch)
    assert r.calibration_fingerprint == tiny_batch.fingerprint
    for name, scores in (("lim", r.lim), ("zd", r.zd)):
        o = r.order(name)
        assert sorted(o) == list(range(4))
        assert all(scores[a] >= scores[b] for a, b in zip(o, o[1:]))
    assert r.order("reverse_lim") == r.order("lim")[::-1]
    back = ImportanceReport.from_json(r.to_json())
    assert back == r
    assert r.to_csv().splitlines()[0] == "layer,lim,zd"
    with pytest.raises(InvalidInput):
        r.order("random")
    with pytest.raises(InvalidInput):
        build_report(tiny_model, None, scores=("lim",))
    zd_only = build_report(tiny_model, scores=("zd",))
    assert zd_only.calibration_fingerprint == ""
    with pytest.raises(InvalidInput):
        zd_only.order("lim")
