import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvcl.contrastive import (
    LossMode,
    ProjectionBatch,
    anchor_loss,
    batch_loss,
    batch_loss_backward,
    cosine_sim,
    pair_loss,
    similarity_matrices,
    two_view_lesion_loss,
)
from mvcl.errors import DataError, NoNegativesError, NumericError, UsageError
from oracles import brute_force_loss, central_differences, pair_term, random_unit

INC, ASW = LossMode.CMC_INCLUSIVE, LossMode.AS_WRITTEN


def batch(z, tau=0.07, **kw):
    return ProjectionBatch(np.asarray(z, dtype=np.float64), tau=tau, **kw)


@pytest.mark.parametrize("u, v, expected", [
    ((1, 0), (0, 1), 0.0),
    ((1, 0), (1, 1), 1 / math.sqrt(2)),
    ((2, 0, 0), (-3, 0, 0), -1.0),
    ((1, 2, 3), (1, 2, 3), 1.0),
])
def test_cosine_examples(u, v, expected):
    assert cosine_sim(u, v) == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_vector():
    with pytest.raises(NumericError):
        cosine_sim((0, 0), (1, 0))


def test_mode_aliases():
    assert LossMode.parse("cmc") is INC
    assert LossMode.parse("as-written") is ASW
    assert LossMode.parse("as_written") is ASW
    with pytest.raises(ValueError):
        LossMode.parse("nope")


def test_single_lesion_inclusive_is_zero():
    z = random_unit(np.random.default_rng(0), 3, 1, 4)
    assert batch_loss(batch(z), INC).value == pytest.approx(0.0, abs=1e-12)


def test_single_lesion_as_written_has_no_negatives():
    z = random_unit(np.random.default_rng(0), 2, 1, 4)
    with pytest.raises(NoNegativesError):
        batch_loss(batch(z), ASW)


def test_batch_validation():
    with pytest.raises(DataError):
        batch(np.ones((1, 3, 2)) / math.sqrt(2))
    with pytest.raises(DataError):
        batch(np.ones((2, 3, 2)))
    with pytest.raises(DataError):
        batch(np.ones((2, 3)))
    with pytest.raises(ValueError):
        batch(random_unit(np.random.default_rng(0), 2, 2, 2), tau=0)


SHAPES = [(2, 1, 3), (2, 4, 5), (3, 5, 4), (4, 3, 8), (9, 6, 16)]


@pytest.mark.parametrize("M, N, D, mode", [(*s, m) for s in SHAPES for m in (INC, ASW) if not (m is ASW and s[1] == 1)])
@pytest.mark.parametrize("tau", [0.07, 0.5, 1.0])
def test_batch_loss_matches_brute_force(M, N, D, mode, tau):
    z = random_unit(np.random.default_rng(M * 100 + N), M, N, D)
    got = batch_loss(batch(z, tau), mode).value
    assert got == pytest.approx(brute_force_loss(z, tau, mode is INC), rel=1e-9, abs=1e-9)


def test_pair_and_anchor_losses_match_brute_force():
    z = random_unit(np.random.default_rng(1), 3, 4, 5)
    zl = z.tolist()
    b = batch(z)
    for mode in (INC, ASW):
        inc = mode is INC
        assert pair_loss(b, 0, 2, 1, mode) == pytest.approx(pair_term(zl, 0, 2, 1, 0.07, inc), rel=1e-9)
        expected = sum(pair_term(zl, 1, j, 3, 0.07, inc) for j in (0, 2))
        assert anchor_loss(b, 1, 3, mode) == pytest.approx(expected, rel=1e-9)


def test_two_view_lesion_loss():
    z = random_unit(np.random.default_rng(2), 2, 3, 4)
    zl = z.tolist()
    expected = pair_term(zl, 0, 1, 2, 0.07) + pair_term(zl, 1, 0, 2, 0.07)
    assert two_view_lesion_loss(batch(z), 2) == pytest.approx(expected, rel=1e-9)
    with pytest.raises(UsageError):
        two_view_lesion_loss(batch(random_unit(np.random.default_rng(0), 3, 3, 4)), 0)


def test_pair_index_checks():
    b = batch(random_unit(np.random.default_rng(0), 2, 3, 4))
    with pytest.raises(UsageError):
        pair_loss(b, 0, 0, 0)
    with pytest.raises(UsageError):
        pair_loss(b, 0, 1, 3)


def test_pair_terms_layout():
    z = random_unit(np.random.default_rng(3), 3, 2, 4)
    res = batch_loss(batch(z))
    assert res.pair_terms.shape == (3, 3, 2)
    assert np.all(np.isnan(res.pair_terms[[0, 1, 2], [0, 1, 2]]))
    assert res.value == pytest.approx(np.nansum(res.pair_terms) / 4)


def test_aligned_orthogonal_closed_form():
    # identical views, mutually orthogonal lesions
    N, tau = 4, 0.1
    z = np.stack([np.eye(N), np.eye(N)])
    expected_pair = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + (N - 1)))
    assert batch_loss(batch(z, tau)).value == pytest.approx(2 * N * expected_pair / (2 * N), rel=1e-12)


@pytest.mark.parametrize("mode", [INC, ASW])
@pytest.mark.parametrize("M, N", [(2, 3), (3, 4), (4, 2)])
def test_gradient_matches_finite_differences(mode, M, N):
    r = np.random.default_rng(M + 10 * N)
    z = random_unit(r, M, N, 5) * r.uniform(0.5, 2.0, size=(M, N, 1))
    _, dz = batch_loss_backward(batch(z, 0.2, check_norm=False), mode)
    numeric = central_differences(lambda zz: batch_loss(batch(zz, 0.2, check_norm=False), mode).value, z, 1e-6)
    err = np.linalg.norm(dz - numeric) / max(np.linalg.norm(dz), np.linalg.norm(numeric))
    assert err < 1e-6


def test_gradient_is_tangential():
    z = random_unit(np.random.default_rng(4), 3, 5, 6)
    _, dz = batch_loss_backward(batch(z))
    np.testing.assert_allclose((dz * z).sum(-1), 0.0, atol=1e-12)


@given(st.integers(0, 10_000), st.integers(2, 4), st.integers(2, 6))
@settings(max_examples=30, deadline=None)
def test_invariances(seed, M, N):
    r = np.random.default_rng(seed)
    z = random_unit(r, M, N, 4)
    base = batch_loss(batch(z)).value
    q, _ = np.linalg.qr(r.normal(size=(4, 4)))
    assert batch_loss(batch(z @ q)).value == pytest.approx(base, rel=1e-9)
    perm = r.permutation(N)
    assert batch_loss(batch(z[:, perm])).value == pytest.approx(base, rel=1e-9)
    vperm = r.permutation(M)
    assert batch_loss(batch(z[vperm])).value == pytest.approx(base, rel=1e-9)
    scaled = z * r.uniform(0.1, 10, size=(M, N, 1))
    assert batch_loss(batch(scaled, check_norm=False)).value == pytest.approx(base, rel=1e-9)
    assert base >= 0.0


def test_pulling_positive_closer_lowers_pair_term():
    r = np.random.default_rng(5)
    z = random_unit(r, 2, 4, 6)
    before = pair_loss(batch(z), 0, 1, 0)
    moved = z.copy()
    moved[1, 0] = moved[1, 0] + 0.5 * moved[0, 0]
    moved[1, 0] /= np.linalg.norm(moved[1, 0])
    assert cosine_sim(moved[0, 0], moved[1, 0]) > cosine_sim(z[0, 0], z[1, 0])
    assert pair_loss(batch(moved), 0, 1, 0) < before


def test_large_logits_are_stable():
    z = np.stack([np.eye(3), np.eye(3)])
    res = batch_loss(batch(z, tau=1e-3))
    assert np.isfinite(res.value) and res.value == pytest.approx(0.0, abs=1e-12)


def test_similarity_matrices_keys():
    sims = similarity_matrices(random_unit(np.random.default_rng(0), 3, 2, 4))
    assert sorted(sims) == ["0,1", "0,2", "1,0", "1,2", "2,0", "2,1"]
    assert np.array(sims["0,1"]).shape == (2, 2)
