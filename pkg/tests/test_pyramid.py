import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.base import clone

from spi.bench.corpus import make_corpus
from spi.bench.oracle import oracle_topk
from spi.exceptions import ChecksumError, DimensionMismatchError, TrainingDivergedWarning
from spi.pyramid.consistency import semantic_consistency
from spi.pyramid.encoder import (ProgressiveEncoder, TrainingBatch, default_dims,
                                 level_configs)
from spi.pyramid.losses import (EncoderParams, LossWeights, consistency_terms, forward,
                                info_nce, total_loss)

from conftest import unit_rows


def _pad(rows, cols):
    M = np.zeros((rows, cols))
    M[:cols, :cols] = np.eye(cols)
    return M


def skip_only_params(dims=(4, 8, 12), blend=0.5):
    """F = 0, b = 0, W = identity padding, proj = truncation, R = first coordinates."""
    d1, L = dims[0], len(dims)
    reducer = np.zeros((d1, dims[-1]))
    reducer[:, :d1] = np.eye(d1)
    refine = [np.zeros((dims[i], dims[i - 1])) for i in range(1, L)]
    bias = [np.zeros(dims[i]) for i in range(1, L)]
    skip = [_pad(dims[i], d1) for i in range(1, L)]
    proj = [_pad(dims[i + 1], dims[i]).T for i in range(L - 1)]
    return EncoderParams(reducer, refine, bias, skip, proj, blend)


def test_level_configs_require_strictly_increasing_dims():
    cfgs = level_configs((16, 32, 64))
    assert [(c.level, c.dim, c.n_levels) for c in cfgs] == [(1, 16, 3), (2, 32, 3), (3, 64, 3)]
    for bad in [(16, 16, 64), (32, 16, 64), (0, 8), ()]:
        with pytest.raises(ValueError):
            level_configs(bad)


def test_default_dims():
    assert default_dims(64) == (16, 32, 64)
    assert default_dims(384) == (64, 160, 384)


def test_skip_path_only_gives_padded_coarse_vector(rng):
    enc = ProgressiveEncoder.from_params(skip_only_params())
    X = unit_rows(rng, 5, 12)
    e1, e2, _ = enc.encode(X)
    padded = np.hstack([e1, np.zeros((5, 4))])
    cos = np.sum(e2 * padded, axis=1) / np.linalg.norm(padded, axis=1)
    np.testing.assert_allclose(cos, 1.0, atol=1e-6)


def test_basis_source_maps_to_basis_coarse_vector():
    enc = ProgressiveEncoder.from_params(skip_only_params())
    x = np.zeros(12)
    x[2] = 1.0
    e1 = enc.build_pyramid(x).levels[0]
    np.testing.assert_allclose(e1, np.eye(4)[2], atol=1e-7)


def test_build_pyramid_shapes_norms_and_determinism(small_encoder, small_corpus):
    x = small_corpus.vectors[3]
    a = small_encoder.build_pyramid(x, doc_id=3)
    b = small_encoder.build_pyramid(x, doc_id=3)
    assert len(a) == 3 and [v.shape[0] for v in a.levels] == [16, 32, 64]
    for va, vb in zip(a.levels, b.levels):
        assert va.tobytes() == vb.tobytes()
        assert np.all(np.isfinite(va))
        assert abs(np.linalg.norm(va.astype(np.float64)) - 1.0) <= 1e-6


def test_encoded_levels_are_unit_norm(small_levels):
    for lv in small_levels:
        norms = np.linalg.norm(lv.astype(np.float64), axis=1)
        assert np.all(np.abs(norms - 1.0) <= 1e-6)


def test_build_pyramid_rejects_bad_input(small_encoder):
    with pytest.raises(DimensionMismatchError, match="64"):
        small_encoder.build_pyramid(np.ones(10))
    bad = np.ones(64)
    bad[5] = np.nan
    with pytest.raises(ValueError):
        small_encoder.build_pyramid(bad)


def test_fit_rejects_wrong_dimension(rng):
    with pytest.raises(DimensionMismatchError):
        ProgressiveEncoder(level_dims=(4, 8, 16)).fit(unit_rows(rng, 50, 12))


def test_transform_concatenates_levels(small_encoder, small_corpus):
    Z = small_encoder.transform(small_corpus.vectors[:7])
    assert Z.shape == (7, 16 + 32 + 64)
    parts = small_encoder.split_levels(Z)
    for a, b in zip(parts, small_encoder.encode(small_corpus.vectors[:7])):
        np.testing.assert_array_equal(a, b)


def test_sklearn_clone_and_params():
    enc = ProgressiveEncoder(level_dims=(8, 16), epochs=2, beta=1.5)
    c = clone(enc)
    assert c.get_params()["beta"] == 1.5 and c.get_params()["level_dims"] == (8, 16)


def test_fine_blend_one_keeps_the_source_ranking(rng):
    X = unit_rows(rng, 400, 16)
    enc = ProgressiveEncoder(level_dims=(4, 8, 16), fine_blend=1.0, epochs=1).fit(X)
    top = enc.encode(X)[-1]
    np.testing.assert_allclose(top, X, atol=1e-6)
    for q in unit_rows(rng, 30, 16):
        qL = enc.encode(q[None, :])[-1][0]
        assert oracle_topk(X, q, 10)[0].tolist() == oracle_topk(top, qL, 10)[0].tolist()


# -- losses ---------------------------------------------------------------------

def test_uniform_similarities_give_log_batch_size():
    for n in (2, 5, 17):
        E = np.tile(np.eye(4)[0], (n, 1))
        loss, _, _ = info_nce(E, E, 0.07)
        assert loss == pytest.approx(math.log(n), rel=1e-12)


def test_degenerate_weights_reduce_to_finest_contrastive_term(rng):
    enc = ProgressiveEncoder(level_dims=(4, 8, 16), epochs=0).fit(unit_rows(rng, 200, 16))
    X, Y = unit_rows(rng, 16, 16), unit_rows(rng, 16, 16)
    comps, _ = total_loss(enc.params_.copy(np.float64), X, Y, LossWeights((0, 0, 1), 0.0, 0.0))
    assert comps["total"] == pytest.approx(comps["retrieval"][-1], rel=1e-12)


def test_exact_projection_has_zero_consistency_loss(rng):
    p = skip_only_params(blend=0.0)
    levels = forward(p, unit_rows(rng, 9, 12)).levels
    loss, _ = consistency_terms(levels[:2], p.proj[:1])
    assert loss == pytest.approx(0.0, abs=1e-12)


def test_orthogonal_projection_costs_two_per_term():
    a = np.array([[1.0, 0.0]])
    b = np.array([[0.0, 1.0]])
    loss, _ = consistency_terms([a, b], [np.eye(2)])
    assert loss == pytest.approx(2.0)


def test_consistency_loss_matches_scalar_loops(rng):
    dims = (3, 5, 7)
    levels = [unit_rows(rng, 6, d) for d in dims]
    proj = [rng.normal(size=(dims[i], dims[i + 1])) for i in range(2)]
    got, _ = consistency_terms(levels, proj)
    want = 0.0
    for n in range(6):
        for lv in range(2):
            for i in range(dims[lv]):
                p = sum(proj[lv][i][j] * levels[lv + 1][n][j] for j in range(dims[lv + 1]))
                want += (levels[lv][n][i] - p) ** 2
    want /= 6
    assert got == pytest.approx(want, rel=1e-6)


def _finite_difference_error(params, X, Y, weights, h=1e-6):
    _, grads = total_loss(params, X, Y, weights)
    arrays = params.trainable()
    worst = 0.0
    for j, a in enumerate(arrays):
        fd = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            up = [x.copy() for x in arrays]
            dn = [x.copy() for x in arrays]
            up[j][idx] += h
            dn[j][idx] -= h
            fd[idx] = (total_loss(params.with_trainable(up), X, Y, weights, False)[0]["total"]
                       - total_loss(params.with_trainable(dn), X, Y, weights, False)[0]["total"]) / (2 * h)
        worst = max(worst, np.linalg.norm(fd - grads[j]) / max(np.linalg.norm(fd), 1e-12))
    return worst


def test_gradients_match_finite_differences_on_toy_instance(rng):
    dims = (3, 5)
    X, Y = unit_rows(rng, 3, 5), unit_rows(rng, 3, 5)
    params = EncoderParams(rng.normal(size=(3, 5)), [rng.normal(size=(5, 3))], [rng.normal(size=5) * 0.1],
                           [rng.normal(size=(5, 3))], [rng.normal(size=(3, 5))], 0.5)
    assert params.dims == dims
    assert _finite_difference_error(params, X, Y, LossWeights((0.4, 0.6), 0.7, 0.01, 0.3)) <= 1e-4


def test_training_batch_needs_two_matching_pairs(rng):
    with pytest.raises(ValueError):
        TrainingBatch(unit_rows(rng, 1, 4), unit_rows(rng, 1, 4))
    with pytest.raises(ValueError):
        TrainingBatch(unit_rows(rng, 3, 4), unit_rows(rng, 2, 4))
    assert TrainingBatch(unit_rows(rng, 3, 4), unit_rows(rng, 3, 4)).batch_size == 3


def test_explicit_pair_stream_is_used(rng):
    X = unit_rows(rng, 120, 16)
    batches = [TrainingBatch(X[i:i + 10], X[i + 1:i + 11]) for i in range(0, 100, 10)]
    enc = ProgressiveEncoder(level_dims=(4, 8, 16), epochs=2).fit(X, pairs=batches)
    assert len(enc.history_) == 2


def test_loss_weights_validation():
    for bad in [dict(alphas=(0, 0)), dict(alphas=(1, -1)), dict(alphas=(1,), beta=-1),
                dict(alphas=(1,), gamma=-1), dict(alphas=(1,), temperature=0)]:
        with pytest.raises(ValueError):
            LossWeights(**bad)


# -- training --------------------------------------------------------------------

@pytest.fixture(scope="module")
def clustered():
    return make_corpus(n_docs=5000, seed=11).vectors


def test_training_improves_held_out_loss(clustered):
    enc = ProgressiveEncoder(epochs=10).fit(clustered)
    assert enc.final_holdout_loss_ <= enc.initial_holdout_loss_
    assert len(enc.history_) == 10


def test_consistency_loss_trends_down_from_random_projections(clustered):
    enc = ProgressiveEncoder(epochs=10, proj_init="random").fit(clustered)
    cons = [h["consistency"] for h in enc.history_]
    assert all(b <= a * 1.05 for a, b in zip(cons, cons[1:]))
    assert cons[-1] < cons[0]


def test_divergence_keeps_last_finite_parameters(rng):
    X = unit_rows(rng, 300, 16)
    enc = ProgressiveEncoder(level_dims=(4, 8, 16), epochs=5, learning_rate=1e300, momentum=0.0)
    with warnings.catch_warnings(record=True) as caught, np.errstate(over="ignore", invalid="ignore"):
        warnings.simplefilter("always")
        enc.fit(X)
    assert enc.diverged_
    assert any(issubclass(w.category, TrainingDivergedWarning) for w in caught)
    assert all(np.all(np.isfinite(a)) for a in enc.params_.trainable())
    assert np.all(np.isfinite(enc.encode(X[:5])[-1]))


def test_history_csv_columns(small_encoder):
    head = small_encoder.history_csv().splitlines()[0].split(",")
    assert head == ["epoch", "retrieval_1", "retrieval_2", "retrieval_3", "consistency", "reg",
                    "total", "holdout_total"]


def test_checkpoint_round_trip(small_encoder, small_corpus, tmp_path):
    blob = small_encoder.to_bytes()
    assert blob[:4] == b"SPIE"
    again = ProgressiveEncoder.from_bytes(blob)
    assert again.to_bytes() == blob
    for a, b in zip(small_encoder.encode(small_corpus.vectors[:20]), again.encode(small_corpus.vectors[:20])):
        assert a.tobytes() == b.tobytes()
    path = tmp_path / "enc.spe"
    small_encoder.save(path)
    assert ProgressiveEncoder.load(path).to_bytes() == blob
    bad = bytearray(blob)
    bad[40] ^= 0xFF
    with pytest.raises(ChecksumError):
        ProgressiveEncoder.from_bytes(bytes(bad))


# -- consistency -------------------------------------------------------------------

def test_exact_inverse_projection_gives_unit_rho(rng):
    enc = ProgressiveEncoder.from_params(skip_only_params(blend=0.5))
    levels = enc.encode(unit_rows(rng, 50, 12))
    rep = semantic_consistency(enc, levels, 1, 2)
    assert rep.rho == pytest.approx(1.0, abs=1e-6)
    assert rep.drift == pytest.approx(0.0, abs=1e-6)
    assert rep.recall_preservation == pytest.approx(1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_rho_respects_unit_norm_bound(seed):
    r = np.random.default_rng(seed)
    dims = (3, 6, 9)
    params = EncoderParams(r.normal(size=(3, 9)), [r.normal(size=(6, 3)), r.normal(size=(9, 6))],
                           [r.normal(size=6), r.normal(size=9)],
                           [r.normal(size=(6, 3)), r.normal(size=(9, 3))],
                           [r.normal(size=(3, 6)), r.normal(size=(6, 9))], 0.5)
    enc = ProgressiveEncoder.from_params(params)
    levels = enc.encode(unit_rows(r, 40, 9))
    for lo, hi in [(1, 2), (2, 3), (1, 3)]:
        rep = semantic_consistency(enc, levels, lo, hi, k=5)
        assert -1.0 - 1e-9 <= rep.rho <= 1.0 + 1e-9
        assert rep.bound_holds
        # mean version of the same bound, exact for unit vectors
        assert rep.rho == pytest.approx(1.0 - rep.mean_sq_deviation / 2.0, abs=1e-9)
    assert dims == enc.dims_


def test_consistency_rejects_bad_levels(small_encoder, small_levels):
    with pytest.raises(ValueError):
        semantic_consistency(small_encoder, small_levels, 2, 2)
    with pytest.raises(ValueError):
        semantic_consistency(small_encoder, small_levels, 1, 4)
