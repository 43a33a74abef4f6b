import numpy as np
import oracles
import pytest
from conftest import random_store

from dpe.config import TrainConfig
from dpe.ensemble import (EnsembleModel, TrainingError, ensemble_probabilities, init_prototypes, ips_gradient,
                          ips_loss, load_model, mean_offdiag_abs_cosine, model_from_bytes, nearest_samples,
                          predict, save_model, similarity_matrix, train_ensemble, train_member)
from dpe.optim import finite_diff_gradient
from dpe.prototype import PrototypeSet, class_probabilities, scaled_distance
from dpe.store import FormatError

SMALL = TrainConfig(n_members=3, epochs=5, batch_size=16, learning_rate=1e-2, ips_weight=10.0)


def _model(gen, n=3, k=3, d=4):
    return EnsembleModel(k, d, [PrototypeSet(gen.normal(size=(k, d)), gen.normal()) for _ in range(n)])


def test_ips_matches_oracle(gen):
    for _ in range(50):
        n, k, d = gen.integers(1, 5), gen.integers(2, 5), gen.integers(2, 8)
        stack = [gen.normal(size=(k, d)) for _ in range(n)]
        got = ips_loss(PrototypeSet(stack[-1]), [PrototypeSet(p) for p in stack[:-1]])
        assert got == pytest.approx(oracles.ips([p.tolist() for p in stack]), rel=1e-12, abs=1e-15)


def test_ips_zero_at_first_stage(gen):
    ps = PrototypeSet(gen.normal(size=(2, 3)))
    assert ips_loss(ps, []) == 0.0
    assert not np.any(ips_gradient(ps, []))


def test_ips_gradient_finite_differences(gen):
    worst = 0.0
    for _ in range(100):
        n, k, d = gen.integers(2, 5), gen.integers(2, 6), gen.integers(2, 9)
        frozen = [PrototypeSet(gen.normal(size=(k, d))) for _ in range(n - 1)]
        P = gen.normal(size=(k, d))
        g = ips_gradient(PrototypeSet(P), frozen)
        fd = finite_diff_gradient(lambda t: ips_loss(PrototypeSet(t.reshape(k, d)), frozen), P.ravel())
        worst = max(worst, np.max(np.abs(g.ravel() - fd)) / max(1e-8, np.max(np.abs(fd))))
    assert worst < 1e-5


def test_orthogonal_prototypes_have_zero_ips():
    frozen = [PrototypeSet(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))]
    assert ips_loss(PrototypeSet(np.array([[0.0, 1.0, 0.0], [1.0, 0.0, 0.0]])), frozen) == 0.0


def test_ensemble_probabilities_match_oracle(gen):
    for _ in range(100):
        m = _model(gen, n=gen.integers(1, 5), k=gen.integers(2, 5), d=gen.integers(2, 6))
        x = gen.normal(size=m.dim)
        want = oracles.ensemble_probs(x, [(p.prototypes, p.scale) for p in m.members])
        got = ensemble_probabilities(x, m)
        assert np.max(np.abs(got - want)) < 1e-12 and abs(got.sum() - 1) < 1e-9


def test_single_member_equals_member_probabilities(gen):
    m = _model(gen, n=1)
    x = gen.normal(size=4)
    assert np.array_equal(ensemble_probabilities(x, m), class_probabilities(x, m.members[0]))


def test_predict_tie_goes_to_lowest_class():
    m = EnsembleModel(2, 2, [PrototypeSet(np.array([[1.0, 0.0], [0.0, 1.0]]))])
    assert predict([1.0, 1.0], m) == 0


def test_predict_matches_bruteforce(gen):
    m = _model(gen, n=4)
    X = gen.normal(size=(1000, 4))
    members = [(p.prototypes, p.scale) for p in m.members]
    want = [oracles.argmax_low(oracles.ensemble_probs(x, members)) for x in X]
    assert predict(X, m).tolist() == want


def test_dimension_mismatch(gen):
    with pytest.raises(ValueError, match="dim"):
        ensemble_probabilities(np.ones(5), _model(gen))


def test_similarity_matrix_properties(gen):
    m = _model(gen, n=5)
    S = similarity_matrix(m, 1)
    assert np.allclose(S, S.T) and np.all(np.diag(S) == 1.0)
    same = EnsembleModel(2, 3, [PrototypeSet(np.ones((2, 3)) * (i + 1)) for i in range(3)])
    assert np.allclose(similarity_matrix(same, 0), 1.0)
    eye = EnsembleModel(1, 3, [PrototypeSet(np.eye(3)[i:i + 1]) for i in range(3)])
    assert np.allclose(similarity_matrix(eye, 0), np.eye(3))
    assert mean_offdiag_abs_cosine(eye) == 0.0


def test_nearest_samples_matches_sort_oracle(gen):
    store = random_store(gen, n=60, dim=4, k=3)
    m = _model(gen)
    idx, dist = nearest_samples(m, 1, 2, store, top_k=60)
    p, s = m.members[1].prototypes[2], m.members[1].scale
    ref = sorted(range(60), key=lambda i: (scaled_distance(store.features[i], p, s), i))
    assert idx.tolist() == ref
    assert np.all(np.diff(dist) >= 0)
    with pytest.raises(ValueError, match="top_k"):
        nearest_samples(m, 0, 0, store, top_k=61)


def test_nearest_samples_finds_planted_point(gen):
    store = random_store(gen, n=30, dim=4, k=3)
    m = EnsembleModel(3, 4, [PrototypeSet(store.features[[7, 1, 2]])])
    idx, dist = nearest_samples(m, 0, 0, store, top_k=1)
    assert idx.tolist() == [7] and dist[0] < 1e-7


def test_model_round_trip(gen, tmp_path):
    m = _model(gen)
    m.config_digest = "abc"
    save_model(m, tmp_path / "m.dpem")
    back = load_model(tmp_path / "m.dpem")
    assert back == m and back.config_digest == "abc"


@pytest.mark.parametrize("cut", [3, 20, -1])
def test_truncated_model_rejected(gen, cut):
    data = _model(gen).to_bytes()
    with pytest.raises(FormatError):
        model_from_bytes(data[:cut])


def test_model_bad_magic_and_version(gen):
    data = bytearray(_model(gen).to_bytes())
    with pytest.raises(FormatError, match="magic"):
        model_from_bytes(b"NOPE" + bytes(data[4:]))
    data[4] = 9
    with pytest.raises(FormatError, match="version"):
        model_from_bytes(bytes(data))


@pytest.fixture(scope="module")
def trained():
    g = np.random.default_rng(5)
    store = random_store(g, n=90, dim=5, k=3)
    return store, train_ensemble(store, SMALL)


def test_training_is_bit_reproducible(trained):
    store, m = trained
    assert train_ensemble(store, SMALL).to_bytes() == m.to_bytes()


def test_members_frozen_after_training(trained):
    store, m = trained
    before = [p.digest() for p in m.members]
    assert all(p.frozen for p in m.members)
    train_member(store, np.arange(store.n_samples), m.members, SMALL, 99)
    assert [p.digest() for p in m.members] == before


def test_prefix_equals_truncated_training(trained):
    store, m = trained
    short = train_ensemble(store, SMALL, n_members=2)
    assert short.to_bytes() == m.prefix(2).to_bytes()


def test_first_stage_ignores_ips_weight(trained):
    store, _ = trained
    a = train_ensemble(store, TrainConfig(n_members=1, epochs=3, ips_weight=1e5))
    b = train_ensemble(store, TrainConfig(n_members=1, epochs=3, ips_weight=0.0))
    assert a.members[0] == b.members[0]


def test_ips_reduces_similarity(trained):
    store, _ = trained
    cfg = TrainConfig(n_members=4, epochs=20, batch_size=16, learning_rate=1e-2, ips_weight=50.0)
    with_ips = train_ensemble(store, cfg)
    without = train_ensemble(store, cfg.with_arm("sampling_only"))
    assert mean_offdiag_abs_cosine(with_ips) < mean_offdiag_abs_cosine(without)


def test_training_fails_on_missing_class(trained):
    store, _ = trained
    only0 = np.flatnonzero(store.labels == 0)
    with pytest.raises(TrainingError, match="class"):
        train_member(store, only0, [], SMALL, 0)


def test_divergence_is_reported(trained):
    store, _ = trained
    with pytest.raises(TrainingError):
        train_ensemble(store, TrainConfig(n_members=2, epochs=3, learning_rate=1e300, ips_weight=1e300))


def test_init_prototypes_scale():
    ps = init_prototypes(3, 4000, 0)
    assert abs(ps.prototypes.std() - 0.01) < 5e-4 and ps.scale == 1.0
