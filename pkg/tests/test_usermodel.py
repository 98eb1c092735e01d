import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cirslab import env as E
from cirslab import nncore as nn
from cirslab import usermodel as U
from cirslab.env import InteractionRecord as Rec


def unit_params(n_users=1, n_items=4, **kw):
    return U.ExposureParams.neutral(n_users, n_items, **kw)


def test_predict_interest_examples():
    m = U.InterestModel(2, 3, dim=2, zero=True)
    assert m.predict_interest(1, 2) == 0.0
    m.params["bias"].data[:] = 0.7
    assert U.predict_interest(0, 0, m) == pytest.approx(0.7)
    m.params["bias"].data[:] = 0.0
    m.params["emb_user"].data[0] = [1.0, 0.0]
    m.params["emb_item"].data[1] = [1.0, 0.0]
    # the MLP contributes nothing with zero output weights
    assert m.predict_interest(0, 1) == pytest.approx(1.0)
    with pytest.raises(KeyError):
        m.predict_interest(2, 0)


def test_exposure_effect_examples():
    ep = unit_params(tau=1.0)
    dist = np.ones((4, 4))
    assert U.exposure_effect([], 0, 1, 5.0, ep, dist=dist) == 0.0
    one = [Rec(0, 0, 4.0, 1.0)]
    assert U.exposure_effect(one, 0, 1, 5.0, ep, dist=dist) == pytest.approx(math.exp(-1), abs=1e-6)
    two = [Rec(0, 2, 3.0, 1.0)] + one
    assert U.exposure_effect(two, 0, 1, 5.0, ep, dist=dist) == pytest.approx(0.503215, abs=1e-6)
    assert U.exposure_effect(two, 0, 1, 5.0, unit_params(tau=0.0), dist=dist) == 0.0
    with pytest.raises(ValueError):
        U.exposure_effect([Rec(0, 0, 5.0, 1.0)], 0, 1, 5.0, ep, dist=dist)


def test_exposure_uses_catalog_distance():
    cat = E.ItemCatalog.from_tags([[0], [1], [0]], 2)
    ep = unit_params(n_items=3, tau=1.0)
    hist = [Rec(0, 1, 0.0, 1.0), Rec(0, 2, 1.0, 1.0)]
    want = math.exp(-2 * 1.0) + math.exp(-1 * 0.0)
    assert U.exposure_effect(hist, 0, 0, 2.0, ep, catalog=cat) == pytest.approx(want, abs=1e-12)


def test_counterfactual_exposure_examples():
    ep = unit_params(tau_star=1.0)
    dist = np.ones((4, 4))
    assert U.counterfactual_exposure([], 0, 1, 3, ep, dist=dist) == 0.0
    e = U.counterfactual_exposure([(0, 2)], 0, 1, 3, ep, dist=dist)
    assert e == pytest.approx(3.67879, abs=1e-5)
    assert U.satisfaction(1.0, e) == pytest.approx(0.21370, abs=1e-4)


def test_satisfaction_examples():
    assert U.satisfaction(0.3, 0.0) == 0.3
    assert U.satisfaction(0.8, 1.0) == pytest.approx(0.4)
    with pytest.raises(ValueError):
        U.satisfaction(1.0, -0.1)


def brute_exposure(history, u, i, t, alpha, beta, tau, dist):
    if tau == 0:
        return 0.0
    total = 0.0
    for r in history:
        if r.user == u:
            total += math.exp(-((t - r.t) / tau) * dist[i][r.item])
    return math.log1p(math.exp(alpha[u])) * math.log1p(math.exp(beta[i])) * total


def test_exposure_matches_brute_force_on_random_histories():
    rng = np.random.default_rng(0)
    n_users, n_items = 5, 12
    dist = rng.random((n_items, n_items))
    for _ in range(100):
        ep = U.ExposureParams(rng.normal(size=n_users), rng.normal(size=n_items),
                              tau=float(rng.uniform(0.1, 5)), tau_star=float(rng.uniform(0.1, 5)),
                              gamma_star=float(rng.uniform(1, 20)))
        k = int(rng.integers(0, 15))
        times = np.sort(rng.uniform(0, 50, size=k))
        hist = [Rec(int(rng.integers(n_users)), int(rng.integers(n_items)), float(t), 1.0) for t in times]
        u, i, t = int(rng.integers(n_users)), int(rng.integers(n_items)), 50.5
        want = brute_exposure(hist, u, i, t, ep.alpha_raw, ep.beta_raw, ep.tau, dist)
        assert abs(U.exposure_effect(hist, u, i, t, ep, dist=dist) - want) <= 1e-12 * max(1, abs(want))
        steps = [(int(rng.integers(n_items)), s) for s in range(k)]
        traj_hist = [Rec(u, it, float(s), 0.0) for it, s in steps]
        want = ep.gamma_star * brute_exposure(traj_hist, u, i, k, ep.alpha_raw, ep.beta_raw, ep.tau_star, dist)
        got = U.counterfactual_exposure(steps, u, i, k, ep, dist=dist)
        assert abs(got - want) <= 1e-12 * max(1, abs(want))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.floats(0.1, 10), st.floats(0, 1)), min_size=1, max_size=6),
       st.integers(0, 5), st.floats(0.01, 3), st.floats(0.01, 1), st.floats(0.1, 100))
def test_exposure_monotone_and_scale_invariant(pairs, which, dgap, ddist, scale):
    k = which % len(pairs)

    def effect(gaps, dists, tau=1.5, times_scale=1.0):
        n = len(gaps)
        dist = np.zeros((n + 1, n + 1))
        dist[n, :n] = dists
        p = U.ExposureParams.neutral(1, n + 1, tau=tau)
        t = 100.0 * times_scale
        hist = sorted((Rec(0, j, t - g * times_scale, 1.0) for j, g in enumerate(gaps)), key=lambda r: r.t)
        return U.exposure_effect(hist, 0, n, t, p, dist=dist)

    gaps = [g for g, _ in pairs]
    dists = [d for _, d in pairs]
    base = effect(gaps, dists)
    assert base >= 0
    wider = list(gaps)
    wider[k] += dgap
    assert effect(wider, dists) <= base + 1e-15
    farther = list(dists)
    farther[k] += ddist
    assert effect(gaps, farther) <= base + 1e-15
    assert effect(gaps + [50.0], dists + [0.5]) >= base
    assert effect(gaps, dists, tau=1.5 * scale, times_scale=scale) == pytest.approx(base, rel=1e-9)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 10), st.floats(0, 10))
def test_satisfaction_never_exceeds_interest(y, e):
    r = U.satisfaction(y, e)
    assert r <= y
    if e == 0:
        assert r == y
    elif y > 0 and 1.0 + e > 1.0:
        assert r < y


def small_logs(n_users=20, n_items=50, seed=0, per_user=30):
    ratings, cat, _ = E.synth_env(E.SynthSpec(n_users=n_users, n_items=n_items, seed=seed))
    logs, alpha = E.generate_logs(ratings, cat, E.LogSpec(records_per_user=per_user, seed=seed))
    return logs, cat, alpha


def test_exposure_sums_match_per_record_effect():
    logs, cat, _ = small_logs(4, 10, per_user=12)
    dist = cat.distance_matrix()
    sums = U.exposure_sums(logs, dist, 2.0, chunk=5)
    ep = unit_params(4, 10, tau=2.0)
    for k in range(0, len(logs), 7):
        r = logs[k]
        hist = [h for h in logs if h.user == r.user and h.t < r.t]
        for i in (0, 3, r.item):
            assert sums[k, i] == pytest.approx(U.exposure_effect(hist, r.user, i, r.t, ep, dist=dist), abs=1e-12)


def test_training_loss_gradient_through_alpha_and_beta():
    logs, cat, _ = small_logs(3, 8, per_user=6)
    dist = cat.distance_matrix()
    rng = np.random.default_rng(2)
    model = U.InterestModel(3, 8, dim=3, hidden=4, rng=rng)
    U.attach_exposure(model, U.ExposureParams(rng.normal(size=3), rng.normal(size=8), tau=2.0))
    users = np.array([r.user for r in logs])
    items = np.array([r.item for r in logs])
    sums = U.exposure_sums(logs, dist, 2.0)
    pos = sums[np.arange(len(logs)), items]
    targets = rng.random(len(logs))
    mse = nn.ComputeGraph(lambda p, _: U.training_loss(model, users, items, pos, targets=targets), model.params)
    assert nn.gradient_check(mse, epsilon=1e-6) < 1e-4
    neg = (items + 1) % 8
    bpr = nn.ComputeGraph(lambda p, _: U.training_loss(model, users, items, pos, neg_items=neg,
                                                        neg_sums=sums[np.arange(len(logs)), neg],
                                                        loss="bpr"), model.params)
    assert nn.gradient_check(bpr, epsilon=1e-6) < 1e-4
    bpr.forward()
    grads = bpr.backward()
    assert np.abs(grads["alpha_raw"]).sum() > 0 and np.abs(grads["beta_raw"]).sum() > 0


def test_loss_examples():
    model = U.InterestModel(2, 3, zero=True)
    U.attach_exposure(model, unit_params(2, 3))
    users, items, zeros = np.array([0, 1]), np.array([0, 2]), np.zeros(2)
    bpr = U.training_loss(model, users, items, zeros, neg_items=np.array([1, 1]), neg_sums=zeros, loss="bpr")
    assert bpr.item() == pytest.approx(math.log(2), abs=1e-6)
    model.params["bias"].data[:] = 0.6
    mse = U.training_loss(model, users, items, zeros, targets=np.full(2, 0.6))
    assert mse.item() == 0.0


def test_training_halves_loss():
    logs, cat, _ = small_logs(20, 50)
    model, _ = U.train_user_model(logs, U.TrainConfig(epochs=30), 20, 50, catalog=cat)
    assert len(model.loss_curve) == 30
    assert model.loss_curve[-1] < 0.5 * model.loss_curve[0]


def test_bpr_training_decreases_loss():
    logs, cat, _ = small_logs(20, 50)
    model, _ = U.train_user_model(logs, U.TrainConfig(loss="bpr", epochs=30), 20, 50, catalog=cat)
    assert model.loss_curve[0] == pytest.approx(np.log(2), abs=0.05)
    assert model.loss_curve[-1] < 0.6 * model.loss_curve[0]


def test_training_errors():
    with pytest.raises(U.TrainingError):
        U.train_user_model([], U.TrainConfig(), 1, 1, dist=np.zeros((1, 1)))
    with pytest.raises(ValueError):
        U.TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        U.ExposureParams.neutral(1, 1, tau=-1.0)
    logs, cat, _ = small_logs(2, 5, per_user=4)
    with pytest.raises(U.TrainingError, match="non-finite"):
        U.train_user_model(logs, U.TrainConfig(epochs=2, lr=float("nan")), 2, 5, catalog=cat)


def test_training_is_deterministic():
    logs, cat, _ = small_logs(5, 12, per_user=10)
    cfg = U.TrainConfig(epochs=3)
    a, _ = U.train_user_model(logs, cfg, 5, 12, catalog=cat)
    b, _ = U.train_user_model(logs, cfg, 5, 12, catalog=cat)
    assert a.interest.tobytes() == b.interest.tobytes()
    assert a.exposure.alpha_raw.tobytes() == b.exposure.alpha_raw.tobytes()


def trained_model(tau_star=0.5):
    logs, cat, _ = small_logs(4, 10, per_user=15)
    model, _ = U.train_user_model(logs, U.TrainConfig(epochs=3, tau_star=tau_star), 4, 10, catalog=cat)
    return model


def test_counterfactual_reward_examples():
    model = trained_model()
    u, i = 1, 3
    assert model.counterfactual_reward([], u, i, 0) == model.interest[u, i]
    rewards = [model.counterfactual_reward([(i, s) for s in range(t)], u, i, t) for t in range(6)]
    if model.interest[u, i] > 0:
        assert all(b < a for a, b in zip(rewards, rewards[1:]))
    ablated = model.with_tau_star(0.0)
    assert ablated.counterfactual_reward([(i, 0), (i, 1)], u, i, 2) == model.interest[u, i]


def test_batch_rewards_match_scalar_reward():
    model = trained_model()
    rng = np.random.default_rng(4)
    past = rng.integers(0, 10, size=(6, 5))
    users = rng.integers(0, 4, size=6)
    items = rng.integers(0, 10, size=6)
    got = model.batch_rewards(users, past, items)
    for b in range(6):
        traj = [(int(it), s) for s, it in enumerate(past[b])]
        assert got[b] == pytest.approx(model.counterfactual_reward(traj, users[b], items[b], 5), abs=1e-12)
    np.testing.assert_array_equal(model.batch_rewards(users, past[:, :0], items), model.interest[users, items])


def test_model_save_load_round_trip(tmp_path):
    model = trained_model()
    model.save(tmp_path / "m.npz")
    back = U.CausalUserModel.load(tmp_path / "m.npz")
    assert back.interest.tobytes() == model.interest.tobytes()
    assert back.exposure.beta_raw.tobytes() == model.exposure.beta_raw.tobytes()
    assert (back.exposure.tau, back.exposure.tau_star, back.exposure.gamma_star) == \
        (model.exposure.tau, model.exposure.tau_star, model.exposure.gamma_star)
    assert back.loss_curve == model.loss_curve


def test_bpr_negatives_are_unobserved():
    rng = np.random.default_rng(0)
    seen = np.zeros((2, 6), dtype=bool)
    seen[0, :3] = True
    seen[1, :] = True
    users = np.array([0] * 50 + [1] * 5)
    items = np.array([0] * 50 + [2] * 5)
    neg = U._sample_negatives(users, items, seen, rng)
    assert set(neg[:50]) <= {3, 4, 5}
    assert 2 not in set(neg[50:])
