import numpy as np
import pytest

from heartpfl import akt
from heartpfl import models as M
from heartpfl import tensor as T
from heartpfl.data import generate_gaussian_mixture
from heartpfl.tensor import Tensor

import oracles
from conftest import randomized, tiny_spec


@pytest.fixture
def fleet(rng):
    data = generate_gaussian_mixture(3, 4, 40, 2.0, seed=11)
    base = M.pretrain_and_freeze(tiny_spec(), data.X, data.y, epochs=1, seed=2)
    return randomized(base, rng), [randomized(base, rng) for _ in range(3)], data


def linear_logits(W, b):
    return lambda x: T.matmul(x, Tensor(W)) + Tensor(b)


def small_cfg(**kw):
    base = dict(epochs=3, batch_size=16, pgd=akt.PgdConfig(epsilon=0.2, steps=2))
    base.update(kw)
    return akt.AktConfig(**base)


# ---------------------------------------------------------------- configs


def test_pgd_config():
    assert akt.PgdConfig().alpha == pytest.approx(0.025)
    assert akt.PgdConfig(epsilon=0.1, step_size=0.05).alpha == 0.05
    with pytest.raises(ValueError):
        akt.PgdConfig(epsilon=-0.1)
    with pytest.raises(ValueError):
        akt.PgdConfig(steps=0)
    with pytest.raises(ValueError):
        akt.PgdConfig(epsilon=0.1, step_size=0.2)
    assert akt.PgdConfig(epsilon=0.1, step_size=0.2, allow_large_step=True).alpha == 0.2


def test_akt_config_needs_a_view():
    with pytest.raises(ValueError):
        akt.AktConfig(use_clean=False, use_adversarial=False)
    with pytest.raises(ValueError):
        akt.AktConfig(reduction="max")


@pytest.mark.parametrize("clean,adv,skl", [(True, False, False), (False, True, False), (True, False, True),
                                           (True, True, False), (False, True, True), (True, True, True)])
def test_ablation_lattice_reachable(fleet, rng, clean, adv, skl):
    g, locals_, data = fleet
    cfg = small_cfg(use_clean=clean, use_adversarial=adv, use_symmetric_kl=skl, epochs=1)
    views = akt.build_proxy_views(data.X, data.y, locals_, g, cfg, rng)
    assert len(views) == int(clean) + (len(locals_) + 1) * int(adv)
    adapter, trace = akt.akt_update(g, locals_, data.X, data.y, True, cfg, rng)
    assert len(trace) == 3 and set(adapter) == set(g.adapter)


# ---------------------------------------------------------------- ensemble / losses


def test_ensemble_matches_direct_average(fleet):
    _, locals_, data = fleet
    got = akt.ensemble_probs(locals_, data.X)
    rows = [oracles.softmax_loop(M.logits(m, data.X).data) for m in locals_]
    want = np.array([[sum(r[i][j] for r in rows) / len(rows) for j in range(3)] for i in range(len(data.X))])
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)
    np.testing.assert_allclose(got.sum(axis=1), 1.0, atol=1e-12)


def test_ensemble_of_one_is_its_softmax(fleet):
    _, locals_, data = fleet
    np.testing.assert_allclose(akt.ensemble_probs(locals_[:1], data.X),
                               T.softmax_array(M.logits(locals_[0], data.X).data), rtol=0, atol=1e-15)
    with pytest.raises(ValueError):
        akt.ensemble_probs([], data.X)


def test_ekt_loss_matches_oracle(fleet):
    g, locals_, data = fleet
    teacher = akt.ensemble_probs(locals_, data.X)
    student = oracles.softmax_loop(M.logits(g, data.X).data)
    assert akt.ekt_loss(g, locals_, data.X).item() == pytest.approx(oracles.kl_loop(teacher, student), abs=1e-10)


def test_symmetric_kl_decomposes(fleet):
    g, locals_, data = fleet
    teacher = akt.ensemble_probs(locals_, data.X)
    student = T.softmax_array(M.logits(g, data.X).data)
    skl = akt.symmetric_kl_loss(g, locals_, data.X).item()
    forward = akt.ekt_loss(g, locals_, data.X).item()
    assert skl == pytest.approx(forward + oracles.kl_loop(student, teacher), abs=1e-10)


def test_symmetric_kl_zero_when_global_equals_single_local(fleet):
    g, _, data = fleet
    assert akt.symmetric_kl_loss(g, [g], data.X).item() == pytest.approx(0.0, abs=1e-15)


def test_sum_reduction_scales_by_batch(fleet):
    g, locals_, data = fleet
    mean = akt.ekt_loss(g, locals_, data.X).item()
    total = akt.ekt_loss(g, locals_, data.X, reduction="sum").item()
    assert total == pytest.approx(mean * len(data.X), rel=1e-12)


# ---------------------------------------------------------------- PGD


def test_pgd_stays_in_ball(fleet, rng):
    g, _, data = fleet
    for eps, steps in [(0.05, 1), (0.3, 4), (1.0, 7)]:
        x_adv = akt.pgd_generate(data.X, data.y, g, akt.PgdConfig(epsilon=eps, steps=steps), rng)
        assert np.max(np.abs(x_adv - data.X)) <= eps


def test_pgd_zero_epsilon_is_identity(fleet, rng):
    g, _, data = fleet
    x_adv = akt.pgd_generate(data.X, data.y, g, akt.PgdConfig(epsilon=0.0), rng)
    assert x_adv.tobytes() == data.X.tobytes()


def test_pgd_linear_single_step_oracle(rng):
    W, b = rng.normal(size=(5, 4)), rng.normal(size=4)
    X, y = rng.normal(size=(6, 5)), rng.integers(0, 4, size=6)
    cfg = akt.PgdConfig(epsilon=0.3, step_size=0.1, steps=1, random_init=False)
    got = akt.pgd_generate(X, y, linear_logits(W, b), cfg, rng)
    p = oracles.softmax_loop(X @ W + b)
    p[np.arange(6), y] -= 1.0
    want = X + 0.1 * np.sign(p @ W.T)
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_pgd_increases_loss(fleet, rng):
    g, _, data = fleet
    cfg = akt.PgdConfig(epsilon=0.5, steps=5, random_init=False)
    x_adv = akt.pgd_generate(data.X, data.y, g, cfg, rng)
    before = T.cross_entropy(M.logits(g, data.X), data.y).item()
    assert T.cross_entropy(M.logits(g, x_adv), data.y).item() > before


def test_pgd_is_seeded(fleet):
    g, _, data = fleet
    cfg = akt.PgdConfig(epsilon=0.2, steps=3)
    a = akt.pgd_generate(data.X, data.y, g, cfg, np.random.default_rng(4))
    b = akt.pgd_generate(data.X, data.y, g, cfg, np.random.default_rng(4))
    assert a.tobytes() == b.tobytes()


def test_views_order(fleet):
    g, locals_, data = fleet
    cfg = small_cfg()
    views = akt.build_proxy_views(data.X, data.y, locals_, g, cfg, np.random.default_rng(0))
    assert views[0] is data.X
    rng = np.random.default_rng(0)
    first = akt.pgd_generate(data.X, data.y, locals_[0], cfg.pgd, rng)
    assert views[1].tobytes() == first.tobytes()


def test_pseudo_labels_for_out_of_domain(fleet):
    g, _, data = fleet
    assert akt.proxy_labels(data.y, True, g, data.X) is not None
    np.testing.assert_array_equal(akt.proxy_labels(data.y, True, g, data.X), data.y)
    np.testing.assert_array_equal(akt.proxy_labels(data.y, False, g, data.X), M.predict(g, data.X))


# ---------------------------------------------------------------- update


def test_update_leaves_locals_and_backbone(fleet, rng):
    g, locals_, data = fleet
    before = [M.adapter_checksum(m.adapter) for m in [g, *locals_]]
    bb = g.backbone.checksum()
    akt.akt_update(g, locals_, data.X, data.y, True, small_cfg(), rng)
    assert before == [M.adapter_checksum(m.adapter) for m in [g, *locals_]]
    assert g.backbone.checksum() == bb


def test_update_reduces_symmetric_kl(fleet):
    g, locals_, data = fleet
    cfg = small_cfg(epochs=20, lr=1e-2, use_adversarial=False)
    adapter, trace = akt.akt_update(g, locals_, data.X, data.y, True, cfg, np.random.default_rng(0))
    before = akt.symmetric_kl_loss(g, locals_, data.X).item()
    after = akt.symmetric_kl_loss(g.with_adapter(adapter), locals_, data.X).item()
    assert after < before
    assert trace[-1] < trace[0]


def test_clean_one_way_is_plain_ekt(fleet):
    g, locals_, data = fleet
    cfg = small_cfg(use_adversarial=False, use_symmetric_kl=False)
    a, ta = akt.akt_update(g, locals_, data.X, data.y, True, cfg, np.random.default_rng(3))
    b, tb = akt.ekt_update(g, locals_, data.X, cfg, np.random.default_rng(3))
    assert M.adapter_checksum(a) == M.adapter_checksum(b) and ta == tb


def test_zero_epochs_returns_copy(fleet, rng):
    g, locals_, data = fleet
    adapter, trace = akt.akt_update(g, locals_, data.X, data.y, True, small_cfg(epochs=0), rng)
    assert trace == [] and M.adapter_checksum(adapter) == M.adapter_checksum(g.adapter)
