import math

import numpy as np
import pytest

from gpml import episodes as E
from gpml import metalearn as ml
from gpml import models
from gpml.diffcore import ParamSet


@pytest.fixture(scope="module")
def synth():
    return E.make_synthetic_source(seed=0)


def fresh_params(seed=0):
    bb = models.BackboneSpec("mlp", (20,))
    return models.init_params(bb, models.HeadSpec(64, 5), models.GraphModuleSpec(), seed=seed)


def episode(src, seed, q=15):
    return E.sample_episode(src, 5, 1, q, seed=seed)


def test_zero_alpha_identity(synth):
    p = fresh_params()
    ep = episode(synth.train, 0)
    for algo in ml.INNER_GROUPS:
        out = ml.inner_adapt(algo, p, ep.support_x, ep.support_y, 0.0, steps=3)
        assert out.equal(p)


@pytest.mark.parametrize("algo,frozen", [("anil", ["body", "graph"]), ("boil", ["head", "graph"]),
                                         ("maml", ["graph"])])
def test_inner_groups_frozen(synth, algo, frozen):
    p = fresh_params()
    ep = episode(synth.train, 1)
    out = ml.inner_adapt(algo, p, ep.support_x, ep.support_y, 0.5, steps=2)
    assert out.equal(p, frozen)
    moving = [g for g in ("body", "head") if g not in frozen]
    assert not out.equal(p, moving)


def test_inner_adapt_leaves_input_untouched(synth):
    p = fresh_params()
    copy = {n: v.copy() for n, v in p.items()}
    ep = episode(synth.train, 2)
    ml.inner_adapt("maml", p, ep.support_x, ep.support_y, 0.5)
    assert all(np.array_equal(p[n], copy[n]) for n in p)


def test_inner_adapt_non_finite_names_step(synth):
    ep = episode(synth.train, 3)
    sx = ep.support_x.copy()
    sx[2, 4] = np.inf
    with pytest.raises(ml.AdaptationError, match="step 0"), np.errstate(all="ignore"):
        ml.inner_adapt("maml", fresh_params(), sx, ep.support_y, 0.5)


def test_empty_pick_equals_plain(synth):
    p = fresh_params()
    ep = episode(synth.test, 4)
    cfg = ml.MetaConfig(pick_cap=0)
    rep = ml.gp_adapt(p, ep, cfg)
    assert rep.picked_k == 0 and rep.support_size == 5
    plain = ml.adapt(p, ep, ml.with_overrides(cfg, gp_enabled=False))
    assert rep.params.equal(plain.params)


def test_support_expansion_balanced(synth):
    p = fresh_params()
    for seed in range(10):
        ep = episode(synth.test, seed)
        rep = ml.gp_adapt(p, ep, ml.MetaConfig())
        k = rep.picked_k
        assert rep.support_size == 5 * (1 + k)
        assert np.all(rep.picked.per_class == k)
        assert np.array_equal(np.bincount(rep.picked.labels, minlength=5), np.full(5, k))


def test_pseudo_labels_accurate_on_separable_episode(synth):
    p = fresh_params()
    ep = episode(synth.test, 11)
    rep = ml.gp_adapt(p, ep, ml.MetaConfig())
    assert rep.picked_k >= 1
    assert np.array_equal(rep.picked.labels, ep.query_y[rep.picked.indices])


@pytest.mark.parametrize("algo", sorted(ml.INNER_GROUPS))
def test_query_labels_never_read(synth, algo):
    p = fresh_params()
    cfg = ml.MetaConfig(algorithm=algo)
    for seed in range(3):
        ep = episode(synth.test, seed)
        a = ml.gp_adapt(p, ep, cfg)
        b = ml.gp_adapt(p, ep.without_labels(), cfg)
        assert a.params.equal(b.params)


def test_task_has_no_labels(synth):
    task = episode(synth.test, 0).task()
    assert not hasattr(task, "query_y")


def test_zero_outer_steps_unchanged(synth):
    p = fresh_params()
    eps = [episode(synth.train, s) for s in range(2)]
    new, loss, _ = ml.outer_step(p, eps, ml.MetaConfig(beta=0.0, gamma=0.0))
    assert new.equal(p) and math.isfinite(loss)


def test_graph_untouched_without_gp(synth):
    p = fresh_params()
    eps = [episode(synth.train, s) for s in range(2)]
    new, _, _ = ml.outer_step(p, eps, ml.MetaConfig(gp_enabled=False, beta=0.1, gamma=0.1))
    assert new.equal(p, ["graph"])
    assert not new.equal(p, ["body"])


def test_graph_moves_with_gp(synth):
    p = fresh_params()
    eps = [episode(synth.train, s) for s in range(2)]
    new, _, _ = ml.outer_step(p, eps, ml.MetaConfig(beta=0.0, gamma=0.1))
    assert new.equal(p, ["body", "head"])
    assert not new.equal(p, ["graph"])


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        ml.outer_step(fresh_params(), [], ml.MetaConfig())


def _sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def _scalar_grads(theta, c, w, b, x, y):
    """Hand-derived gradients for logits (w0*h + b0, w1*h + b1), h = theta*x + c > 0.

    Two-class softmax is a logistic model in z0 - z1, so dL/dz0 = p0 - [y=0]
    and dL/dz1 = -dL/dz0.
    """
    g_theta = g_c = g_w0 = g_b0 = 0.0
    for xi, yi in zip(x, y):
        h = theta * xi + c
        assert h > 0
        dz0 = _sigmoid((w[0] - w[1]) * h + b[0] - b[1]) - (1.0 if yi == 0 else 0.0)
        g_theta += dz0 * (w[0] - w[1]) * xi
        g_c += dz0 * (w[0] - w[1])
        g_w0 += dz0 * h
        g_b0 += dz0
    n = len(x)
    return g_theta / n, g_c / n, (g_w0 / n, -g_w0 / n), (g_b0 / n, -g_b0 / n)


def test_first_order_maml_scalar_oracle():
    theta, w = 0.8, (0.3, -0.2)
    params = ParamSet({"body.fc0.w": np.array([[theta]]), "body.fc0.b": np.zeros(1),
                       "head.w": np.array([[w[0]], [w[1]]]), "head.b": np.zeros(2)},
                      {"body.fc0.w": "body", "body.fc0.b": "body",
                       "head.w": "head", "head.b": "head"})
    sx, sy = np.array([1.0, 2.0]), np.array([0, 1])
    qx, qy = np.array([0.5, 1.5, 3.0]), np.array([1, 0, 1])
    ep = E.Episode(sx[:, None], sy, qx[:, None], qy, n_way=2)
    alpha, beta = 0.4, 0.1
    cfg = ml.MetaConfig(gp_enabled=False, alpha=alpha, beta=beta, n_way=2)
    new, _, _ = ml.outer_step(params, [ep], cfg)

    gt, gc, gw, gb = _scalar_grads(theta, 0.0, w, (0.0, 0.0), sx, sy)
    theta_a, c_a = theta - alpha * gt, -alpha * gc
    w_a = (w[0] - alpha * gw[0], w[1] - alpha * gw[1])
    b_a = (-alpha * gb[0], -alpha * gb[1])
    # first order: query gradient at the adapted point, applied to the start point
    qt, qc, qw, qb = _scalar_grads(theta_a, c_a, w_a, b_a, qx, qy)
    assert new["body.fc0.w"][0, 0] == pytest.approx(theta - beta * qt, abs=1e-12)
    assert new["body.fc0.b"][0] == pytest.approx(-beta * qc, abs=1e-12)
    assert new["head.w"][:, 0] == pytest.approx([w[0] - beta * qw[0], w[1] - beta * qw[1]], abs=1e-12)
    assert new["head.b"] == pytest.approx([-beta * qb[0], -beta * qb[1]], abs=1e-12)


def test_no_training_returns_initial(synth):
    p = fresh_params()
    res = ml.meta_train(p, ml.MetaConfig(total_episodes=0), synth.train, synth.val)
    assert res.params.equal(p) and res.log == []


def test_lr_schedule():
    cfg = ml.MetaConfig(total_episodes=30000)
    assert cfg.lr_factor(0) == 1.0
    assert cfg.lr_factor(9999) == 1.0
    assert cfg.lr_factor(10000) == pytest.approx(0.1)
    assert cfg.beta * cfg.lr_factor(20000) == pytest.approx(1e-3 / 100)


def test_training_log_and_determinism(synth):
    cfg = ml.MetaConfig(total_episodes=24, meta_batch=4, val_every=12, val_episodes=5, seed=3)
    a = ml.meta_train(fresh_params(), cfg, synth.train, synth.val)
    b = ml.meta_train(fresh_params(), cfg, synth.train, synth.val)
    assert a.params.equal(b.params) and a.log == b.log
    assert [r["episode"] for r in a.log] == [4, 8, 12, 16, 20, 24]
    assert [r["val_acc"] is not None for r in a.log] == [False, False, True, False, False, True]
    assert set(a.log[0]) == {"episode", "meta_loss", "val_acc", "lr", "picked_mean_k"}


def test_training_beats_chance(synth):
    cfg = ml.MetaConfig(gp_enabled=False, total_episodes=2000, val_episodes=100, val_every=2000)
    res = ml.meta_train(fresh_params(), cfg, synth.train, synth.val)
    assert not res.aborted
    assert res.log[-1]["val_acc"] >= 0.20 + 0.25


def test_training_abort_keeps_log(synth):
    p = fresh_params()
    p = p.replace({"head.w": p["head.w"] * 1e306})
    with np.errstate(all="ignore"):
        res = ml.meta_train(p, ml.MetaConfig(total_episodes=8), synth.train)
    assert res.aborted and res.log == [] and "non-finite" in res.message


def test_chance_level_without_adaptation(synth):
    cfg = ml.MetaConfig(gp_enabled=False, alpha=0.0)
    res = ml.meta_test(fresh_params(5), cfg, synth.test, 600)
    assert 0.15 <= res.mean <= 0.25


def test_single_episode_ci(synth):
    with pytest.warns(ml.DegenerateSampleWarning):
        res = ml.meta_test(fresh_params(), ml.MetaConfig(), synth.test, 1)
    assert res.ci95 == 0.0 and res.episodes == 1 and res.warnings


def test_ci_formula():
    accs = np.array([0.2, 0.4, 0.6, 0.8])
    res = ml.summarize(accs)
    assert res.ci95 == pytest.approx(1.96 * accs.std(ddof=1) / 2)


def test_threaded_eval_matches(synth, monkeypatch):
    p = fresh_params()
    cfg = ml.MetaConfig()
    serial = ml.meta_test(p, cfg, synth.test, 8)
    monkeypatch.setenv("GPML_THREADS", "3")
    threaded = ml.meta_test(p, cfg, synth.test, 8)
    assert np.array_equal(serial.accuracies, threaded.accuracies)


def test_correct_pseudo_labels_do_not_hurt(synth):
    # 200 episodes: retraining with k true-labeled queries per class vs support only
    p = fresh_params()
    cfg = ml.MetaConfig(gp_enabled=False, alpha=0.5)
    base, more = [], []
    for seed in range(200):
        ep = episode(synth.test, seed)
        plain = ml.inner_adapt("maml", p, ep.support_x, ep.support_y, cfg.alpha)
        idx = np.concatenate([np.flatnonzero(ep.query_y == c)[:3] for c in range(5)])
        x2 = np.concatenate([ep.support_x, ep.query_x[idx]])
        y2 = np.concatenate([ep.support_y, ep.query_y[idx]])
        grown = ml.inner_adapt("maml", p, x2, y2, cfg.alpha)
        base.append(np.mean(models.predict(plain, ep.query_x) == ep.query_y))
        more.append(np.mean(models.predict(grown, ep.query_x) == ep.query_y))
    assert np.mean(more) >= np.mean(base)


def test_config_validation():
    with pytest.raises(ValueError):
        ml.MetaConfig(algorithm="reptile")
    with pytest.raises(ValueError):
        ml.MetaConfig(alpha_prop=1.0)
    with pytest.raises(ValueError):
        ml.MetaConfig(inner_steps=0)
    with pytest.raises(ValueError):
        ml.MetaConfig(beta=-1.0)


def test_phase3_group_rule():
    assert ml.MetaConfig(algorithm="anil").phase3_groups == ("head",)
    assert ml.MetaConfig(algorithm="anil", retrain_groups="both").phase3_groups == ("body", "head")
    assert ml.MetaConfig(alpha=0.3).retrain_step_size == 0.3
    assert ml.MetaConfig(retrain_lr=1e-3).retrain_step_size == 1e-3


def test_classifier_all_retrain_uses_every_query(synth):
    p = fresh_params()
    ep = E.sample_episode(synth.test, 5, 1, [10, 5, 3, 2, 1], seed=0)
    cfg = ml.MetaConfig(pseudo_source="classifier", picking="all")
    rep = ml.gp_adapt(p, ep, cfg)
    assert rep.support_size == 5 + 21
