import logging

import numpy as np
import pytest

from gdfolio import finance as F
from gdfolio import oracle, tape
from gdfolio.data import ReturnsPanel, SyntheticMarketSpec, synthesize
from gdfolio.engine import (Adam, GradientDescent, LossSpec, Term, TrainConfig, compliance,
                            compose_loss, grid_search, initial_pre_weights, replication_study,
                            train)
from gdfolio.errors import ConfigError, TrainingError


def _dates(T):
    return [f"2024-01-{d:02d}" for d in range(1, T + 1)]


def test_term_defaults_and_validation():
    assert Term("cvar").params == {"alpha": 0.05}
    assert Term("ucits540").params == {"lower": 0.05, "upper": 0.40}
    with pytest.raises(ConfigError, match="unknown term kind"):
        Term("sortino")
    with pytest.raises(ConfigError, match="missing parameter 'te_max'"):
        Term("te")
    with pytest.raises(ConfigError, match="unknown parameters"):
        Term("cvar", params={"beta": 1})
    with pytest.raises(ConfigError):
        Term("cvar", -1.0)
    with pytest.raises(ConfigError):
        Term("count_range", params={"low": 5, "high": 2})


def test_loss_spec_validation():
    with pytest.raises(ConfigError, match="objective"):
        LossSpec([Term("ucits10")])
    with pytest.raises(ConfigError, match="duplicate"):
        LossSpec([Term("cvar"), Term("cvar")])
    spec = LossSpec([Term("cvar"), Term("cvar", params={"alpha": 0.1}, name="cvar10")])
    assert spec.labels == ["cvar", "cvar10"]


def test_train_config_validation():
    for bad in ({"learning_rate": 0}, {"epochs": 0}, {"optimizer": "sgd"},
                {"projection": "argmax"}, {"init_scale": -1}):
        with pytest.raises(ConfigError):
            TrainConfig(**bad)


def test_single_term_identity(small_panel):
    z = np.random.default_rng(0).normal(size=5)
    loss = compose_loss(LossSpec([Term("cvar")]), small_panel, z)
    value = tape.forward(loss.total)
    w = tape.sparsemax_kernel(z)
    assert value == pytest.approx(F.cvar(small_panel.returns @ w, 0.05), abs=1e-15)


def test_sharpe_enters_negated(small_panel):
    z = np.random.default_rng(1).normal(size=5)
    loss = compose_loss(LossSpec([Term("sharpe"), Term("cvar")]), small_panel, z)
    R = small_panel.returns @ tape.sparsemax_kernel(z)
    assert tape.forward(loss.total) == pytest.approx(-F.sharpe_ratio(R) + F.cvar(R), rel=1e-12)


def test_zero_weight_terms_do_not_change_value(small_panel):
    z = np.random.default_rng(2).normal(size=5)
    base = tape.forward(compose_loss(LossSpec([Term("volatility")]), small_panel, z).total)
    spec = LossSpec([Term("volatility"), Term("ucits10", 0.0), Term("cvar", 0.0)])
    assert tape.forward(compose_loss(spec, small_panel, z).total) == pytest.approx(base, abs=1e-18)


def test_scaling_all_multipliers_scales_loss(small_panel):
    z = np.random.default_rng(3).normal(size=5)
    spec = LossSpec([Term("cvar", 2.0), Term("ucits10", 0.5), Term("te", 3.0, {"te_max": 0.0})])
    a = tape.forward(compose_loss(spec, small_panel, z).total)
    scaled = spec.with_weights({t.label: 7.0 * t.weight for t in spec.terms})
    assert tape.forward(compose_loss(scaled, small_panel, z).total) == pytest.approx(7.0 * a, rel=1e-12)


def test_composed_gradient_matches_finite_difference(small_panel):
    spec = LossSpec([Term("sharpe"), Term("cvar", 2.0), Term("te", 1.0, {"te_max": 0.0}),
                     Term("mean_variance", 1.0)])
    rng = np.random.default_rng(4)
    for _ in range(20):
        z = rng.normal(size=5)
        loss = compose_loss(spec, small_panel)
        tape.forward(loss.total, {loss.z: z})
        g = tape.backward(loss.total)[loss.z]

        def f(x):
            other = compose_loss(spec, small_panel, x)
            return float(tape.forward(other.total))
        fd = tape.finite_difference(f, z)
        assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(g)


def test_te_needs_benchmark():
    panel = ReturnsPanel(["a", "b"], _dates(3), np.ones((3, 2)) * 0.01)
    with pytest.raises(ConfigError, match="benchmark"):
        compose_loss(LossSpec([Term("cvar"), Term("te", params={"te_max": 0.01})]), panel)


def test_mean_variance_two_asset_vertex():
    r = np.tile([0.01, -0.01], (10, 1))
    panel = ReturnsPanel(["up", "down"], _dates(10), r)
    trace = train(LossSpec([Term("mean_variance", params={"risk_aversion": 0.0})]), panel,
                  TrainConfig(0.01, 500))
    best, _ = oracle.simplex_grid_search(lambda W: oracle.batch_mean_variance(W, r, 0.0), 2, 0.01)
    assert np.array_equal(trace.weights, [1.0, 0.0]) and np.array_equal(best, [1.0, 0.0])


def test_identical_columns_stay_uniform():
    col = np.random.default_rng(5).normal(0, 0.01, size=40)
    panel = ReturnsPanel(list("abcd"), _dates(28) + [f"2024-02-{d:02d}" for d in range(1, 13)],
                         np.tile(col[:, None], (1, 4)))
    for kind in ("sparsemax", "softmax"):
        trace = train(LossSpec([Term("cvar"), Term("sharpe")]), panel,
                      TrainConfig(0.01, 200, projection=kind), z0=np.zeros(4))
        assert np.max(np.abs(trace.weights - 0.25)) <= 1e-6


def test_trace_shape_and_decomposition(small_panel):
    spec = LossSpec([Term("sharpe"), Term("cvar", 3.0), Term("ucits10", 2.0)])
    trace = train(spec, small_panel, TrainConfig(0.01, 50))
    assert trace.epochs == 50 and set(trace.terms) == set(spec.labels)
    total = sum(trace.terms[k] for k in spec.labels)
    assert np.max(np.abs(total - trace.losses)) <= 1e-12
    assert trace.final_loss == pytest.approx(sum(trace.final_terms.values()), abs=1e-12)


def test_train_is_deterministic(small_panel):
    spec = LossSpec([Term("cvar"), Term("ucits540")])
    a = train(spec, small_panel, TrainConfig(0.01, 100, seed=4))
    b = train(spec, small_panel, TrainConfig(0.01, 100, seed=4))
    assert np.array_equal(a.losses, b.losses) and np.array_equal(a.weights, b.weights)
    c = train(spec, small_panel, TrainConfig(0.01, 100, seed=5))
    assert not np.array_equal(a.losses, c.losses)


def test_weights_valid_every_epoch(small_panel):
    spec = LossSpec([Term("sharpe")])
    loss = compose_loss(spec, small_panel)
    z = initial_pre_weights(5, TrainConfig(seed=1))
    opt = Adam(0.05)
    for _ in range(200):
        tape.forward(loss.total, {loss.z: z})
        w = loss.weights.value
        assert np.all(w >= 0) and abs(w.sum() - 1) <= 1e-9
        z = opt.step(z, tape.backward(loss.total)[loss.z])


def test_initialisation_range():
    z = initial_pre_weights(1000, TrainConfig(seed=3, init_scale=2.0))
    assert np.all(np.abs(z) <= 0.02) and z.std() > 0.005


def test_optimisers():
    assert np.array_equal(GradientDescent(0.5).step(np.array([1.0]), np.array([2.0])), [0.0])
    adam = Adam(0.1)
    # first Adam step moves every coordinate by about lr in the descent direction
    step = adam.step(np.zeros(3), np.array([5.0, -0.001, 0.0]))
    assert np.allclose(step[:2], [-0.1, 0.1], atol=1e-5) and step[2] == 0.0


def test_gd_optimizer_also_trains(small_panel):
    trace = train(LossSpec([Term("volatility")]), small_panel, TrainConfig(0.05, 300, optimizer="gd"))
    assert trace.final_loss < trace.losses[0]


def test_non_monotonic_run_is_flagged(caplog):
    # a perfect hedge starts near zero volatility; a huge step lands on a vertex
    r = np.array([[0.01, -0.01], [-0.01, 0.01]] * 5)
    panel = ReturnsPanel(["a", "b"], _dates(10), r)
    with caplog.at_level(logging.WARNING):
        trace = train(LossSpec([Term("volatility")]), panel, TrainConfig(1e6, 3, optimizer="gd"),
                      z0=np.array([0.001, 0.0]))
    assert trace.non_monotonic and trace.final_loss > trace.losses[0]
    assert "exceeds initial loss" in caplog.text
    quiet = train(LossSpec([Term("volatility")]), panel, TrainConfig(0.01, 3, optimizer="gd"),
                  z0=np.array([0.001, 0.0]))
    assert not quiet.non_monotonic


def test_training_error_on_degenerate_sharpe():
    panel = ReturnsPanel(["a", "b"], _dates(4), np.full((4, 2), 0.01))
    with pytest.raises(TrainingError, match="epoch 0") as info:
        train(LossSpec([Term("sharpe")]), panel, TrainConfig(0.01, 5))
    assert info.value.epoch == 0


def test_compliance_rows():
    rng = np.random.default_rng(6)
    r = rng.normal(0, 0.01, size=(30, 4))
    panel = ReturnsPanel(list("abcd"), _dates(30), r, r.mean(axis=1), "idx")
    w = np.array([0.7, 0.3, 0.0, 0.0])
    spec = LossSpec([Term("cvar"), Term("ucits10"), Term("ucits540"),
                     Term("te", params={"te_max": 1.0}), Term("min_weight", params={"m": 0.01}),
                     Term("count_range", params={"low": 1, "high": 2})])
    rows = {c.label: c for c in compliance(spec, w, panel)}
    assert not rows["ucits10"].satisfied and rows["ucits10"].residual == pytest.approx(0.8)
    assert not rows["ucits540"].satisfied and rows["ucits540"].residual == pytest.approx(0.6)
    assert rows["te"].satisfied and rows["te"].residual == 0.0
    assert rows["min_weight"].satisfied and rows["count_range"].satisfied


def test_grid_single_cell_equals_train(small_panel):
    spec = LossSpec([Term("cvar"), Term("ucits10", 0.3)])
    cfg = TrainConfig(0.01, 80)
    rows = grid_search(spec, {"ucits10": [1.0]}, small_panel, cfg)
    trace = train(spec.with_weights({"ucits10": 1.0}), small_panel, cfg)
    assert len(rows) == 1 and np.array_equal(rows[0].weights, trace.weights)
    assert rows[0].objective == trace.objective


def test_grid_order_and_parallel_determinism(small_panel):
    spec = LossSpec([Term("cvar"), Term("ucits10"), Term("ucits540")])
    grid = {"ucits10": [0.0, 1.0], "ucits540": [0.0, 0.5, 2.0]}
    cfg = TrainConfig(0.01, 30)
    serial = grid_search(spec, grid, small_panel, cfg)
    assert [tuple(r.lambdas.values()) for r in serial] == [
        (0.0, 0.0), (0.0, 0.5), (0.0, 2.0), (1.0, 0.0), (1.0, 0.5), (1.0, 2.0)]
    parallel = grid_search(spec, grid, small_panel, cfg, workers=2)
    assert [r.objective for r in serial] == [r.objective for r in parallel]


def test_grid_records_cell_errors():
    panel = ReturnsPanel(["a", "b"], _dates(4), np.full((4, 2), 0.01))
    rows = grid_search(LossSpec([Term("sharpe"), Term("ucits10")]), {"ucits10": [0.0, 1.0]},
                       panel, TrainConfig(0.01, 3))
    assert len(rows) == 2 and all("TrainingError" in r.error for r in rows)
    with pytest.raises(ConfigError):
        grid_search(LossSpec([Term("sharpe")]), {"ucits10": [1.0]}, panel, TrainConfig())


def test_replication_two_asset_deterministic_case():
    t = np.arange(30)
    r = np.column_stack([0.002 + 0.01 * np.sin(t), 0.001 + 0.01 * np.cos(0.7 * t)])
    panel = ReturnsPanel(["a", "b"], [f"d{t:02d}" for t in range(30)], r)
    result = replication_study(panel, 1, 2, LossSpec([Term("sharpe")]), TrainConfig(0.01, 500))
    assert result.weight_mse <= 1e-4


def test_replication_is_seeded(small_panel):
    spec, cfg = LossSpec([Term("cvar")]), TrainConfig(0.01, 50)
    a = replication_study(small_panel, 3, 2, spec, cfg, max_assets=3, step=0.05, seed=1)
    b = replication_study(small_panel, 3, 2, spec, cfg, max_assets=3, step=0.05, seed=1)
    assert [r.assets for r in a.rows] == [r.assets for r in b.rows]
    assert a.weight_mse == b.weight_mse
    with pytest.raises(ConfigError):
        replication_study(small_panel, 0, 2, spec, cfg)
    with pytest.raises(ConfigError):
        replication_study(small_panel, 1, 9, spec, cfg)


def test_replication_records_oracle_refusal():
    panel = synthesize(SyntheticMarketSpec.random(12, 40, seed=0))
    result = replication_study(panel, 1, 12, LossSpec([Term("cvar")]), TrainConfig(0.01, 5))
    assert "EnumerationError" in result.rows[0].error
