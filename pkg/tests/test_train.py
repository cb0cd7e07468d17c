import math

import numpy as np
import pytest

from miscfilter import model, train
from miscfilter.exceptions import ConfigurationError, NumericError
from miscfilter.tensor import gradcheck

SMALL = model.NetworkConfig(base_channels=2, depth=1, kernel_size=3)


def test_charbonnier_at_zero_difference(rng):
    x = rng.uniform(size=(3, 8, 8))
    value = train.loss([x, x[:, :4, :4]], [x, x[:, :4, :4]], weights=(1.0, 1.0))
    assert value == pytest.approx(2 * train.CHARBONNIER_EPS, rel=1e-12)


def test_loss_symmetric_and_shape_checked(rng):
    a, b = rng.uniform(size=(2, 3, 6, 6))
    assert train.loss([a], [b]) == train.loss([b], [a])
    with pytest.raises(ValueError):
        train.loss([a], [b[:, :5]])


def test_loss_gradient_tight(rng):
    args = [rng.uniform(size=(3, 6, 6)), rng.uniform(size=(3, 3, 3)),
            rng.uniform(size=(3, 6, 6)), rng.uniform(size=(3, 3, 3))]
    rep = gradcheck(train.LOSS, args, tolerance=1e-4, wrt=[0, 1])
    assert rep.passed, str(rep)


def test_adam_first_step_is_minus_lr():
    cfg = train.TrainConfig()
    params = {"p": np.array([0.5])}
    train.adam_step(params, {"p": np.array([1.0])}, train.AdamState(), 1e-3, cfg)
    assert params["p"][0] == pytest.approx(0.5 - 1e-3, abs=1e-10)


def test_adam_zero_gradient_leaves_params():
    params = {"p": np.array([1.0, -2.0])}
    train.adam_step(params, {"p": np.zeros(2)}, train.AdamState(), 1e-2)
    np.testing.assert_array_equal(params["p"], [1.0, -2.0])


def test_adam_two_steps_on_quadratic_match_hand_trace():
    # f(p) = p^2 / 2 so g = p
    lr, b1, b2, eps = 0.1, 0.9, 0.999, 1e-8
    p = 1.0
    m = v = 0.0
    for t in (1, 2):
        g = p
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    params = {"p": np.array([1.0])}
    opt = train.AdamState()
    for _ in range(2):
        train.adam_step(params, {"p": params["p"].copy()}, opt, lr)
    assert abs(params["p"][0] - p) <= 1e-10


def test_adam_skips_non_finite():
    params = {"p": np.array([1.0])}
    opt = train.AdamState()
    assert not train.adam_step(params, {"p": np.array([np.nan])}, opt, 1e-2)
    assert opt.skipped == 1 and params["p"][0] == 1.0


def test_cosine_schedule():
    cfg = train.TrainConfig(steps=100)
    assert train.cosine_lr(0, cfg) == pytest.approx(2e-4)
    assert train.cosine_lr(100, cfg) == pytest.approx(1e-6)
    assert train.cosine_lr(50, cfg) == pytest.approx((2e-4 + 1e-6) / 2)
    lrs = [train.cosine_lr(t, cfg) for t in range(101)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))


def test_config_validation():
    with pytest.raises(ConfigurationError):
        train.TrainConfig(lr_start=1e-6, lr_end=1e-3).validate()
    with pytest.raises(ConfigurationError):
        train.TrainConfig(batch=0).validate()


def _data(rng, n=4, size=8):
    return (rng.uniform(size=(3, n, size, size)).astype(np.float32),
            rng.uniform(size=(3, n, size, size)).astype(np.float32))


def test_zero_steps_leave_model_unchanged(rng):
    st = model.build_model(SMALL, seed=0)
    before = st.copy()
    res = train.train(st, *_data(rng), train.TrainConfig(steps=0))
    assert res.log == []
    assert all(np.array_equal(before[k], st[k]) for k in st.params)


def test_training_is_deterministic(rng):
    x, y = _data(rng)
    cfg = train.TrainConfig(steps=4, batch=2, seed=9, lr_start=1e-3)
    runs = [train.train(model.build_model(SMALL, seed=1), x, y, cfg) for _ in range(2)]
    assert runs[0].log_lines() == runs[1].log_lines()
    assert all(np.array_equal(runs[0].state[k], runs[1].state[k]) for k in runs[0].state.params)


def test_training_reduces_loss_on_fixed_batch(rng):
    x, y = _data(rng, n=2)
    st = model.build_model(SMALL, seed=0)
    before, _, _, _ = train.loss_and_grads(st, x, y)
    train.train(st, x, y, train.TrainConfig(steps=30, batch=2, lr_start=3e-3))
    after, _, _, _ = train.loss_and_grads(st, x, y)
    assert after < before


def test_log_records_and_validation(rng):
    x, y = _data(rng)
    seen = []
    cfg = train.TrainConfig(steps=4, batch=2, val_every=2, log_every=2)
    res = train.train(model.build_model(SMALL, seed=0), x, y, cfg, val=_data(rng, size=16), callback=seen.append)
    assert [r["step"] for r in res.log] == [2, 4]
    assert seen == res.log
    assert "val_psnr" in res.log[-1] and "val_ssim" in res.log[-1]
    line = train.format_record(res.log[0])
    assert line.startswith("step=2 lr=") and "loss=" in line


def test_non_finite_loss_aborts_with_dump(rng, tmp_path):
    x, y = _data(rng)
    x[:, :, 0, 0] = np.nan
    with pytest.raises(NumericError):
        train.train(model.build_model(SMALL, seed=0), x, y, train.TrainConfig(steps=5, batch=4),
                    dump_dir=tmp_path)
    assert any(tmp_path.iterdir())


def test_smoothing_and_quartiles():
    values = list(np.linspace(10, 1, 400))
    sm = train.smoothed(values, 100)
    assert len(sm) == 400
    q = train.quartile_means(sm)
    assert len(q) == 4 and all(b <= a for a, b in zip(q, q[1:]))


def test_ablation_records_failures_and_continues(rng):
    from miscfilter.blur import SamplePair, SpecRanges

    spec = SpecRanges().sample(rng)
    pairs = [SamplePair(f"{i:06d}", "", "", spec, i, rng.uniform(size=(3, 16, 16)), rng.uniform(size=(3, 16, 16)))
             for i in range(12)]
    variants = [train.Variant("ok", SMALL, model.CouplingConfig()),
                train.Variant("bad", model.NetworkConfig(kernel_size=4), model.CouplingConfig())]
    rows = train.ablate(variants, pairs, train.TrainConfig(steps=2, batch=2))
    assert rows[0].error == "" and math.isfinite(rows[0].psnr)
    assert rows[1].error
    assert "error=" in rows[1].line()


def test_variant_lists():
    assert len(train.coupling_variants()) == 10
    names = [v.name for v in train.component_variants()]
    assert names[0] == "component_base" and names[-1] == "component_full"
    assert [v.net.kernel_size for v in train.kernel_size_variants()] == [3, 5, 7]


def test_ranking_note():
    rows = [train.AblationRow("coupling_a", "a", 1, 20.0, 0.5), train.AblationRow("coupling_i", "i", 1, 21.0, 0.5)]
    assert "shared_filter_first_ranks_first=yes" in train.ranking_note(rows)
    rows[0].psnr = 22.0
    assert "shared_filter_first_ranks_first=no" in train.ranking_note(rows)
