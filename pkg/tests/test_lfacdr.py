import numpy as np
import pytest
from dataclasses import replace

from conftest import split_of
from cdrae import lfacdr
from cdrae.config import LfacdrConfig, StageConfig
from cdrae.data import RatingMatrix, SyntheticSpec, apply_cold_start, generate_synthetic
from cdrae.numerics import max_relative_error, numeric_gradient


def positive_biases(nets, seed=0):
    rng = np.random.default_rng(seed)
    for net in nets:
        for layer in net.layers:
            layer.bias[:] = rng.uniform(0.1, 0.3, layer.bias.shape)


def tiny_ratings(seed=0, shape=(6, 5)):
    rng = np.random.default_rng(seed)
    dense = np.where(rng.uniform(size=shape) < 0.6, rng.uniform(0.1, 1.0, shape), 0.0)
    dense[0, 0] = 0.5
    return RatingMatrix.from_dense(dense)


def tiny_config(**kw):
    return LfacdrConfig(hidden=(5,), latent_dim=3, mapper_hidden=(4,), batch_size=4, **kw)


def test_published_architecture(reference_pair):
    model = lfacdr.build_model(reference_pair, LfacdrConfig(), seed=0)
    d = model.source
    assert d.item_encoder.sizes == [300, 512, 256, 128]
    assert d.item_decoder.sizes == [128, 256, 512, 300]
    assert d.user_encoder.sizes == [200, 512, 256, 128]
    assert model.mapper.sizes == [128, 256, 128]
    assert LfacdrConfig().batch_size == 500 and LfacdrConfig().lam == 1.0


def test_latents_start_at_encoder_outputs(small_pair, small_lfacdr_config):
    model = lfacdr.build_model(small_pair, small_lfacdr_config, 0)
    d = model.source
    np.testing.assert_array_equal(d.item_latents, d.item_encoder(small_pair.source.item_rows()))
    np.testing.assert_array_equal(d.user_latents, d.user_encoder(small_pair.source.user_rows()))


@pytest.mark.parametrize("lam,l2", [(1.0, 0.0), (0.3, 1e-2)])
def test_joint_loss_gradients(lam, l2):
    ratings = tiny_ratings(1)
    config = replace(tiny_config(), lam=lam)
    dom = lfacdr.build_domain(ratings, config, np.random.default_rng(2))
    positive_biases(dom.networks().values())
    items, users = np.array([0, 2, 3, 5]), np.array([1, 0, 4])
    _, analytic = lfacdr.joint_latent_loss(dom, ratings, items, users, l2)
    numeric = numeric_gradient(lambda: lfacdr.joint_latent_loss(dom, ratings, items, users, l2)[0],
                               dom.params())
    assert max_relative_error(analytic, numeric) < 1e-4


def test_joint_loss_terms_by_hand():
    ratings = tiny_ratings(3)
    dom = lfacdr.build_domain(ratings, tiny_config(), np.random.default_rng(4))
    R = ratings.dense()
    X, Y = dom.item_latents + 0.1, dom.user_latents - 0.05
    dom.item_latents[:], dom.user_latents[:] = X, Y

    def mmse(p, t):
        m = t > 0
        return np.mean((p - t)[m] ** 2)

    expected = (mmse(dom.item_decoder(X), R) + mmse(dom.user_decoder(Y), R.T)
                + np.mean((Y - dom.user_encoder(R.T)) ** 2) + np.mean((X - dom.item_encoder(R)) ** 2)
                + dom.lam * mmse(X @ Y.T, R))
    value, _ = lfacdr.joint_latent_loss(dom, ratings)
    assert value == pytest.approx(expected, rel=1e-12)
    assert lfacdr.joint_latent_loss(dom, R)[0] == value


def coupled_fixture(axis):
    spec = SyntheticSpec(m=7, n=6, rank=2, source_sparsity=0.4, target_sparsity=0.4, shared_axis=axis, seed=8)
    pair = generate_synthetic(spec)[0]
    model = lfacdr.build_model(pair, tiny_config(), 3)
    positive_biases([model.mapper, *model.source.networks().values(), *model.target.networks().values()])
    return pair, model


@pytest.mark.parametrize("axis", ["items", "users"])
def test_coupled_loss_gradients(axis):
    pair, model = coupled_fixture(axis)
    shared, other = np.array([0, 2, 3]), np.arange(4)
    _, analytic = lfacdr.coupled_loss(model, pair, shared, other, 1e-3)
    numeric = numeric_gradient(lambda: lfacdr.coupled_loss(model, pair, shared, other, 1e-3)[0],
                               lfacdr.coupled_params(model))
    assert set(analytic) == set(numeric)
    assert max_relative_error(analytic, numeric) < 1e-4


def frozen_parts(model):
    axis = model.shared_axis
    other = "users" if axis == "items" else "items"
    parts = {
        "source_decoders": [model.source.item_decoder, model.source.user_decoder],
        "target_decoders": [model.target.item_decoder, model.target.user_decoder],
        "source_other_encoder": [model.source.encoder(other)],
        "target_shared_encoder": [model.target.encoder(axis)],
    }
    snap = {k: [(l.weights.copy(), l.bias.copy()) for n in v for l in n.layers] for k, v in parts.items()}
    snap["source_other_latents"] = [model.source.latents(other).copy()]
    snap["target_shared_latents"] = [model.target.latents(axis).copy()]
    return snap


@pytest.mark.parametrize("axis", ["items", "users"])
def test_coupled_stage_isolation(axis, small_pair, small_user_pair, small_lfacdr_config):
    pair = small_pair if axis == "items" else small_user_pair
    plan = split_of(pair)
    train, _ = apply_cold_start(pair, plan)
    model = lfacdr.init_stage(train, plan.train, small_lfacdr_config, seed=0)
    before = frozen_parts(model)
    mapper_before = model.mapper.layers[0].weights.copy()
    lfacdr.coupled_stage(model, train, plan.train, small_lfacdr_config, seed=0)
    after = frozen_parts(model)
    for key in before:
        for a, b in zip(before[key], after[key]):
            for x, y in zip(a if isinstance(a, tuple) else (a,), b if isinstance(b, tuple) else (b,)):
                assert np.array_equal(x, y), key
    assert not np.array_equal(mapper_before, model.mapper.layers[0].weights)
    assert model.history["coupled"][-1] < model.history["coupled"][0]


def test_wrong_scenario_rejected(small_pair, small_user_pair, small_lfacdr_config):
    m = lfacdr.build_model(small_pair, small_lfacdr_config, 0)
    with pytest.raises(ValueError):
        lfacdr.coupled_stage_users(m, small_pair, [0, 1], small_lfacdr_config)
    u = lfacdr.build_model(small_user_pair, small_lfacdr_config, 0)
    with pytest.raises(ValueError):
        lfacdr.coupled_stage_items(u, small_user_pair, [0, 1], small_lfacdr_config)
    with pytest.raises(ValueError):
        lfacdr.predict_user_level(m, small_pair.source_rows([0]))


def test_soft_constraint_fidelity_noiseless():
    spec = SyntheticSpec(m=40, n=50, rank=3, noise=0.0, source_sparsity=0.6, target_sparsity=0.7, seed=6)
    pair = generate_synthetic(spec)[0]
    config = LfacdrConfig(hidden=(32, 16), latent_dim=4, mapper_hidden=(8,), batch_size=16,
                          init=StageConfig(60, 1e-3, 1e-5))
    model = lfacdr.init_stage(pair, np.arange(pair.n_shared), config, seed=0)
    d = model.source
    tie = np.sum((d.item_latents - d.item_encoder(pair.source.item_rows())) ** 2)
    assert tie / d.item_latents.size < 1e-2
    h = model.history["init_mapper"]
    assert h[-1] < h[0]
    assert model.history["init_source"][-1] < model.history["init_source"][0]


def test_predictions(small_pair, small_user_pair, small_lfacdr_config):
    for pair in (small_pair, small_user_pair):
        plan = split_of(pair)
        train, _ = apply_cold_start(pair, plan)
        model = lfacdr.train(train, plan.train, small_lfacdr_config, seed=1)
        rows = lfacdr.predict_shared_rows(model, train.source_rows(plan.test))
        n_other = pair.target.axis_size(pair.other_axis)
        assert rows.shape == (plan.test.size, n_other)
        assert rows.min() >= 0.0 and rows.max() <= 1.0
    cols = lfacdr.predict_user_level(model, train.source_rows(plan.test))
    assert cols.shape == (small_user_pair.target.n_items, plan.test.size)


def test_training_is_deterministic(small_pair, small_lfacdr_config):
    plan = split_of(small_pair)
    a = lfacdr.train(small_pair, plan.train, small_lfacdr_config, seed=3)
    b = lfacdr.train(small_pair, plan.train, small_lfacdr_config, seed=3)
    np.testing.assert_array_equal(a.source.item_latents, b.source.item_latents)
    np.testing.assert_array_equal(a.mapper.layers[-1].weights, b.mapper.layers[-1].weights)
    assert a.history == b.history
