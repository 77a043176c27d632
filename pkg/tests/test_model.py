import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from pydantic import ValidationError

from magan import autodiff as ad
from magan import model as mm
from magan.autodiff import Tensor
from magan.checkpoint import _serialize
from magan.data import DomainDataset, default_gaussian_spec, gen_gaussian_domains
from magan.errors import ConfigError, DimensionError, DomainError, TrainingDivergence
from magan.model import (
    HISTORY_COLUMNS,
    MaganModel,
    TrainConfig,
    correspondence_loss_semisupervised,
    correspondence_loss_unsupervised,
    discriminator_loss,
    generator_adversarial_loss,
    generator_loss,
    map_forward,
    read_history_csv,
    reconstruction_loss,
    train,
    train_step,
    write_history_csv,
)
from magan.nn import DenseLayer, Discriminator, GeneratorPair, discriminator_forward

SMALL = dict(gen_hidden=8, disc_hidden=8, minibatch_features=4, batch_size=32)


def small_model(dim1=3, dim2=4, seed=0, **over):
    cfg = TrainConfig(**{**SMALL, **over})
    return MaganModel.initialize(dim1, dim2, cfg, np.random.default_rng(seed))


def toy(points=60):
    return gen_gaussian_domains(default_gaussian_spec(points), seed=3)


def lin(W, b=None, act="linear"):
    W = np.atleast_2d(np.asarray(W, dtype=float))
    b = np.zeros(W.shape[1]) if b is None else np.asarray(b, dtype=float)
    return DenseLayer(Tensor.parameter(W), Tensor.parameter(b), act)


def scalar_pair(a_in, a_core, a_out):
    """1-D generators where every layer multiplies by a constant."""
    return GeneratorPair(
        in1=lin([[a_in]], act="leaky_relu"),
        in2=lin([[a_in]], act="leaky_relu"),
        core=lin([[a_core]], act="leaky_relu"),
        out1=lin([[a_out]]),
        out2=lin([[a_out]]),
    )


# --- config ---------------------------------------------------------------------


def test_config_defaults_follow_training_recipe():
    c = TrainConfig()
    assert (c.batch_size, c.learning_rate, c.keep_prob) == (256, 0.001, 0.9)
    assert (c.lambda_r, c.lambda_d, c.lambda_c) == (1.0, 1.0, 1.0)
    assert (c.adam_beta1, c.adam_beta2, c.adam_epsilon) == (0.9, 0.999, 1e-8)
    assert c.leaky_slope == 0.2


@pytest.mark.parametrize(
    "bad",
    [
        {"lambda_c": -1.0},
        {"keep_prob": 0.0},
        {"shared_feature_indices": ([0, 1], [0])},
        {"labeled_pairs": [(0, 0)]},
        {"no_such_field": 1},
    ],
)
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        TrainConfig(**bad)


def test_config_digest_tracks_content():
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(lambda_c=0).digest()


# --- loss terms -----------------------------------------------------------------


def test_reconstruction_examples(rng):
    x = rng.normal(size=(4, 2))
    assert reconstruction_loss(x, x).item() == 0.0
    assert reconstruction_loss(np.zeros((1, 2)), np.ones((1, 2))).item() == 1.0
    with pytest.raises(DimensionError):
        reconstruction_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_reconstruction_matches_scalar_loop(rng):
    x, y = rng.normal(size=(256, 34)), rng.normal(size=(256, 34))
    total = 0.0
    for i in range(256):
        for j in range(34):
            total += (x[i, j] - y[i, j]) ** 2
    assert reconstruction_loss(x, y).item() == pytest.approx(total / (256 * 34), rel=1e-12)


def test_generator_adversarial_examples():
    assert generator_adversarial_loss(np.full(5, 0.5)).item() == pytest.approx(math.log(2))
    assert generator_adversarial_loss(np.full(3, 1 - 1e-12)).item() == pytest.approx(0, abs=1e-6)
    v = generator_adversarial_loss([0.25, 0.75]).item()
    assert v == pytest.approx((-math.log(0.25) - math.log(0.75)) / 2)
    assert v == pytest.approx(0.8370, abs=1e-4)
    with pytest.raises(DomainError):
        generator_adversarial_loss([1.5])


def test_unsupervised_correspondence_examples(rng):
    x = rng.normal(size=(5, 3))
    mapped = x.copy()
    mapped[:, 2] += 7.0
    assert correspondence_loss_unsupervised(x, mapped, [0, 1], [0, 1]).item() == 0.0
    assert correspondence_loss_unsupervised(x, x + 1.0, [0, 1, 2], [0, 1, 2]).item() == pytest.approx(1.0)


def test_unsupervised_correspondence_slices(rng):
    x1, x12 = rng.normal(size=(20, 35)), rng.normal(size=(20, 31))
    src = sorted(rng.choice(35, 16, replace=False).tolist())
    dst = sorted(rng.choice(31, 16, replace=False).tolist())
    expected = np.mean((x1[:, src] - x12[:, dst]) ** 2)
    assert correspondence_loss_unsupervised(x1, x12, src, dst).item() == pytest.approx(expected, rel=1e-12)


def test_unsupervised_correspondence_index_errors(rng):
    x = rng.normal(size=(2, 3))
    with pytest.raises(ConfigError):
        correspondence_loss_unsupervised(x, x, [5], [0])
    with pytest.raises(ConfigError):
        correspondence_loss_unsupervised(x, x, [0, 1], [0])


def test_semisupervised_examples(rng):
    m = small_model(2, 2)
    assert correspondence_loss_semisupervised(m, np.zeros((0, 2)), np.zeros((0, 2))).item() == 0.0
    with pytest.raises(ConfigError):
        correspondence_loss_semisupervised(m, np.zeros((2, 2)), np.zeros((1, 2)))


def test_semisupervised_identity_generators_zero(rng):
    m = small_model(1, 1)
    m.generators = scalar_pair(1.0, 1.0, 1.0)
    pts = np.array([[0.7], [2.0]])
    assert correspondence_loss_semisupervised(m, pts, pts).item() == 0.0


def test_semisupervised_hand_computed():
    m = small_model(1, 1)
    m.generators = scalar_pair(2.0, 0.5, 3.0)  # positive inputs: G(x) = 3x
    x1, x2 = np.array([[1.0]]), np.array([[2.0]])
    # (G12(1) - 2)^2 + (G21(2) - 1)^2 = (3 - 2)^2 + (6 - 1)^2
    assert correspondence_loss_semisupervised(m, x1, x2).item() == pytest.approx(1.0 + 25.0)


# --- generator / discriminator losses -------------------------------------------


def test_generator_loss_is_sum_of_components(rng):
    m = small_model(lambda_r=0.5, lambda_d=2.0, lambda_c=3.0, shared_feature_indices=([0, 1], [2, 3]))
    x1, x2 = rng.normal(size=(10, 3)), rng.normal(size=(10, 4))
    lg1, lg2, parts = generator_loss(m, x1, x2, rng=rng)
    assert lg1.item() == pytest.approx(0.5 * parts["L_r1"] + 2 * parts["L_d1"] + 3 * parts["L_c1"], abs=1e-12)
    assert lg2.item() == pytest.approx(0.5 * parts["L_r2"] + 2 * parts["L_d2"] + 3 * parts["L_c2"], abs=1e-12)


def test_weighted_sum_of_given_components():
    c = TrainConfig()
    assert mm._weighted(c, Tensor(0.2), Tensor(0.7), Tensor(0.1)).item() == pytest.approx(1.0)


def test_ablation_drops_correspondence(rng):
    m = small_model(correspondence_mode="off", lambda_c=0.0)
    x1, x2 = rng.normal(size=(10, 3)), rng.normal(size=(10, 4))
    lg1, lg2, parts = generator_loss(m, x1, x2, rng=rng)
    assert parts["L_c1"] == parts["L_c2"] == 0.0
    assert lg1.item() == parts["L_r1"] + parts["L_d1"]
    assert lg2.item() == parts["L_r2"] + parts["L_d2"]


def test_lambda_c_zero_ignores_shared_columns(rng):
    m = small_model(lambda_c=0.0, shared_feature_indices=([0], [0]))
    x1, x2 = rng.normal(size=(10, 3)), rng.normal(size=(10, 4))
    lg1, _, parts = generator_loss(m, x1, x2, training=False)
    assert parts["L_c1"] > 0
    assert lg1.item() == parts["L_r1"] + parts["L_d1"]


def _half_disc(dim):
    rng = np.random.default_rng(0)
    d = Discriminator.create(dim, 4, rng, minibatch_features=2)
    d.trunk[-1].weights.data[:] = 0.0
    d.trunk[-1].bias.data[:] = 0.0
    return d


def test_discriminator_at_one_half(rng):
    m = small_model()
    m.d1, m.d2 = _half_disc(3), _half_disc(4)
    l1, l2 = discriminator_loss(m, rng.normal(size=(6, 3)), rng.normal(size=(6, 4)))
    assert l1.item() == pytest.approx(3 * math.log(2), abs=1e-12)
    assert l2.item() == pytest.approx(3 * math.log(2), abs=1e-12)


def _sign_disc(sign):
    """1-D discriminator scoring ~1 for inputs of the given sign, ~0 otherwise."""
    trunk = [lin([[1.0]], act="leaky_relu") for _ in range(3)]
    trunk.append(lin([[1.0], [0.0]], act="leaky_relu"))
    trunk.append(lin([[sign * 1e12]], act="sigmoid"))
    return Discriminator(trunk=trunk, minibatch=lin([[0.0], [0.0]], act="leaky_relu"))


def test_perfect_discriminator_loss_near_zero():
    m = small_model(1, 1)
    m.generators = scalar_pair(1.0, 1.0, 1.0)
    m.d1, m.d2 = _sign_disc(+1), _sign_disc(-1)
    x1 = np.array([[1.0], [2.0], [0.5]])  # real domain 1 is positive
    x2 = -x1  # real domain 2 is negative
    l1, l2 = discriminator_loss(m, x1, x2)
    assert l1.item() < 1e-5 and l2.item() < 1e-5


def test_discriminator_loss_term_by_term(rng):
    m = small_model()
    x1, x2 = rng.normal(size=(7, 3)), rng.normal(size=(7, 4))
    l1, l2 = discriminator_loss(m, x1, x2)
    g = m.generators
    x12, x21 = g(x1, "12").data, g(x2, "21").data
    x121, x212 = g(x12, "21").data, g(x21, "12").data

    def d(net, x):
        return discriminator_forward(net, Tensor(x)).data.ravel()

    def nll(p):
        return -np.mean(np.log(np.clip(p, 1e-7, 1 - 1e-7)))

    e1 = nll(d(m.d1, x1)) + nll(d(m.d1, x121)) + nll(1 - d(m.d1, x21))
    e2 = nll(d(m.d2, x2)) + nll(d(m.d2, x212)) + nll(1 - d(m.d2, x12))
    assert l1.item() == pytest.approx(e1, rel=1e-12)
    assert l2.item() == pytest.approx(e2, rel=1e-12)


def test_reconstructions_are_shown_as_real(rng):
    m = small_model()
    x1, x2 = rng.normal(size=(7, 3)), rng.normal(size=(7, 4))
    with_aug = discriminator_loss(m, x1, x2)[0].item()
    without = discriminator_loss(m, x1, x2, reconstructions_as_real=False)[0].item()
    g = m.generators
    x121 = g(g(x1, "12").data, "21").data
    s = discriminator_forward(m.d1, Tensor(x121)).data
    assert with_aug - without == pytest.approx(-np.mean(np.log(s)), rel=1e-10)


def test_config_switch_drops_reconstruction_term(rng):
    m = small_model(reconstructions_as_real=False)
    x1, x2 = rng.normal(size=(7, 3)), rng.normal(size=(7, 4))
    assert discriminator_loss(m, x1, x2)[0].item() == discriminator_loss(
        m, x1, x2, reconstructions_as_real=False
    )[0].item()


def test_discriminator_loss_gives_generators_no_gradient(rng):
    m = small_model()
    l1, l2 = discriminator_loss(m, rng.normal(size=(5, 3)), rng.normal(size=(5, 4)))
    ad.backward(l1 + l2)
    assert all(p.grad is None for p in m.generators.parameters())
    assert any(p.grad is not None for p in m.d1.parameters())


# --- train_step -----------------------------------------------------------------


def _params(m):
    return [p.data.copy() for p in m.generators.parameters() + m.discriminator_parameters()]


def test_zero_learning_rate_changes_nothing(rng):
    m = small_model(learning_rate=0.0)
    before = _params(m)
    rec = train_step(m, rng.normal(size=(8, 3)), rng.normal(size=(8, 4)), rng=rng)
    for a, b in zip(before, _params(m)):
        assert a.tobytes() == b.tobytes()
    assert all(math.isfinite(v) for v in rec.as_dict().values())


def test_train_step_is_deterministic():
    recs = []
    for _ in range(2):
        m = small_model(seed=4)
        rng = np.random.default_rng(9)
        data = np.random.default_rng(1)
        recs.append(train_step(m, data.normal(size=(8, 3)), data.normal(size=(8, 4)), rng=rng))
    assert recs[0] == recs[1]


def test_update_isolation(monkeypatch):
    """The D update leaves G bitwise unchanged, and the G update leaves D alone."""
    m = small_model()
    gens = m.generators.parameters()
    discs = m.discriminator_parameters()
    real_step = ad.adam_step
    seen = []

    def spy(params, grads, state, lr):
        group = "G" if params[0] is gens[0] else "D"
        other = discs if group == "G" else gens
        snapshot = [p.data.copy() for p in other]
        out = real_step(params, grads, state, lr)
        seen.append((group, all(a.tobytes() == p.data.tobytes() for a, p in zip(snapshot, other))))
        if group == "D":
            assert all(p.grad is None for p in gens)
        return out

    monkeypatch.setattr(mm.ad, "adam_step", spy)
    rng = np.random.default_rng(0)
    train_step(m, rng.normal(size=(8, 3)), rng.normal(size=(8, 4)), rng=rng)
    assert [g for g, _ in seen] == ["D", "D", "G"]
    assert all(ok for _, ok in seen)


def test_non_finite_loss_names_component(rng):
    m = small_model()
    bad = rng.normal(size=(8, 3))
    bad[0, 0] = np.nan
    with pytest.raises(TrainingDivergence) as info:
        train_step(m, bad, rng.normal(size=(8, 4)), rng=rng, iteration=17)
    assert info.value.iteration == 17
    assert info.value.component.startswith("L_")


def test_reconstruction_improves_on_toy():
    d1, d2 = toy(100)
    cfg = TrainConfig(iterations=500, seed=2, log_every=0, **SMALL)
    _, hist = train(d1, d2, cfg)
    first = np.mean([h.L_r1 + h.L_r2 for h in hist[:20]])
    last = np.mean([h.L_r1 + h.L_r2 for h in hist[-20:]])
    assert last < first


# --- train ----------------------------------------------------------------------


def test_zero_iterations_returns_initial_model():
    d1, d2 = toy()
    cfg = TrainConfig(iterations=0, seed=5, **SMALL)
    m, hist = train(d1, d2, cfg)
    m2, _ = train(d1, d2, cfg)
    assert hist == []
    assert m.gen_opt.step == 0
    assert _serialize(m) == _serialize(m2)


def test_training_is_bitwise_reproducible():
    d1, d2 = toy()
    cfg = TrainConfig(iterations=40, seed=11, log_every=0, **SMALL)
    (m1, h1), (m2, h2) = train(d1, d2, cfg), train(d1, d2, cfg)
    assert h1 == h2
    assert _serialize(m1) == _serialize(m2)


def test_different_seeds_differ():
    d1, d2 = toy()
    a = train(d1, d2, TrainConfig(iterations=5, seed=1, **SMALL))[1]
    b = train(d1, d2, TrainConfig(iterations=5, seed=2, **SMALL))[1]
    assert a != b


def test_tied_core_stays_identical_during_training():
    d1, d2 = toy()
    cfg = TrainConfig(iterations=30, log_every=1, **SMALL)
    checks = []
    holder = {}

    def progress(rec):
        g = holder["model"].generators if "model" in holder else None
        checks.append(g)

    m, _ = train(d1, d2, cfg, progress=progress)
    core12, core21 = m.generators.path("12")[1], m.generators.path("21")[1]
    assert core12 is core21
    assert core12.weights.data.tobytes() == core21.weights.data.tobytes()
    assert len(checks) == 30


@pytest.mark.parametrize(
    "over, match",
    [
        ({"correspondence_mode": "semisupervised"}, "labeled pair"),
        ({"correspondence_mode": "semisupervised", "labeled_pairs": [(0, 10**6)]}, "out of range"),
        ({"shared_feature_indices": ([0], [9])}, "out of range"),
    ],
)
def test_config_errors_before_training(over, match):
    d1, d2 = toy()
    with pytest.raises(ConfigError, match=match):
        train(d1, d2, TrainConfig(iterations=5, **{**SMALL, **over}))


def test_unsupervised_needs_shared_names():
    a = DomainDataset(np.zeros((4, 2)), ["a", "b"])
    b = DomainDataset(np.zeros((4, 2)), ["c", "d"])
    with pytest.raises(ConfigError, match="no feature names in common"):
        train(a, b, TrainConfig(iterations=1, **SMALL))


def test_shared_indices_derived_from_names():
    a = DomainDataset(np.zeros((4, 3)), ["p", "q", "r"])
    b = DomainDataset(np.zeros((4, 2)), ["r", "p"])
    cfg = mm.resolve_config(a, b, TrainConfig())
    assert cfg.shared_feature_indices == ([0, 2], [1, 0])


def test_labeled_pairs_join_every_batch(monkeypatch):
    d1, d2 = toy()
    sizes = []
    real = mm.train_step

    def spy(model, b1, b2, config, rng, iteration, n_labeled):
        sizes.append((len(b1), len(b2), n_labeled))
        np.testing.assert_array_equal(b1[-1], d1.matrix[3])
        np.testing.assert_array_equal(b2[-1], d2.matrix[7])
        return real(model, b1, b2, config, rng, iteration, n_labeled)

    monkeypatch.setattr(mm, "train_step", spy)
    cfg = TrainConfig(
        iterations=3, correspondence_mode="semisupervised", labeled_pairs=[(3, 7)], **SMALL
    )
    train(d1, d2, cfg)
    assert sizes == [(33, 33, 1)] * 3


@given(st.integers(1, 30), st.integers(1, 12), st.integers(0, 1000))
@settings(max_examples=30, deadline=None)
def test_batch_cycler_covers_each_epoch(n, size, seed):
    c = mm._BatchCycler(n, np.random.default_rng(seed))
    drawn = np.concatenate([c.next(size) for _ in range(n)])  # n*size draws = size epochs
    counts = np.bincount(drawn, minlength=n)
    assert np.all(counts == size)


# --- map_forward ----------------------------------------------------------------


def test_map_forward_shape_and_rows(rng):
    m = small_model()
    X = rng.normal(size=(9, 3))
    out = map_forward(m, X, "12")
    assert out.shape == (9, 4)
    rows = np.vstack([map_forward(m, X[i : i + 1], "12") for i in range(9)])
    np.testing.assert_allclose(out, rows, rtol=1e-13, atol=1e-15)
    assert map_forward(m, X, "12").tobytes() == out.tobytes()


def test_map_forward_dimension_error(rng):
    m = small_model()
    with pytest.raises(DimensionError, match="expects 4 input columns"):
        map_forward(m, rng.normal(size=(2, 3)), "21")


# --- history --------------------------------------------------------------------


def test_history_csv_round_trip(tmp_path):
    d1, d2 = toy()
    _, hist = train(d1, d2, TrainConfig(iterations=4, **SMALL))
    write_history_csv(hist, tmp_path / "h.csv")
    assert read_history_csv(tmp_path / "h.csv") == hist
    header = (tmp_path / "h.csv").read_text().splitlines()[0].split(",")
    assert header == HISTORY_COLUMNS == [
        "iteration", "L_G1", "L_G2", "L_D1", "L_D2", "L_r1", "L_d1", "L_c1", "L_r2", "L_d2", "L_c2",
    ]
