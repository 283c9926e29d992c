import numpy as np
import pytest

from densal.bench import training_set
from densal.model import (
    LabelledPatch,
    ModelError,
    ModelSpec,
    TrainConfig,
    TrainedModel,
    TrainingError,
    embed,
    embed_pixels,
    ensemble_stats,
    forward,
    init_params,
    load_model,
    loss_and_grads,
    loss_terms,
    pixel_features,
    predict,
    predict_uncertainty,
    save_model,
    train,
    train_ensemble,
)


def random_draw(spec, seed):
    """All parameters (biases and heads included) drawn at random."""
    rng = np.random.default_rng(seed)
    params = {k: rng.normal(0, 0.7, v.shape) for k, v in init_params(spec, rng).items()}
    X = rng.normal(size=(25, spec.n_inputs))
    t = np.abs(rng.normal(size=25)) * (rng.random(25) < 0.6)
    return params, X, t


def max_fd_error(spec, seed, h=1e-5):
    params, X, t = random_draw(spec, seed)
    _, grads = loss_and_grads(params, spec, X, t)
    worst = 0.0
    for k, p in params.items():
        for i in np.ndindex(p.shape):
            saved = p[i]
            p[i] = saved + h
            up = sum(loss_terms(*forward(params, spec, X)[:2], t))
            p[i] = saved - h
            down = sum(loss_terms(*forward(params, spec, X)[:2], t))
            p[i] = saved
            num = (up - down) / (2 * h)
            ana = grads[k][i]
            scale = max(abs(num), abs(ana), 1e-6)
            worst = max(worst, abs(num - ana) / scale)
    return worst


SMALL = ModelSpec(n_bands=2, hidden=(6, 5), context=1, dropout_rate=0.0)


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_against_central_differences(self, seed):
        assert max_fd_error(SMALL, seed) < 1e-4

    def test_with_dropout_masks(self):
        spec = ModelSpec(n_bands=1, hidden=(4, 3), context=3, dropout_rate=0.3)
        params, X, t = random_draw(spec, 99)
        rng = np.random.default_rng(0)
        masks = [(rng.random((len(X), w)) >= 0.3) / 0.7 for w in spec.hidden]
        _, g = loss_and_grads(params, spec, X, t, masks)
        h = 1e-5
        params["W0"][2, 1] += h
        up = sum(loss_terms(*forward(params, spec, X, masks)[:2], t))
        params["W0"][2, 1] -= 2 * h
        down = sum(loss_terms(*forward(params, spec, X, masks)[:2], t))
        assert g["W0"][2, 1] == pytest.approx((up - down) / (2 * h), rel=1e-5, abs=1e-9)


class TestSpecAndConfig:
    def test_reference_defaults_accepted(self):
        cfg = TrainConfig()
        assert cfg.learning_rate == 1e-4 and cfg.batch_size == 128

    @pytest.mark.parametrize("kw", [dict(hidden=(8,)), dict(dropout_rate=1.0), dict(hidden=(8, 1)), dict(context=2)])
    def test_invalid_spec(self, kw):
        with pytest.raises(ModelError):
            ModelSpec(**kw)

    @pytest.mark.parametrize("kw", [dict(learning_rate=0), dict(batch_size=0)])
    def test_invalid_train_config(self, kw):
        with pytest.raises(ModelError):
            TrainConfig(**kw)


def test_pixel_features_layout():
    vals = np.arange(2 * 3 * 4, dtype=float).reshape(2, 3, 4)
    f = pixel_features(vals, 3)
    assert f.shape == (12, 18)
    # centre of the window is index 4 within each band's 9 neighbours
    np.testing.assert_array_equal(f[:, 4], vals[0].ravel())
    np.testing.assert_array_equal(f[:, 9 + 4], vals[1].ravel())
    # north-west neighbour of pixel (1, 1) is pixel (0, 0)
    assert f[5, 0] == vals[0, 0, 0]


def untrained(spec):
    p = init_params(spec, np.random.default_rng(0))
    return TrainedModel(spec, p, np.zeros(spec.n_inputs), np.ones(spec.n_inputs))


class TestPredict:
    def test_zero_head_gives_zero_density(self):
        m = untrained(ModelSpec())
        dens, prob = predict(m, np.zeros((4, 8, 8)))
        assert np.all(dens == 0)
        assert np.all(prob == 0.5)

    def test_deterministic_in_eval_mode(self, small_model, small_corpus):
        img = small_corpus[10].scene.image
        a = predict(small_model, img)
        b = predict(small_model, img)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
        assert np.all(np.isfinite(a[0]))
        assert a[1].min() >= 0 and a[1].max() <= 1

    def test_band_mismatch_rejected(self, small_model):
        with pytest.raises(ModelError):
            predict(small_model, np.zeros((3, 8, 8)))
        with pytest.raises(ModelError):
            embed(small_model, np.zeros((5, 8, 8)))

    def test_plantation_above_bare(self, small_model, small_corpus):
        planted, bare = [], []
        for b in small_corpus[8:]:
            dens, _ = predict(small_model, b.scene.image)
            truth = b.scene.density.values[0]
            planted.append(dens[truth > 0.5])
            bare.append(dens[truth == 0])
        assert np.concatenate(planted).mean() > np.concatenate(bare).mean() + 0.3


class TestTrain:
    def test_all_zero_labels(self, small_corpus):
        data = [LabelledPatch(p.image, np.zeros_like(p.density)) for p in training_set(small_corpus[:3], 16)]
        m = train(data, ModelSpec(hidden=(8, 8)), TrainConfig(learning_rate=3e-3, batch_size=8, epochs=5))
        held_out = small_corpus[12].scene.image
        assert predict(m, held_out)[0].mean() <= 0.05

    def test_deterministic(self, small_corpus):
        data = training_set(small_corpus[:2], 16)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=8, epochs=2, seed=5)
        a, b = train(data, SMALL_SPEC, cfg), train(data, SMALL_SPEC, cfg)
        assert a.losses == b.losses
        assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ModelError):
            train([], ModelSpec(), TrainConfig())

    def test_negative_labels_rejected(self):
        with pytest.raises(ModelError):
            train([LabelledPatch(np.zeros((4, 4, 4)), -np.ones((4, 4)))], ModelSpec(), TrainConfig())

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_loss_aborts(self, small_corpus):
        data = training_set(small_corpus[:1], 16)
        data[0].image[0, 0, 0] = np.inf
        with pytest.raises(TrainingError, match="non-finite loss"):
            train(data, SMALL_SPEC, TrainConfig(epochs=1))

    def test_loss_non_increasing_in_most_runs(self, small_corpus):
        data = training_set(small_corpus[:4], 16)
        monotone = []
        for seed in range(10):
            m = train(data, SMALL_SPEC, TrainConfig(learning_rate=1e-3, batch_size=16, epochs=8, seed=seed))
            monotone.append(bool(np.all(np.diff(m.losses) <= 0)))
        assert np.mean(monotone) >= 0.9


SMALL_SPEC = ModelSpec(hidden=(12, 12), dropout_rate=0.1)


class TestEmbed:
    def test_identical_patches(self, small_model, small_corpus):
        img = small_corpus[9].scene.image
        a, b = embed(small_model, img), embed(small_model, img.values.copy())
        assert np.sum((a - b) ** 2) == 0.0

    def test_width(self):
        m = untrained(ModelSpec(hidden=(32, 64)))
        assert embed(m, np.zeros((4, 6, 6))).shape == (64,)
        assert embed_pixels(m, np.zeros((4, 6, 5))).shape == (6, 5, 64)

    def test_classes_separate(self, small_model, small_corpus):
        """Planted vs bare 4x4 patches: inter-class distance beats intra-class."""
        rng = np.random.default_rng(0)
        planted, bare = [], []
        for b in small_corpus:
            d = b.scene.density.values[0]
            img = b.scene.image.values
            for r in range(0, 64, 4):
                for c in range(0, 64, 4):
                    win = d[r:r + 4, c:c + 4]
                    if win.min() > 0.8:
                        planted.append(img[:, r:r + 4, c:c + 4])
                    elif win.max() == 0:
                        bare.append(img[:, r:r + 4, c:c + 4])
        inter, intra = [], []
        for _ in range(100):
            p1, p2 = (planted[i] for i in rng.choice(len(planted), 2, replace=False))
            q = bare[rng.integers(len(bare))]
            e1, e2, eq = (embed(small_model, x) for x in (p1, p2, q))
            inter.append(np.sum((e1 - eq) ** 2))
            intra.append(np.sum((e1 - e2) ** 2))
        assert np.mean(inter) > np.mean(intra)


class TestEnsemble:
    def test_population_variance_arithmetic(self):
        ens = ensemble_stats(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1))
        assert ens.mean[0, 0] == 2.0
        assert ens.variance[0, 0] == pytest.approx(2 / 3, rel=1e-15)

    def test_variance_matches_brute_force(self, rng):
        members = rng.normal(size=(5, 7, 7))
        ens = ensemble_stats(members)
        for i in range(7):
            for j in range(7):
                vals = members[:, i, j]
                mu = sum(vals) / 5
                var = sum((v - mu) ** 2 for v in vals) / 5
                assert ens.variance[i, j] == pytest.approx(var, rel=1e-12)
                assert ens.mean[i, j] == pytest.approx(mu, rel=1e-12)

    def test_five_members_by_default(self, small_corpus):
        data = training_set(small_corpus[:2], 16)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=16, epochs=1)
        models = train_ensemble(data, SMALL_SPEC, cfg)
        assert len(models) == 5
        assert len({m.seed for m in models}) == 5
        ens = predict_uncertainty(models, small_corpus[5].scene.image)
        assert ens.T == 5 and np.all(ens.variance >= 0) and ens.variance.max() > 0

    def test_single_member_zero_variance(self, small_model, small_corpus):
        ens = predict_uncertainty([small_model], small_corpus[4].scene.image, T=1)
        assert np.all(ens.variance == 0)

    def test_same_seed_members_zero_variance(self, small_corpus):
        data = training_set(small_corpus[:2], 16)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=16, epochs=1, seed=4)
        models = train_ensemble(data, SMALL_SPEC, cfg, T=3, seeds=[4, 4, 4])
        assert np.all(predict_uncertainty(models, small_corpus[3].scene.image).variance == 0)

    def test_threads_do_not_change_members(self, small_corpus):
        data = training_set(small_corpus[:2], 16)
        cfg = TrainConfig(learning_rate=3e-3, batch_size=16, epochs=1)
        a = train_ensemble(data, SMALL_SPEC, cfg, T=2)
        b = train_ensemble(data, SMALL_SPEC, cfg, T=2, threads=2)
        for x, y in zip(a, b):
            assert all(np.array_equal(x.params[k], y.params[k]) for k in x.params)

    def test_mc_dropout(self, small_model, small_corpus):
        img = small_corpus[2].scene.image
        a = predict_uncertainty([small_model], img, mode="mc_dropout", T=5, seed=3)
        b = predict_uncertainty([small_model], img, mode="mc_dropout", T=5, seed=3)
        assert a.T == 5 and a.variance.max() > 0
        assert np.array_equal(a.members, b.members)

    def test_mc_dropout_needs_dropout(self, small_corpus):
        m = untrained(ModelSpec(dropout_rate=0.0))
        with pytest.raises(ModelError, match="dropout_rate"):
            predict_uncertainty([m], np.zeros((4, 4, 4)), mode="mc_dropout", T=5)

    def test_ensemble_size_must_match(self, small_model):
        with pytest.raises(ModelError):
            predict_uncertainty([small_model, small_model], np.zeros((4, 4, 4)), T=3)


class TestCheckpoint:
    def test_roundtrip(self, small_model, small_corpus, tmp_path):
        path = tmp_path / "m.pmdl"
        save_model(small_model, path)
        assert path.read_bytes()[:4] == b"PMDL"
        loaded = load_model(path)
        assert loaded.spec == small_model.spec
        img = small_corpus[1].scene.image
        np.testing.assert_allclose(predict(loaded, img)[0], predict(small_model, img)[0], atol=1e-4)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.pmdl"
        path.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(ModelError):
            load_model(path)

    def test_truncated(self, small_model, tmp_path):
        path = tmp_path / "m.pmdl"
        save_model(small_model, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(ModelError):
            load_model(path)
