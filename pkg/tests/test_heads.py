import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from caselab import tensor as T
from caselab.backbone import Backbone
from caselab.episodes import Task
from caselab.heads import EmbeddingBuffer, LinearHead, MahalanobisHead, fit_head, fit_mahalanobis, fit_proto, predict
from caselab.optim import Adam, LinearSchedule
from caselab.tensor import Tensor
from caselab.trainer import context_buffer

from conftest import tiny_spec


def make_buffer(rng, way=3, shot=4, dim=5, spread=2.0):
    centers = rng.normal(0, spread, size=(way, dim))
    y = np.repeat(np.arange(way), shot)
    z = centers[y] + rng.normal(0, 0.5, size=(len(y), dim))
    return EmbeddingBuffer(z.astype(np.float32), y)


def autodiff_fit(buffer, steps, batch_size, schedule, rng, way):
    """Reference fit: build the mini-batch explicitly and differentiate through it."""
    w = Tensor(np.zeros((way, buffer.dim), buffer.z.dtype), requires_grad=True)
    b = Tensor(np.zeros(way, buffer.z.dtype), requires_grad=True)
    opt = Adam([w, b])
    for step in range(steps):
        idx = rng.integers(0, len(buffer), size=batch_size)
        loss = T.cross_entropy(T.linear(Tensor(buffer.z[idx]), w, b), buffer.y[idx])
        loss.backward()
        opt.step(schedule(step))
    return w.data, b.data


class TestEmbeddingBuffer:
    def test_read_only_copy(self, rng):
        z = rng.normal(size=(4, 3))
        buf = EmbeddingBuffer(z, [0, 1, 0, 1])
        z[0, 0] = 99.0
        assert buf.z[0, 0] != 99.0
        with pytest.raises(ValueError):
            buf.z[0, 0] = 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            EmbeddingBuffer(np.zeros((3, 2)), [0, 1])

    def test_way_and_dim(self, rng):
        buf = make_buffer(rng, way=4, dim=7)
        assert (buf.way, buf.dim, len(buf)) == (4, 7, 16)


class TestFitHead:
    def test_matches_autodiff_reference(self, rng):
        buf = make_buffer(rng)
        sched = LinearSchedule(1e-2, 1e-4, 60)
        head = fit_head(buf, 60, 16, sched, np.random.default_rng(7))
        w_ref, b_ref = autodiff_fit(buf, 60, 16, sched, np.random.default_rng(7), buf.way)
        np.testing.assert_allclose(head.weight, w_ref, rtol=1e-4, atol=1e-6)
        np.testing.assert_allclose(head.bias, b_ref, rtol=1e-4, atol=1e-6)

    def test_zero_steps_gives_zero_head(self, rng):
        head = fit_head(make_buffer(rng), steps=0)
        assert not head.weight.any() and not head.bias.any()

    def test_separable_buffer_is_fitted(self, rng):
        buf = make_buffer(rng, spread=4.0)
        head = fit_head(buf, steps=500, lr_schedule=LinearSchedule(1e-2, 1e-4, 500))
        assert (predict(head, buf.z).argmax(axis=1) == buf.y).mean() == 1.0

    def test_explicit_way_pads_classes(self, rng):
        head = fit_head(make_buffer(rng, way=2), steps=5, way=4)
        assert head.weight.shape[0] == 4

    def test_deterministic_for_rng(self, rng):
        buf = make_buffer(rng)
        a = fit_head(buf, 50, rng=np.random.default_rng(3))
        b = fit_head(buf, 50, rng=np.random.default_rng(3))
        assert np.array_equal(a.weight, b.weight) and np.array_equal(a.bias, b.bias)

    def test_body_is_not_evaluated(self, rng):
        bb = Backbone(tiny_spec(), seed=0)
        bb.freeze()
        task = Task.from_arrays(rng.normal(size=(4, 3, 8, 8)).astype(np.float32), np.array([0, 1, 0, 1]),
                                np.zeros((0, 3, 8, 8), np.float32), np.zeros(0, np.int64))
        buf = context_buffer(bb, task)
        before = bb.forward_count
        fit_head(buf, steps=20)
        assert bb.forward_count == before


class TestProto:
    def test_prototypes_are_class_means(self, rng):
        buf = make_buffer(rng)
        head = fit_proto(buf)
        for k in range(buf.way):
            np.testing.assert_allclose(head.prototypes[k], buf.z[buf.y == k].astype(np.float64).mean(0))

    def test_logits_are_negative_squared_distances(self, rng):
        buf = make_buffer(rng)
        head = fit_proto(buf)
        q = rng.normal(size=(3, buf.dim))
        expected = [[-sum((q[i, j] - head.prototypes[k, j]) ** 2 for j in range(buf.dim))
                     for k in range(buf.way)] for i in range(3)]
        np.testing.assert_allclose(predict(head, q), expected, rtol=1e-10)

    def test_missing_class_raises(self):
        with pytest.raises(ValueError, match="class 1"):
            fit_proto(EmbeddingBuffer(np.zeros((2, 2)), [0, 2]))


class TestMahalanobis:
    def test_distances_match_linear_solve(self, rng):
        buf = make_buffer(rng, way=3, shot=5, dim=4)
        head = fit_mahalanobis(buf, ridge=0.5)
        q = rng.normal(size=(6, 4))
        for k in range(3):
            diff = q - head.means[k]
            ref = np.array([d @ np.linalg.solve(head.covariances[k], d) for d in diff])
            np.testing.assert_allclose(head.squared_distances(q)[:, k], ref, rtol=1e-9)

    def test_covariance_recipe(self, rng):
        buf = make_buffer(rng, way=2, shot=3, dim=3)
        head = fit_mahalanobis(buf, ridge=1.0)
        z = buf.z.astype(np.float64)
        zk = z[buf.y == 0]
        sk = (zk - zk.mean(0)).T @ (zk - zk.mean(0)) / (len(zk) - 1)
        s = (z - z.mean(0)).T @ (z - z.mean(0)) / (len(z) - 1)
        lam = 3 / 4
        np.testing.assert_allclose(head.covariances[0], lam * sk + (1 - lam) * s + np.eye(3), rtol=1e-9)

    def test_single_shot_class(self):
        buf = EmbeddingBuffer(np.array([[0.0, 1.0], [2.0, 0.0], [2.0, 2.0]]), [0, 1, 1])
        head = fit_mahalanobis(buf, ridge=1.0)
        assert head.lambdas[0] == 0.5
        assert np.all(np.isfinite(head.covariances))

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 10_000), ridge=st.floats(0.01, 5.0))
    def test_covariances_spd_above_ridge(self, seed, ridge):
        buf = make_buffer(np.random.default_rng(seed), way=3, shot=2, dim=6)
        head = fit_mahalanobis(buf, ridge=ridge)
        for c in head.covariances:
            np.testing.assert_allclose(c, c.T)
            assert np.linalg.eigvalsh(c).min() >= ridge * (1 - 1e-9)


class TestPredict:
    @pytest.mark.parametrize("fit", [fit_proto, fit_mahalanobis, lambda b: fit_head(b, 3)])
    def test_dimension_mismatch(self, rng, fit):
        head = fit(make_buffer(rng, dim=5))
        with pytest.raises(T.ShapeError):
            predict(head, np.zeros((2, 4)))

    def test_unknown_head(self):
        with pytest.raises(TypeError):
            predict(object(), np.zeros((1, 2)))

    def test_output_shapes(self, rng):
        buf = make_buffer(rng, way=3)
        q = rng.normal(size=(7, buf.dim))
        for head in (fit_proto(buf), fit_mahalanobis(buf), fit_head(buf, 3)):
            assert predict(head, q).shape == (7, 3)

    def test_linear_head_accepts_tensor(self, rng):
        head = LinearHead(rng.normal(size=(2, 3)).astype(np.float32), np.zeros(2, np.float32))
        z = rng.normal(size=(4, 3)).astype(np.float32)
        np.testing.assert_allclose(predict(head, Tensor(z)), z @ head.weight.T, rtol=1e-6)


def smallest_eigenvalue(m, iters=2000):
    """Power iteration on the spectrally shifted matrix ``c*I - m``."""
    c = np.abs(m).sum(axis=1).max()  # Gershgorin bound on the largest eigenvalue
    shifted = c * np.eye(len(m)) - m
    v = np.ones(len(m)) / np.sqrt(len(m))
    for _ in range(iters):
        w = shifted @ v
        v = w / np.linalg.norm(w)
    return c - v @ shifted @ v


class TestWorkedExamples:
    def test_zero_head_loss_is_log_way(self, rng):
        buf = make_buffer(rng, way=4)
        head = fit_head(buf, steps=0)
        logits = predict(head, buf.z)
        assert not logits.any()
        loss = T.cross_entropy(Tensor(logits.astype(np.float64)), buf.y).item()
        assert loss == pytest.approx(np.log(4))

    def test_separable_clusters_match_logistic_reference(self, rng):
        y = np.repeat([0, 1], 20)
        z = np.where(y[:, None] == 0, [-2.0, 1.0], [2.0, -1.0]) + rng.normal(0, 0.4, size=(40, 2))
        buf = EmbeddingBuffer(z.astype(np.float32), y)
        head = fit_head(buf, steps=200)
        # scripted reference: full-batch gradient descent on the binary logistic loss
        w, b = np.zeros(2), 0.0
        for _ in range(500):
            p = 1 / (1 + np.exp(-(z @ w + b)))
            w -= 0.5 * z.T @ (p - y) / len(y)
            b -= 0.5 * np.mean(p - y)
        reference = (z @ w + b > 0).astype(int)
        assert np.array_equal(reference, y)
        assert np.array_equal(predict(head, buf.z).argmax(axis=1), y)

    def test_duplicated_rows_keep_decisions(self, rng):
        buf = make_buffer(rng, way=2, shot=5, dim=2, spread=3.0)
        doubled = EmbeddingBuffer(np.concatenate([buf.z, buf.z]), np.concatenate([buf.y, buf.y]))
        a = fit_head(buf, steps=300, rng=np.random.default_rng(4))
        b = fit_head(doubled, steps=300, rng=np.random.default_rng(4))
        g = np.linspace(-8, 8, 41)
        grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2).astype(np.float32)
        agree = predict(a, grid).argmax(1) == predict(b, grid).argmax(1)
        assert np.array_equal(predict(a, buf.z).argmax(1), predict(b, buf.z).argmax(1))
        assert agree.mean() >= 0.97

    def test_closed_form_heads_permutation_invariant(self, rng):
        buf = make_buffer(rng, way=3, shot=4, dim=4)
        perm = rng.permutation(len(buf))
        shuffled = EmbeddingBuffer(buf.z[perm], buf.y[perm])
        q = rng.normal(size=(10, 4))
        np.testing.assert_array_equal(fit_proto(buf).prototypes.round(12), fit_proto(shuffled).prototypes.round(12))
        np.testing.assert_allclose(predict(fit_mahalanobis(buf), q), predict(fit_mahalanobis(shuffled), q),
                                   rtol=1e-12)

    def test_mahalanobis_min_eigenvalue_power_iteration(self, rng):
        buf = make_buffer(rng, way=3, shot=3, dim=5)
        for cov in fit_mahalanobis(buf, ridge=1.0).covariances:
            assert smallest_eigenvalue(cov) >= 1 - 1e-4

    def test_identity_covariance_reduces_to_proto(self, rng):
        buf = make_buffer(rng, way=4, shot=3, dim=6)
        maha = fit_mahalanobis(buf)
        eye = MahalanobisHead(maha.means, np.stack([np.eye(6)] * 4), maha.task_covariance, maha.lambdas)
        q = rng.normal(0, 3, size=(1000, 6))
        assert np.array_equal(predict(eye, q).argmax(1), predict(fit_proto(buf), q).argmax(1))

    def test_mahalanobis_one_shot_nearer_mean(self):
        buf = EmbeddingBuffer(np.array([[0.0, 0.0], [4.0, 0.0]]), [0, 1])
        head = fit_mahalanobis(buf)
        assert np.array_equal(head.lambdas, [0.5, 0.5])
        assert predict(head, np.array([[1.0, 0.5], [3.0, -0.5]])).argmax(1).tolist() == [0, 1]

    def test_proto_examples(self, rng):
        single = fit_proto(EmbeddingBuffer(rng.normal(size=(3, 2)), [0, 0, 0]))
        assert np.all(predict(single, rng.normal(size=(5, 2))).argmax(1) == 0)
        two = fit_proto(EmbeddingBuffer(np.array([[0.0, 0.0], [2.0, 0.0]]), [0, 1]))
        assert predict(two, np.array([[0.9, 0.0]])).argmax(1).tolist() == [0]
        assert predict(two, two.prototypes).argmax(1).tolist() == [0, 1]
