import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from specrec.data import InteractionMatrix, synth_powerlaw
from specrec.exceptions import ConfigError, NonFiniteGradientError, TrainingDivergedError
from specrec.model import (
    AdamState,
    Batch,
    EmbeddingPair,
    LightGCNPropagator,
    TrainConfig,
    adam_step,
    init_embeddings,
    iter_batches,
    lightgcn_propagate,
    load_checkpoint,
    loss_and_grad,
    predict_scores,
    sample_negatives,
    save_checkpoint,
    train,
)
from specrec.random import rng_for


def fd_check(fn, E, h=1e-5):
    grads = []
    for X in (E.U, E.V):
        G = np.zeros_like(X)
        for idx in np.ndindex(X.shape):
            old = X[idx]
            X[idx] = old + h
            hi = fn(E)
            X[idx] = old - h
            lo = fn(E)
            X[idx] = old
            G[idx] = (hi - lo) / (2 * h)
        grads.append(G)
    return grads


class TestInit:
    def test_bound_d1(self):
        E = init_embeddings(50, 40, 1, 0)
        assert np.abs(E.U).max() <= math.sqrt(3) and np.abs(E.V).max() <= math.sqrt(3)

    def test_mean(self):
        E = init_embeddings(1000, 1000, 500, 3)
        assert abs(np.concatenate([E.U.ravel(), E.V.ravel()]).mean()) <= 0.01

    def test_deterministic(self):
        a, b = init_embeddings(5, 6, 3, 9), init_embeddings(5, 6, 3, 9)
        assert a.U.tobytes() == b.U.tobytes() and a.V.tobytes() == b.V.tobytes()

    def test_bound_and_scale(self):
        E = init_embeddings(200, 200, 8, 1, scale=0.5)
        bound = 0.5 * math.sqrt(6 / 16)
        assert np.abs(E.U).max() <= bound
        assert np.abs(E.U).max() > 0.9 * bound

    def test_rejects_zero(self):
        with pytest.raises(ConfigError):
            init_embeddings(0, 3, 2, 0)


class TestPredict:
    E = EmbeddingPair([[1.0, 2.0]], [[3.0, 4.0]])

    def test_identity(self):
        assert predict_scores(self.E, [(0, 0)]).tolist() == [11.0]

    def test_sigmoid(self):
        assert predict_scores(self.E, [(0, 0)], "sigmoid")[0] == pytest.approx(1 / (1 + math.exp(-11)))

    def test_zero_sigmoid(self):
        E = EmbeddingPair(np.zeros((2, 3)), np.zeros((2, 3)))
        assert predict_scores(E, [(1, 1)], "sigmoid").tolist() == [0.5]

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            predict_scores(self.E, [(0, 1)])


class TestLoss:
    def test_mse_single_positive(self):
        E = EmbeddingPair([[0.0]], [[1.0]])
        value, g = loss_and_grad(E, Batch(np.array([0]), np.array([0]), labels=np.array([1.0])), "mse")
        assert value == 1.0
        # dL/dU = dL/ds * v = -2 * 1
        assert g.dU.tolist() == [[-2.0]]

    def test_bpr_tie_is_ln2(self):
        E = EmbeddingPair([[1.0, 1.0]], [[0.5, 0.5], [1.0, 0.0]])
        value, _ = loss_and_grad(E, Batch(np.array([0]), np.array([0]), negatives=np.array([1])), "bpr")
        assert value == pytest.approx(math.log(2))

    def test_bce_finite_at_extreme_scores(self):
        E = EmbeddingPair([[100.0]], [[100.0]])
        value, g = loss_and_grad(E, Batch(np.array([0]), np.array([0]), labels=np.array([0.0])), "bce")
        assert value == pytest.approx(1e4)
        assert np.isfinite(g.dU).all()

    @pytest.mark.parametrize("loss", ["mse", "bce", "bpr"])
    def test_finite_differences(self, loss):
        rng = np.random.default_rng(4)
        E = EmbeddingPair(rng.normal(size=(4, 3)), rng.normal(size=(5, 3)))
        users = np.array([0, 1, 1, 2, 3, 3])
        items = np.array([0, 4, 2, 2, 1, 3])
        if loss == "bpr":
            batch = Batch(users, items, negatives=np.array([1, 0, 3, 4, 0, 2]))
        else:
            batch = Batch(users, items, labels=np.array([1.0, 0, 1, 0, 1, 0]))
        _, g = loss_and_grad(E, batch, loss)
        gU, gV = g.dense(4, 5)
        nU, nV = fd_check(lambda e: loss_and_grad(e, batch, loss)[0], E)
        scale = max(np.abs(nU).max(), np.abs(nV).max())
        assert max(np.abs(gU - nU).max(), np.abs(gV - nV).max()) / scale < 1e-4

    @settings(max_examples=40, deadline=None)
    @given(
        arrays(np.float64, (3, 2), elements=st.floats(-3, 3)),
        arrays(np.float64, (4, 2), elements=st.floats(-3, 3)),
        arrays(np.float64, (2,), elements=st.floats(-5, 5)),
    )
    def test_bpr_shift_invariance(self, U, V, c):
        batch = Batch(np.array([0, 1, 2, 2]), np.array([0, 1, 2, 3]), negatives=np.array([3, 2, 1, 0]))
        a, _ = loss_and_grad(EmbeddingPair(U, V), batch, "bpr")
        b, _ = loss_and_grad(EmbeddingPair(U, V + c), batch, "bpr")
        assert abs(a - b) < 1e-9 * max(1.0, abs(a))

    def test_empty_batch(self):
        E = EmbeddingPair([[1.0]], [[1.0]])
        with pytest.raises(ValueError):
            loss_and_grad(E, Batch(np.array([], int), np.array([], int), labels=np.array([])), "mse")


class TestAdam:
    def _pair(self):
        return EmbeddingPair(np.ones((2, 2)), np.ones((3, 2)))

    def test_first_step_magnitude_is_lr(self):
        E = self._pair()
        st_ = AdamState.zeros_like(E)
        gU = np.array([[0.3, -2.0], [5.0, -1e-3]])
        adam_step(st_, E, gU, np.full((3, 2), 7.0), 0.01)
        assert np.allclose(E.U, 1.0 - 0.01 * np.sign(gU), atol=1e-6)

    def test_zero_gradient_unchanged(self):
        E = self._pair()
        adam_step(AdamState.zeros_like(E), E, np.zeros((2, 2)), np.zeros((3, 2)), 0.1)
        assert np.all(E.U == 1.0) and np.all(E.V == 1.0)

    def test_decoupled_decay(self):
        E = self._pair()
        adam_step(AdamState.zeros_like(E), E, np.zeros((2, 2)), np.zeros((3, 2)), 0.01, 0.1)
        assert np.allclose(E.U, 0.999)

    def test_nonfinite_gradient(self):
        E = self._pair()
        g = np.zeros((2, 2))
        g[0, 1] = np.nan
        g[1, 0] = -4.0
        with pytest.raises(NonFiniteGradientError) as info:
            adam_step(AdamState.zeros_like(E), E, g, np.zeros((3, 2)), 0.1, where=(3, 7))
        assert (info.value.epoch, info.value.batch, info.value.max_abs_grad) == (3, 7, 4.0)

    def test_shape_mismatch(self):
        E = self._pair()
        with pytest.raises(ValueError):
            adam_step(AdamState.zeros_like(EmbeddingPair(np.ones((1, 2)), np.ones((3, 2)))), E, np.zeros((2, 2)), np.zeros((3, 2)), 0.1)


class TestLightGCN:
    def test_zero_layers_identity(self):
        Y = synth_powerlaw(20, 15, 1.0, 3, 0)
        E = init_embeddings(20, 15, 4, 0)
        P = lightgcn_propagate(Y, E, 0)
        assert np.array_equal(P.U, E.U) and np.array_equal(P.V, E.V)

    def test_single_edge_swaps(self):
        Y = InteractionMatrix.from_pairs([(0, 0)])
        E = EmbeddingPair([[1.0, 2.0]], [[3.0, -1.0]])
        P = lightgcn_propagate(Y, E, 1)
        assert np.allclose(P.U, (E.U + E.V) / 2) and np.allclose(P.V, (E.V + E.U) / 2)

    def test_linear(self):
        Y = synth_powerlaw(30, 20, 1.0, 4, 1)
        a, b = init_embeddings(30, 20, 3, 1), init_embeddings(30, 20, 3, 2)
        combo = EmbeddingPair(2 * a.U - 3 * b.U, 2 * a.V - 3 * b.V)
        lhs = lightgcn_propagate(Y, combo, 3)
        pa, pb = lightgcn_propagate(Y, a, 3), lightgcn_propagate(Y, b, 3)
        assert np.allclose(lhs.U, 2 * pa.U - 3 * pb.U) and np.allclose(lhs.V, 2 * pa.V - 3 * pb.V)

    def test_self_adjoint(self):
        Y = synth_powerlaw(30, 20, 1.0, 4, 1)
        prop = LightGCNPropagator(Y, 2)
        rng = np.random.default_rng(0)
        x = (rng.normal(size=(30, 3)), rng.normal(size=(20, 3)))
        y = (rng.normal(size=(30, 3)), rng.normal(size=(20, 3)))
        Ax, Ay = prop.apply(*x), prop.apply(*y)
        lhs = np.sum(Ax[0] * y[0]) + np.sum(Ax[1] * y[1])
        rhs = np.sum(x[0] * Ay[0]) + np.sum(x[1] * Ay[1])
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_chain_rule_through_propagation(self):
        Y = synth_powerlaw(6, 5, 0.5, 2, 0)
        prop = LightGCNPropagator(Y, 2)
        E = init_embeddings(6, 5, 2, 0)
        batch = Batch(Y.rows, Y.cols, labels=np.ones(Y.nnz))

        def f(e):
            return loss_and_grad(EmbeddingPair(*prop.apply(e.U, e.V)), batch, "mse")[0]

        _, g = loss_and_grad(EmbeddingPair(*prop.apply(E.U, E.V)), batch, "mse")
        gU, gV = prop.apply(*g.dense(6, 5))
        nU, nV = fd_check(f, E)
        assert np.allclose(gU, nU, atol=1e-7) and np.allclose(gV, nV, atol=1e-7)


class TestTrain:
    def test_negatives_are_unobserved(self):
        Y = synth_powerlaw(50, 20, 1.0, 10, 0)
        users = np.repeat(np.arange(50), 3)
        neg = sample_negatives(Y, users, 4, rng_for(0, "negatives"))
        assert neg.shape == (150, 4)
        assert not Y.contains(np.repeat(users, 4), neg.ravel()).any()

    def test_batches_cover_positives(self):
        Y = synth_powerlaw(40, 30, 1.0, 5, 0)
        cfg = TrainConfig(batch_size=64, negatives_per_positive=2)
        batches = list(iter_batches(Y, cfg, rng_for(0, "shuffle"), rng_for(0, "negatives")))
        labels = np.concatenate([b.labels for b in batches])
        assert labels.sum() == Y.nnz and labels.size == 3 * Y.nnz

    def test_beta_zero_has_no_penalty(self):
        Y = synth_powerlaw(40, 30, 1.0, 5, 0)
        _, log = train(Y, TrainConfig(d=4, epochs=3, batch_size=50))
        assert np.all(log.penalties == 0.0)
        assert np.all(np.diff([r.epoch for r in log.records]) > 0)
        assert np.all(log.seconds > 0)

    def test_rank1_fit(self):
        rng = np.random.default_rng(0)
        Ydense = (np.outer(rng.random(30), rng.random(25)) > 0.25).astype(float)
        Y = InteractionMatrix.from_dense(Ydense)
        E, _ = train(Y, TrainConfig(d=4, epochs=200, learning_rate=0.01, full_batch=True, seed=2))
        assert np.mean((Ydense - E.U @ E.V.T) ** 2) < 0.05

    def test_full_batch_loss_monotone(self):
        rng = np.random.default_rng(1)
        Y = InteractionMatrix.from_dense(rng.random((20, 20)) < 0.3)
        _, log = train(Y, TrainConfig(d=8, epochs=100, learning_rate=1e-3, full_batch=True))
        assert np.all(np.diff(log.losses) <= 1e-12)

    @pytest.mark.parametrize("loss", ["mse", "bce", "bpr"])
    def test_deterministic(self, loss):
        Y = synth_powerlaw(60, 40, 1.2, 6, 2)
        cfg = TrainConfig(d=5, loss=loss, epochs=3, batch_size=64, beta=0.1, seed=4)
        a, la = train(Y, cfg)
        b, lb = train(Y, cfg)
        assert a.U.tobytes() == b.U.tobytes() and a.V.tobytes() == b.V.tobytes()
        assert np.array_equal(la.losses, lb.losses)

    def test_lightgcn_and_spectrum_log(self, tmp_path):
        Y = synth_powerlaw(60, 40, 1.2, 6, 2)
        cfg = TrainConfig(d=5, epochs=4, backbone="lightgcn", lightgcn_layers=2, log_spectrum_every=2, beta=0.5)
        E, log = train(Y, cfg)
        assert E.is_finite()
        assert [e for e, _ in log.spectra] == [0, 2, 4]
        log.write_spectrum_csv(tmp_path / "s.csv")
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "epoch,k,sigma_k"
        assert len(lines) == 1 + 3 * 5
        epoch, k, val = lines[1].split(",")
        assert (epoch, k) == ("0", "1") and float(val) > 0

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_aborts(self):
        Y = synth_powerlaw(30, 20, 1.0, 4, 0)
        with pytest.raises((TrainingDivergedError, NonFiniteGradientError)):
            train(Y, TrainConfig(d=4, epochs=5, learning_rate=1e200, full_batch=True))

    def test_diverged_loss(self, monkeypatch):
        import specrec.model as M

        Y = synth_powerlaw(30, 20, 1.0, 4, 0)
        real = M.full_mse_loss_and_grad
        calls = {"n": 0}

        def flaky(E, Yd):
            calls["n"] += 1
            value, gU, gV = real(E, Yd)
            return (float("nan") if calls["n"] == 3 else value), gU, gV

        monkeypatch.setattr(M, "full_mse_loss_and_grad", flaky)
        with pytest.raises(TrainingDivergedError) as info:
            train(Y, TrainConfig(d=4, epochs=5, full_batch=True))
        assert (info.value.epoch, info.value.last_good_epoch) == (3, 2)

    def test_direct_regularizer_runs(self):
        Y = synth_powerlaw(40, 30, 1.0, 5, 0)
        E, log = train(Y, TrainConfig(d=4, epochs=2, beta=0.1, regularizer="direct"))
        assert E.is_finite() and np.all(log.penalties > 0)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [
            {"learning_rate": 0.0},
            {"epochs": 0},
            {"loss": "bpr", "negatives_per_positive": 0},
            {"loss": "hinge"},
            {"backbone": "lightgcn", "lightgcn_layers": 0},
            {"full_batch": True, "loss": "bce"},
            {"beta": -1.0},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            TrainConfig(**kw).validate()

    def test_roundtrip(self):
        cfg = TrainConfig(d=7, beta=0.3, loss="bpr")
        assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_unknown_field(self):
        with pytest.raises(ConfigError):
            TrainConfig.from_dict({"dim": 3})


class TestCheckpoint:
    def test_roundtrip_and_layout(self, tmp_path):
        E = init_embeddings(3, 4, 2, 0)
        cfg = TrainConfig(d=2)
        path = save_checkpoint(E, tmp_path / "run" / "model.bin", cfg)
        raw = path.read_bytes()
        assert raw[:4] == b"SBL1"
        assert struct.unpack("<qqq", raw[4:28]) == (3, 4, 2)
        assert len(raw) == 28 + 8 * (3 * 2 + 4 * 2)
        assert np.frombuffer(raw[28:76], "<f8").tolist() == E.U.ravel().tolist()
        F, meta = load_checkpoint(path)
        assert np.array_equal(F.U, E.U) and np.array_equal(F.V, E.V)
        assert TrainConfig.from_dict(meta["config"]) == cfg

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.bin"
        p.write_bytes(b"NOPE" + bytes(24))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)

    def test_truncated(self, tmp_path):
        E = init_embeddings(3, 4, 2, 0)
        path = save_checkpoint(E, tmp_path / "model.bin")
        path.write_bytes(path.read_bytes()[:-8])
        with pytest.raises(ValueError):
            load_checkpoint(path)
