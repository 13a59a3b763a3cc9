import math

import numpy as np
import pytest

from fmehscmt.backbone import init_model, micro_config
from fmehscmt.checkpoint import load_checkpoint, save_checkpoint
from fmehscmt.data import split, synth_generate
from fmehscmt.errors import ConfigError, ContractError, NumericalError
from fmehscmt.gradcheck import grad_check
from fmehscmt.model import HSCMTNet
from fmehscmt.params import Init, ParamStore
from fmehscmt.tensor import Parameter, Tape, Tensor
from fmehscmt.training import (Adam, TrainConfig, TrainState, clip_grad_norm, cross_entropy,
                               evaluate, fit, lr_at, read_history_csv, write_history_csv)


class TestCrossEntropy:
    def test_uniform(self):
        loss = cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3])
        assert abs(float(loss.data) - math.log(4)) < 1e-12
        assert abs(math.log(4) - 1.386294) < 1e-6

    def test_confident(self):
        logits = np.zeros((2, 4))
        logits[0, 2] = logits[1, 0] = 40.0
        assert float(cross_entropy(Tensor(logits), [2, 0]).data) < 1e-10

    def test_gradient_is_softmax_minus_onehot(self, rng):
        logits = Tensor(rng.normal(size=(5, 4)))
        labels = rng.integers(0, 4, size=5)

        def build(tape):
            return cross_entropy(tape.watch(logits), labels)

        assert grad_check(build, [logits], max_coords=20) < 1e-8
        p = np.exp(logits.data - logits.data.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        expect = (p - np.eye(4)[labels]) / 5
        np.testing.assert_allclose(logits.grad, expect, atol=1e-12)

    def test_large_logits_stay_finite(self):
        logits = np.array([[1e4, -1e4, 0.0, 0.0]])
        assert math.isfinite(float(cross_entropy(Tensor(logits), [1]).data))

    def test_bad_labels(self):
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 4))), [0, 4])
        with pytest.raises(ContractError):
            cross_entropy(Tensor(np.zeros((2, 4))), [0])


def lone(value, kind="weight"):
    return Parameter("w", Tensor(np.array(value, dtype=np.float64)), kind=kind)


class TestAdam:
    def test_zero_grads_no_decay(self, rng):
        store = ParamStore(np.float64)
        Init(store, rng).linear("fc", 3, 5)
        before = store.state()
        opt = Adam(store)
        for p in store:
            p.grad = np.zeros_like(p.data)
        for _ in range(3):
            opt.step(1e-3, 0.0)
        for name, arr in store.state().items():
            np.testing.assert_array_equal(arr, before[name])

    def test_quadratic_convergence(self):
        p = lone([0.0])
        opt = Adam([p])
        for _ in range(2000):
            p.grad = p.data - 3.0
            opt.step(1e-2)
        assert abs(p.data[0] - 3.0) < 1e-3

    def test_decay_closed_form(self):
        p = lone([2.0, -1.5])
        opt = Adam([p])
        lr, wd = 1e-3, 0.04
        expect = p.data.copy()
        for _ in range(10):
            p.grad = np.zeros(2)
            opt.step(lr, wd)
            expect = expect * (1 - lr * wd)
        np.testing.assert_array_equal(p.data, expect)
        assert abs(p.data[0] - 2.0 * (1 - lr * wd) ** 10) < 1e-15

    def test_decay_census(self):
        store = init_model(micro_config())
        opt = Adam(store)
        for p in store:
            p.grad = np.zeros_like(p.data)
        opt.step(1e-3, 0.04)
        decayed = set(opt.decayed)
        assert decayed == {p.name for p in store if p.kind == "weight"}
        assert not any(n.endswith(("_b", "_g")) or "rel_bias" in n for n in decayed)
        assert "head.fc" in decayed and "stage0.block0.lmhsa.dw_k" in decayed

    def test_shape_mismatch(self):
        p = lone([1.0, 2.0])
        p.grad = np.zeros(3)
        with pytest.raises(ContractError):
            Adam([p]).step(1e-3)

    def test_clip(self):
        a, b = lone([3.0]), lone([4.0])
        a.grad, b.grad = np.array([3.0]), np.array([4.0])
        norm = clip_grad_norm([a, b], 1.0)
        assert norm == 5.0
        assert abs(math.hypot(a.grad[0], b.grad[0]) - 1.0) < 1e-9
        a.grad = np.array([0.1])
        b.grad = None
        assert clip_grad_norm([a, b], 1.0) == pytest.approx(0.1)
        assert a.grad[0] == 0.1


class TestSchedule:
    def test_lr_values(self):
        cfg = TrainConfig()
        assert all(lr_at(e, cfg) == 1e-3 for e in range(20))
        assert abs(lr_at(20, cfg) - 8.5e-4) < 1e-15
        assert abs(lr_at(39, cfg) - 8.5e-4) < 1e-15
        assert abs(lr_at(40, cfg) - 7.225e-4) < 1e-15
        with pytest.raises(ContractError):
            lr_at(-1, cfg)

    def test_config_validation(self):
        for bad in ({"lr0": 0}, {"decay_factor": 0}, {"decay_factor": 1.5}, {"batch_size": 0}):
            with pytest.raises(ConfigError):
                TrainConfig(**bad)
        cfg = TrainConfig(epochs=3, seed=4)
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg


@pytest.fixture(scope="module")
def tiny_split():
    return split(synth_generate(4, 32, seed=3), (0.5, 0.25, 0.25), seed=0)


def run(tiny_split, epochs, state=None, net=None, seed=11):
    net = net or HSCMTNet(micro_config(), seed=2)
    cfg = TrainConfig(epochs=epochs, seed=seed, batch_size=4)
    return net, fit(net, tiny_split, cfg, state=state)


class TestFit:
    def test_zero_epochs(self, tiny_split):
        net = HSCMTNet(micro_config(), seed=2)
        before = net.store.state()
        state = fit(net, tiny_split, TrainConfig(epochs=0))
        assert state.history == [] and state.epoch == 0
        for name, arr in net.store.state().items():
            assert arr.tobytes() == before[name].tobytes()

    def test_repeatable_and_resumable(self, tiny_split, tmp_path):
        net_a, a = run(tiny_split, 2)
        _, b = run(tiny_split, 2)
        assert a.history == b.history
        assert len(a.history) == 2 and set(a.history[0]) == {"epoch", "lr", "train_loss",
                                                              "val_loss", "val_acc"}
        net_c, c = run(tiny_split, 1)
        save_checkpoint(net_c, c, tmp_path / "ck", TrainConfig(epochs=1, seed=11, batch_size=4))
        net_d, state, tcfg = load_checkpoint(tmp_path / "ck")
        assert tcfg.seed == 11 and state.epoch == 1
        _, d = run(tiny_split, 2, state=state, net=net_d)
        assert d.history == a.history
        for name, arr in net_a.store.state().items():
            assert net_d.store[name].data.tobytes() == arr.tobytes(), name

    def test_numerical_abort(self, tiny_split):
        net = HSCMTNet(micro_config(), seed=2)
        net.store["head.fc"].data[...] = 1e38
        with pytest.raises(NumericalError, match=r"epoch 1 batch 0"):
            with np.errstate(all="ignore"):
                fit(net, tiny_split, TrainConfig(epochs=1, batch_size=4))

    def test_evaluate(self, tiny_split):
        net = HSCMTNet(micro_config(), seed=2)
        loss, acc = evaluate(net, tiny_split.val)
        assert math.isfinite(loss) and 0.0 <= acc <= 1.0
        assert all(math.isnan(v) for v in evaluate(net, []))

    def test_history_csv(self, tmp_path):
        hist = [{"epoch": 1, "lr": 1e-3, "train_loss": 1 / 3, "val_loss": 0.7, "val_acc": 0.25}]
        write_history_csv(hist, tmp_path / "h.csv")
        assert read_history_csv(tmp_path / "h.csv") == hist
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == \
            "epoch,lr,train_loss,val_loss,val_acc"

    def test_best_params_tracked(self, tiny_split):
        net, state = run(tiny_split, 1)
        assert isinstance(state, TrainState)
        assert state.best_val_acc == state.history[0]["val_acc"]
        assert set(state.best_params) == set(net.store.names())


def test_loss_decreases_on_fixed_batch(rng):
    """A few optimizer steps on one batch must lower its loss."""
    net = HSCMTNet(micro_config(), seed=0)
    x = rng.random((8, 1, 32, 32)).astype(np.float32)
    y = np.arange(8) % 4
    opt = Adam(net.store)
    losses = []
    for _ in range(6):
        tape = Tape()
        loss = cross_entropy(net(x, tape=tape).logits, y)
        losses.append(float(loss.data))
        tape.backward(loss)
        opt.step(1e-3)
    assert losses[-1] < losses[0]
