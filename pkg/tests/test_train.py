import numpy as np
import pytest

from microsr import model, ops, train
from microsr.data import synth_dataset
from microsr.errors import ShapeError

from oracles import adam_scalar

SMALL = model.ArchitectureSpec(a0=4, k=1, alpha=1, r=5, down_stride=2)


def _edge_energy_loops(img):
    """Zero-padded 3x3 edge correlation, squared and summed over both axes."""
    kx = train.EDGE_KERNEL
    ky = train.EDGE_KERNEL.T
    h, w = img.shape
    pad = np.pad(img, 1)
    out = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            win = pad[i : i + 3, j : j + 3]
            out[i, j] = (win * kx).sum() ** 2 + (win * ky).sum() ** 2
    return out


class TestLoss:
    def test_mse_oracle(self, rng):
        a = rng.uniform(0, 1, (2, 3, 8, 8))
        b = rng.uniform(0, 1, (2, 3, 8, 8))
        want = float(np.mean((a - b) ** 2))
        assert abs(train.loss(a, b, 0.0) - want) < 1e-15

    def test_identical_images_leave_only_edge_term(self, rng):
        y = rng.uniform(0, 1, (1, 3, 9, 9))
        lam = 0.001
        want = lam * float(np.mean(train.sobel_gradient_sq(y)))
        assert train.loss(y.copy(), y.copy(), lam) == pytest.approx(want, abs=1e-15)

    def test_edge_energy_matches_loop_oracle(self, rng):
        img = rng.uniform(0, 1, (7, 6))
        got = train.sobel_gradient_sq(img.reshape(1, 1, 7, 6))[0, 0]
        np.testing.assert_allclose(got, _edge_energy_loops(img), atol=1e-12)

    def test_loss_does_not_mutate_inputs(self, rng):
        a = rng.uniform(0, 1, (1, 3, 6, 6))
        b = rng.uniform(0, 1, (1, 3, 6, 6))
        a0, b0 = a.copy(), b.copy()
        train.loss(a, b, 0.001)
        train.loss_backward(a, b, 0.001)
        np.testing.assert_array_equal(a, a0)
        np.testing.assert_array_equal(b, b0)

    def test_loss_backward_finite_difference(self):
        lam = 0.001
        for seed in range(10):
            rng = np.random.default_rng(200 + seed)
            shape = (int(rng.integers(1, 3)), 3,
                     int(rng.integers(5, 9)), int(rng.integers(5, 9)))
            y_hr = rng.uniform(0, 1, shape)
            y0 = y_hr + 0.1 * rng.standard_normal(shape)

            def f(t):
                return train.loss(t, y_hr, lam), train.loss_backward(t, y_hr, lam)

            def f_ref(t):
                # quotient reference in extended precision; loss() itself
                # rounds the value to float64
                tl = t.astype(np.longdouble)
                hl = y_hr.astype(np.longdouble)
                d = tl - hl
                return np.mean(d * d) + np.longdouble(lam) * np.mean(
                    train.sobel_gradient_sq(tl))

            err = ops.finite_difference_check(f, y0, step=1e-5, f_ref=f_ref)
            assert err < 1e-6, f"seed {seed}: {err}"

    def test_shape_mismatch_raises(self, rng):
        with pytest.raises(ShapeError):
            train.loss(rng.random((1, 3, 5, 5)), rng.random((1, 3, 6, 6)), 0.0)


class TestAdam:
    def test_matches_scalar_recurrence(self):
        spec = model.ArchitectureSpec(a0=3, k=1, alpha=0, r=2, down_stride=2)
        params = model.init_params(spec, seed=3, dtype=np.float64)
        arrays = model.param_arrays(params)
        theta0 = [a.copy() for a in arrays]
        state = train.init_adam(params)
        rng = np.random.default_rng(7)
        steps = [[rng.standard_normal(a.shape) for a in arrays] for _ in range(20)]
        for grads in steps:
            train.adam_step(params, grads, state, lr=1e-3)
        for ai, (a, t0) in enumerate(zip(arrays, theta0)):
            flat = a.reshape(-1)
            flat0 = t0.reshape(-1)
            for j in range(flat.size):
                want = adam_scalar([g[ai].reshape(-1)[j] for g in steps],
                                   lr=1e-3, theta0=float(flat0[j]))
                assert flat[j] == pytest.approx(want, rel=1e-12, abs=1e-15), (ai, j)

    def test_zero_gradient_fresh_state_is_noop(self):
        params = model.init_params(SMALL, seed=0)
        arrays = model.param_arrays(params)
        before = [a.copy() for a in arrays]
        zeros = [np.zeros_like(a) for a in arrays]
        train.adam_step(params, zeros, train.init_adam(params), lr=0.1)
        for a, b in zip(arrays, before):
            np.testing.assert_array_equal(a, b)

    def test_first_step_moves_by_signed_learning_rate(self, rng):
        params = model.init_params(SMALL, seed=1, dtype=np.float64)
        arrays = model.param_arrays(params)
        before = [a.copy() for a in arrays]
        grads = [np.where(rng.random(a.shape) < 0.5, -1.0, 1.0) * 3.0 for a in arrays]
        train.adam_step(params, grads, train.init_adam(params), lr=1e-2)
        for a, b, g in zip(arrays, before, grads):
            np.testing.assert_allclose(a - b, -1e-2 * np.sign(g), rtol=1e-7)

    def test_gradient_list_length_checked(self):
        params = model.init_params(SMALL, seed=0)
        with pytest.raises(ShapeError):
            train.adam_step(params, [], train.init_adam(params), lr=1e-3)

    def test_step_counter_advances(self):
        params = model.init_params(SMALL, seed=0)
        state = train.init_adam(params)
        zeros = [np.zeros_like(a) for a in model.param_arrays(params)]
        train.adam_step(params, zeros, state, lr=1e-3)
        train.adam_step(params, zeros, state, lr=1e-3)
        assert state.t == 2


def _tiny_sets():
    pairs = synth_dataset(4, seed=5, hr_size=20)
    val = synth_dataset(1, seed=6, hr_size=20)
    return pairs, val


class TestTrainLoop:
    def test_loss_decreases_on_tiny_problem(self):
        pairs, val = _tiny_sets()
        cfg = train.TrainConfig(learning_rate=3e-3, reg_lambda=0.001,
                                batch_size=4, max_epochs=40, seed=0)
        res = train.train(pairs, val, cfg, spec=SMALL)
        first = res.log[0][1]
        last = res.log[-1][1]
        assert last < 0.5 * first

    def test_two_runs_bitwise_identical(self):
        pairs, val = _tiny_sets()
        cfg = train.TrainConfig(learning_rate=1e-3, reg_lambda=0.001,
                                batch_size=2, max_epochs=5, seed=9)
        r1 = train.train(pairs, val, cfg, spec=SMALL)
        r2 = train.train(pairs, val, cfg, spec=SMALL)
        for a, b in zip(model.param_arrays(r1.state.params),
                        model.param_arrays(r2.state.params)):
            np.testing.assert_array_equal(a, b)
        assert [(e, tl, vl) for e, tl, vl, _ in r1.log] == \
               [(e, tl, vl) for e, tl, vl, _ in r2.log]

    def test_resume_matches_unbroken_run(self):
        pairs, val = _tiny_sets()
        full = train.TrainConfig(learning_rate=1e-3, batch_size=2, max_epochs=6, seed=2)
        half = train.TrainConfig(learning_rate=1e-3, batch_size=2, max_epochs=3, seed=2)
        r_full = train.train(pairs, val, full, spec=SMALL)
        r_half = train.train(pairs, val, half, spec=SMALL)
        r_rest = train.train(pairs, val, full, state=r_half.state)
        for a, b in zip(model.param_arrays(r_full.state.params),
                        model.param_arrays(r_rest.state.params)):
            np.testing.assert_array_equal(a, b)
        joined = [(e, tl, vl) for e, tl, vl, _ in r_half.log + r_rest.log]
        assert joined == [(e, tl, vl) for e, tl, vl, _ in r_full.log]

    def test_best_val_is_log_minimum(self):
        pairs, val = _tiny_sets()
        cfg = train.TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=8, seed=4)
        res = train.train(pairs, val, cfg, spec=SMALL)
        vals = [vl for _, _, vl, _ in res.log if vl is not None]
        assert res.best_val == min(vals)
        assert res.log[res.best_epoch - 1][2] == res.best_val

    def test_validation_interval_skips_epochs(self):
        pairs, val = _tiny_sets()
        cfg = train.TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=5,
                                seed=4, validation_interval=2)
        res = train.train(pairs, val, cfg, spec=SMALL)
        flags = [vl is not None for _, _, vl, _ in res.log]
        # epochs 2 and 4 by interval, epoch 5 because it is the last
        assert flags == [False, True, False, True, True]

    def test_empty_sets_rejected(self):
        pairs, val = _tiny_sets()
        cfg = train.TrainConfig(max_epochs=1)
        with pytest.raises(ValueError):
            train.train([], val, cfg, spec=SMALL)
        with pytest.raises(ValueError):
            train.train(pairs, [], cfg, spec=SMALL)

    def test_label_dims_validated(self, rng):
        bad = [(rng.random((8, 8, 3)).astype(np.float32),
                rng.random((19, 19, 3)).astype(np.float32))]
        good_val = [(rng.random((8, 8, 3)).astype(np.float32),
                     rng.random((20, 20, 3)).astype(np.float32))]
        cfg = train.TrainConfig(max_epochs=1)
        with pytest.raises(ShapeError):
            train.train(bad, good_val, cfg, spec=SMALL)


class TestStateSerialization:
    def test_roundtrip_and_resume_equivalence(self, tmp_path):
        pairs, val = _tiny_sets()
        half = train.TrainConfig(learning_rate=1e-3, batch_size=2, max_epochs=3, seed=8)
        full = train.TrainConfig(learning_rate=1e-3, batch_size=2, max_epochs=6, seed=8)
        r_half = train.train(pairs, val, half, spec=SMALL)

        path = tmp_path / "state.npz"
        train.save_train_state(path, r_half.state, half)
        loaded = train.load_train_state(path)

        assert loaded.epoch_next == r_half.state.epoch_next
        assert loaded.best_epoch == r_half.state.best_epoch
        assert loaded.best_val == r_half.state.best_val
        assert loaded.adam.t == r_half.state.adam.t
        for a, b in zip(model.param_arrays(loaded.params),
                        model.param_arrays(r_half.state.params)):
            np.testing.assert_array_equal(a, b)
        for a, b in zip(loaded.adam.m, r_half.state.adam.m):
            np.testing.assert_array_equal(a, b)

        r_mem = train.train(pairs, val, full, state=r_half.state)
        r_disk = train.train(pairs, val, full, state=loaded)
        for a, b in zip(model.param_arrays(r_mem.state.params),
                        model.param_arrays(r_disk.state.params)):
            np.testing.assert_array_equal(a, b)

    def test_write_log_roundtrips_losses_exactly(self, tmp_path):
        rows = [(1, 0.123456789123456789, 0.25, 0.01),
                (2, 1e-9, None, 12.5)]
        path = tmp_path / "log.csv"
        train.write_log(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_loss,val_loss,wall_seconds"
        e, tl, vl, _ = lines[1].split(",")
        assert int(e) == 1 and float(tl) == rows[0][1] and float(vl) == 0.25
        e, tl, vl, _ = lines[2].split(",")
        assert int(e) == 2 and float(tl) == 1e-9 and vl == ""
