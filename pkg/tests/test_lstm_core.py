"""Cell-level tests: quantized matvec, forward/backward, optimizers, audit."""

import math
from fractions import Fraction

import numpy as np
import pytest

from floatsd8 import lstm_core as lc
from floatsd8 import numerics as nm
from floatsd8 import qactivations as qa
from oracles import replay_qmatvec, round_fp16

QPOL = lc.PrecisionPolicy()
SPOL = lc.PrecisionPolicy.shadow()


def rand_fp8(rng, shape, scale=1.0):
    return nm.fp8_quantize_values(rng.normal(0, scale, shape))


def rand_fsd8(rng, shape, scale=0.5):
    return nm.fsd8_quantize_values(rng.normal(0, scale, shape))


class TestPolicy:
    def test_shadow_is_identity_everywhere(self):
        rng = np.random.default_rng(0)
        x = rng.normal(0, 1, 50)
        assert np.array_equal(SPOL.quantize_act(x), x)
        assert np.array_equal(SPOL.quantize_grad(x), x)
        assert np.array_equal(SPOL.quantize_weight(x), x)
        assert np.array_equal(SPOL.accum_round(x), x)

    def test_layer_overrides(self):
        pol = lc.PrecisionPolicy(last_layer_act="fp16")
        x = np.array([1.0 + 2.0 ** -10])          # fp16-exact, not fp8-exact
        assert pol.quantize_act(x, "last")[0] == x[0]
        assert pol.quantize_act(x, "other")[0] != x[0]
        assert pol.quantize_grad(x, "last")[0] == x[0]

    def test_validation(self):
        with pytest.raises(ValueError):
            lc.PrecisionPolicy(weight_fmt="int8")
        with pytest.raises(ValueError):
            lc.PrecisionPolicy(loss_scale=0.0)
        with pytest.raises(ValueError):
            lc.PrecisionPolicy(accum_block=0)

    def test_master_rounding(self):
        pol16 = lc.PrecisionPolicy(master_fmt="fp16")
        x = np.array([1.0 + 2.0 ** -13])         # under half an fp16 ulp
        assert pol16.round_master(x)[0] == 1.0
        assert pol16.round_master(np.array([1.0 + 3 * 2.0 ** -11]))[0] == 1.0 + 2 * 2.0 ** -10
        pol32 = lc.PrecisionPolicy(master_fmt="fp32")
        y = np.array([1.0 + 2.0 ** -30])
        assert pol32.round_master(y)[0] == 1.0


class TestQMatvec:
    def test_zero_weights_pass_bias(self):
        W = np.zeros((3, 4))
        x = rand_fp8(np.random.default_rng(1), 4)
        bias = nm.fp16_quantize_values(np.array([0.5, -1.25, 2.0]))
        assert np.array_equal(lc.qmatvec(W, x, bias), bias)

    def test_tiny_exact_case(self):
        out = lc.qmatvec(np.array([[1.0]]), np.array([1.0]), np.array([0.5]))
        assert out == np.array([1.5])

    def test_shape_errors(self):
        with pytest.raises(ValueError):
            lc.qmatvec(np.zeros((2, 3)), np.zeros(4), np.zeros(2))
        with pytest.raises(ValueError):
            lc.qmatvec(np.zeros((2, 3)), np.zeros(3), np.zeros(3))

    @pytest.mark.parametrize("block", [1, 4])
    def test_matches_rational_replay(self, block):
        rng = np.random.default_rng(33)
        W = rand_fsd8(rng, (8, 8))
        x = rand_fp8(rng, 8)
        bias = nm.fp16_quantize_values(rng.normal(0, 0.3, 8))
        pol = lc.PrecisionPolicy(accum_block=block)
        got = lc.qmatvec(W, x, bias, pol)
        want = replay_qmatvec(W.tolist(), x.tolist(), bias.tolist(), block=block)
        assert [Fraction(v) for v in got] == want

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        W = rand_fsd8(rng, (5, 7))
        X = rand_fp8(rng, (4, 7))
        bias = nm.fp16_quantize_values(rng.normal(0, 0.2, 5))
        batched = lc.qmatvec(W, X, bias)
        for b in range(4):
            assert np.array_equal(batched[b], lc.qmatvec(W, X[b], bias))

    def test_shadow_uses_plain_arithmetic(self):
        rng = np.random.default_rng(10)
        W = rng.normal(0, 1, (3, 6))
        x = rng.normal(0, 1, 6)
        bias = rng.normal(0, 1, 3)
        assert np.allclose(lc.qmatvec(W, x, bias, SPOL), W @ x + bias, rtol=1e-12)


def zero_layer(input_size=2, hidden=3, policy=QPOL):
    p = lc.LSTMLayerParams(input_size, hidden,
                           np.zeros((4 * hidden, input_size + hidden)),
                           np.zeros(4 * hidden))
    p.refresh_quantized(policy)
    return p


class TestCellForward:
    def test_all_zero_weights(self):
        p = zero_layer()
        st = lc.cell_forward(p, np.zeros((1, 2)), lc.LSTMState.zeros(1, 3), QPOL)
        cache = st.caches[0]
        assert np.all(cache.f == 0.5) and np.all(cache.i == 0.5) and np.all(cache.o == 0.5)
        assert np.all(cache.g == 0.0)
        assert np.all(st.c == 0.0) and np.all(st.h == 0.0)

    def test_half_cell_state_decays_to_quarter(self):
        p = zero_layer()
        st0 = lc.LSTMState(np.full((1, 3), 0.5), np.zeros((1, 3)))
        st1 = lc.cell_forward(p, np.zeros((1, 2)), st0, QPOL)
        assert np.all(st1.c == 0.25)

    def test_dimension_errors(self):
        p = zero_layer()
        with pytest.raises(ValueError):
            lc.cell_forward(p, np.zeros((1, 5)), lc.LSTMState.zeros(1, 3), QPOL)
        with pytest.raises(ValueError):
            lc.cell_forward(p, np.zeros((1, 2)), lc.LSTMState.zeros(2, 3), QPOL)

    def test_matches_scalar_replay_oracle(self):
        # independent slow path: scalar quantizers + rational FP16 accumulation
        rng = np.random.default_rng(77)
        H, I = 4, 3
        pol = QPOL
        p = lc.LSTMLayerParams(I, H, rng.normal(0, 0.7, (4 * H, I + H)),
                               rng.normal(0, 0.3, 4 * H))
        p.refresh_quantized(pol)
        x = rand_fp8(rng, (2, I))
        st0 = lc.LSTMState(rand_fp8(rng, (2, H), 0.5), rand_fp8(rng, (2, H), 0.5))
        st1 = lc.cell_forward(p, x, st0, pol)

        inp = np.concatenate([x, st0.h], axis=1)
        for b in range(2):
            z = replay_qmatvec(p.w_q.tolist(), inp[b].tolist(), p.b_q.tolist())
            gates = {}
            for k, gate in enumerate(lc.GATES):
                zs = [float(v) for v in z[k * H:(k + 1) * H]]
                if gate == "g":
                    gates[gate] = [qa.qtanh(nm.fp8_quantize(v).value).value for v in zs]
                else:
                    gates[gate] = [qa.qsigmoid(nm.fp8_quantize(v).value).value for v in zs]
            for j in range(H):
                c16 = round_fp16(Fraction(gates["f"][j]) * Fraction(st0.c[b, j])
                                 + Fraction(gates["i"][j]) * Fraction(gates["g"][j]))
                c_new = nm.fp8_quantize(float(c16)).value
                assert st1.c[b, j] == c_new
                th = qa.qtanh(c_new).value
                h16 = round_fp16(Fraction(gates["o"][j]) * Fraction(th))
                assert st1.h[b, j] == nm.fp8_quantize(float(h16)).value


class TestCellBackward:
    def test_zero_grads_give_zero(self):
        rng = np.random.default_rng(3)
        p = lc.LSTMLayerParams(2, 3, rng.normal(0, 0.5, (12, 5)), np.zeros(12))
        p.refresh_quantized(QPOL)
        st = lc.cell_forward(p, rand_fp8(rng, (2, 2)), lc.LSTMState.zeros(2, 3), QPOL)
        g = lc.cell_backward(p, st.caches[0], np.zeros((2, 3)), np.zeros((2, 3)), QPOL)
        for arr in (g.dx, g.dh_prev, g.dc_prev, g.dw, g.db):
            assert np.all(arr == 0.0)

    def test_missing_cache_is_state_error(self):
        p = zero_layer()
        with pytest.raises(RuntimeError):
            lc.cell_backward(p, None, np.zeros((1, 3)), np.zeros((1, 3)), QPOL)

    @pytest.mark.parametrize("seed", range(4))
    def test_shadow_gradients_match_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        H, I, T = 1, 1, 3
        w0 = rng.normal(0, 0.6, (4 * H, I + H))
        b0 = rng.normal(0, 0.2, 4 * H)
        xs = [rng.normal(0, 1, (1, I)) for _ in range(T)]

        def run(w):
            p = lc.LSTMLayerParams(I, H, w, b0.copy())
            p.refresh_quantized(SPOL)
            st = lc.LSTMState.zeros(1, H)
            for x in xs:
                st = lc.cell_forward(p, x, st, SPOL)
            return p, st

        p, st = run(w0)
        dh, dc = np.ones((1, H)), np.zeros((1, H))
        dw_total = np.zeros_like(w0)
        for t in reversed(range(T)):
            g = lc.cell_backward(p, st.caches[t], dh, dc, SPOL)
            dw_total += g.dw
            dh, dc = g.dh_prev, g.dc_prev
        h = 1e-3
        for idx in [(0, 0), (H, 1), (2 * H, 0), (3 * H, 1)]:
            wp, wm = w0.copy(), w0.copy()
            wp[idx] += h
            wm[idx] -= h
            fd = (float(run(wp)[1].h.sum()) - float(run(wm)[1].h.sum())) / (2 * h)
            assert abs(dw_total[idx] - fd) / max(abs(fd), 1e-8) < 1e-4

    def test_loss_scaling_rescues_tiny_gradients(self):
        rng = np.random.default_rng(8)
        p = lc.LSTMLayerParams(2, 3, rng.normal(0, 0.5, (12, 5)), np.zeros(12))
        p.refresh_quantized(QPOL)
        st = lc.cell_forward(p, rand_fp8(rng, (1, 2)), lc.LSTMState.zeros(1, 3), QPOL)
        tiny = np.full((1, 3), 1e-6)            # below the FP8 subnormal floor
        g0 = lc.cell_backward(p, st.caches[0], nm.fp8_quantize_values(tiny),
                              np.zeros((1, 3)), QPOL)
        g1 = lc.cell_backward(p, st.caches[0], nm.fp8_quantize_values(tiny * 1024),
                              np.zeros((1, 3)), QPOL)
        assert np.all(g0.dw == 0.0)
        assert np.count_nonzero(g1.dw) > 0


class TestOptimizers:
    def make_params(self, master, policy):
        p = lc.LSTMLayerParams(1, 1, np.full((4, 2), master), np.zeros(4))
        p.refresh_quantized(policy)
        return p

    def test_sgd_exact_step(self):
        p = self.make_params(1.0, QPOL)
        grads = {"w": np.full((4, 2), 0.25), "b": np.zeros(4)}
        lc.optimizer_step(p, grads, lc.SGD(1.0), QPOL)
        assert np.all(p.w_master == 0.75)
        assert np.all(p.w_q == 0.75)             # exactly representable

    def test_zero_gradients_change_nothing(self):
        rng = np.random.default_rng(1)
        p = lc.LSTMLayerParams(2, 2, QPOL.round_master(rng.normal(0, 0.5, (8, 4))),
                               QPOL.round_master(rng.normal(0, 0.1, 8)))
        p.refresh_quantized(QPOL)
        before_w = p.w_master.copy()
        before_q = nm.fsd8_encode_values(p.w_q)
        lc.optimizer_step(p, {"w": np.zeros((8, 4)), "b": np.zeros(8)}, lc.SGD(0.1), QPOL)
        assert np.array_equal(p.w_master, before_w)
        assert np.array_equal(nm.fsd8_encode_values(p.w_q), before_q)

    def test_sub_step_updates_accumulate_and_flip_code(self):
        pol = lc.PrecisionPolicy(master_fmt="fp16")
        p = self.make_params(1.0, pol)
        opt = lc.SGD(1.0)
        grads = {"w": np.full((4, 2), 1e-3)}
        codes = [nm.fsd8_encode_values(p.w_q)[0, 0]]
        for _ in range(100):
            lc.optimizer_step(p, grads, opt, pol)
            codes.append(nm.fsd8_encode_values(p.w_q)[0, 0])
        assert codes[1] == codes[0]              # one step is sub-quantization
        assert codes[-1] != codes[0]             # drift eventually flips the code
        assert abs(p.w_master[0, 0] - 0.9) < 5e-3

    def test_quantizer_consistency_invariant(self):
        rng = np.random.default_rng(6)
        p = lc.LSTMLayerParams(3, 2, rng.normal(0, 0.5, (8, 5)), rng.normal(0, 0.1, 8))
        p.refresh_quantized(QPOL)
        opt = lc.Adam(1e-2)
        for k in range(5):
            grads = {"w": rng.normal(0, 0.05, (8, 5)), "b": rng.normal(0, 0.02, 8)}
            lc.optimizer_step(p, grads, opt, QPOL)
            assert np.array_equal(p.w_q, nm.fsd8_quantize_values(p.w_master))
            assert np.array_equal(p.b_q, nm.fp16_quantize_values(p.b_master))

    def test_adam_moments_are_fp32(self):
        opt = lc.Adam(1e-3)
        opt.begin_step()
        opt.update("w", np.ones((2, 2)))
        assert opt.m["w"].dtype == np.float32
        assert opt.v["w"].dtype == np.float32

    def test_nonpositive_lr_rejected(self):
        for bad in (0.0, -1e-3):
            with pytest.raises(ValueError):
                lc.SGD(bad)
            with pytest.raises(ValueError):
                lc.Adam(bad)


class TestWeightInit:
    def test_deterministic_under_seed(self):
        a = lc.weight_init((16, 8), seed=42)
        b = lc.weight_init((16, 8), seed=42)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, lc.weight_init((16, 8), seed=43))

    def test_bound_keeps_values_inside_clamp_range(self):
        w = lc.weight_init((256, 128), seed=0, fan=128)
        assert np.max(np.abs(w)) <= 1 / math.sqrt(128) < nm.fsd8_max_value()

    def test_quantized_init_uses_many_mantissa_codes(self):
        w = lc.weight_init((4 * 128, 256), seed=7, fan=128)
        codes = nm.fsd8_encode_values(nm.fsd8_quantize_values(w)) & 0x1F
        assert len(set(codes.ravel().tolist())) >= 20

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            lc.weight_init((2, 2), scheme="normal")


class TestAudit:
    def test_quantized_path_operand_formats(self):
        rng = np.random.default_rng(12)
        p = lc.LSTMLayerParams(3, 4, rng.normal(0, 0.6, (16, 7)), rng.normal(0, 0.2, 16))
        p.refresh_quantized(QPOL)
        x = rand_fp8(rng, (2, 3))
        with lc.audit_formats() as log:
            st = lc.cell_forward(p, x, lc.LSTMState.zeros(2, 4), QPOL)
            lc.cell_backward(p, st.caches[0], rand_fp8(rng, (2, 4), 0.1),
                             np.zeros((2, 4)), QPOL)
        assert log, "audit recorded nothing"
        for site, lhs, rhs in log:
            if site in ("matvec", "matvec_t"):
                assert "floatsd8" in lhs
                assert "fp8" in rhs or "fp16" in rhs   # fresh grads may be fp16-exact zeros
            elif site.startswith("cell."):
                assert "qsigmoid" in lhs               # one/minus-term pairs allowed
                assert "fp8" in rhs
            elif site == "wgrad":
                assert "fp8" in lhs and "fp8" in rhs
        sites = {s for s, _, _ in log}
        assert {"matvec", "cell.f_c", "cell.i_g", "cell.o_tanh", "matvec_t", "wgrad"} <= sites


class TestShadowEquivalence:
    def test_matches_plain_numpy_lstm(self):
        # independent dense reference implementation
        rng = np.random.default_rng(21)
        H, I, T, B = 5, 3, 6, 2
        p = lc.LSTMLayerParams(I, H, rng.normal(0, 0.5, (4 * H, I + H)),
                               rng.normal(0, 0.2, 4 * H))
        p.refresh_quantized(SPOL)
        xs = rng.normal(0, 1, (T, B, I))

        st = lc.LSTMState.zeros(B, H)
        for t in range(T):
            st = lc.cell_forward(p, xs[t], st, SPOL)

        def sigmoid(z):
            return 1.0 / (1.0 + np.exp(-z))

        c = np.zeros((B, H))
        h = np.zeros((B, H))
        W, b = p.w_master, p.b_master
        for t in range(T):
            inp = np.concatenate([xs[t], h], axis=1)
            z = inp @ W.T + b
            f = sigmoid(z[:, :H])
            i = sigmoid(z[:, H:2 * H])
            o = sigmoid(z[:, 2 * H:3 * H])
            g = np.tanh(z[:, 3 * H:])
            c = f * c + i * g
            h = o * np.tanh(c)
        assert np.allclose(st.c, c, rtol=1e-6, atol=1e-12)
        assert np.allclose(st.h, h, rtol=1e-6, atol=1e-12)
