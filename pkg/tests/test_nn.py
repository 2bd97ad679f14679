"""Engine-level checks: every layer kind against finite differences, Adam
hand-derived steps, shape algebra, checkpoint round-trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import relative_gradient_error, tracked
from microsleep import nn
from microsleep.nn import layers as L
from microsleep.nn.autograd import (
    GraphCycle,
    NotScalarLoss,
    ShapeMismatch,
    Tensor,
    add,
    mean,
    mul,
    relu,
    sigmoid,
    softmax_cross_entropy,
    sum_,
    tanh,
)
from microsleep.nn.optim import Adam

GRAD_TOL = 1e-4


def scalarize(t: Tensor) -> Tensor:
    """Deterministic scalar readout that keeps every element influential."""
    return mean(mul(t, t))


class TestPrimitives:
    def test_sum_of_parameters_has_unit_gradient(self):
        p = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        sum_(p).backward()
        assert np.array_equal(p.grad, np.ones((2, 3)))

    def test_disconnected_component_untouched(self):
        a = Tensor(np.ones(3), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        sum_(mul(a, a)).backward()
        assert a.grad is not None
        assert b.grad is None

    def test_loss_must_be_scalar(self):
        p = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(NotScalarLoss):
            mul(p, p).backward()

    def test_reused_tensor_accumulates(self):
        p = Tensor(np.array([3.0]), requires_grad=True)
        sum_(add(mul(p, p), p)).backward()  # d/dp (p^2 + p) = 2p + 1
        assert np.allclose(p.grad, [7.0])

    def test_cycle_detection(self):
        a = Tensor(np.ones(2), requires_grad=True)
        b = mul(a, a)
        b._parents = (b,)  # deliberately corrupt the graph
        with pytest.raises(GraphCycle):
            sum_(b).backward()

    @pytest.mark.parametrize("op", [relu, sigmoid, tanh])
    def test_elementwise_gradients(self, op):
        rng = np.random.default_rng(3)
        p = tracked(rng, (4, 5))
        err = relative_gradient_error(lambda: scalarize(op(p)), {"p": p})
        assert err <= GRAD_TOL

    def test_broadcast_add_gradient(self):
        rng = np.random.default_rng(4)
        a = tracked(rng, (3, 4))
        b = tracked(rng, (4,))
        err = relative_gradient_error(lambda: scalarize(add(a, b)), {"a": a, "b": b})
        assert err <= GRAD_TOL


class TestSoftmaxXent:
    def test_uniform_logits_loss_is_log_c(self):
        for c in (2, 5, 7):
            loss = softmax_cross_entropy(Tensor(np.zeros(c)), 0)
            assert np.isclose(float(loss.data), np.log(c))

    def test_extreme_logits_stable(self):
        loss = softmax_cross_entropy(Tensor(np.array([1000.0, 0.0])), 0)
        assert float(loss.data) == pytest.approx(0.0, abs=1e-12)
        assert np.isfinite(float(loss.data))

    def test_gradient_is_softmax_minus_onehot(self):
        logits = Tensor(np.array([0.2, -1.0, 0.5]), requires_grad=True)
        softmax_cross_entropy(logits, 2).backward()
        z = np.exp([0.2, -1.0, 0.5])
        expected = z / z.sum() - np.array([0.0, 0.0, 1.0])
        assert np.allclose(logits.grad, expected)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = tracked(rng, (4, 6))
        labels = np.array([1, 0, 5, 3])
        err = relative_gradient_error(
            lambda: softmax_cross_entropy(logits, labels), {"logits": logits}
        )
        assert err <= GRAD_TOL


def layer_cases():
    """(spec, input_shape) for every layer kind at small sizes."""
    return [
        (L.LayerSpec("conv1d", in_channels=3, out_channels=4, kernel=5, stride=1, padding="valid"), (2, 3, 12)),
        (L.LayerSpec("conv1d", in_channels=2, out_channels=3, kernel=4, stride=3, padding="same"), (2, 2, 11)),
        (L.LayerSpec("conv2d", in_channels=2, out_channels=3, kernel=3, stride=1, padding="same"), (2, 2, 6, 7)),
        (L.LayerSpec("conv2d", in_channels=3, out_channels=2, kernel=3, stride=2, padding="valid"), (1, 3, 8, 9)),
        (L.LayerSpec("transposed_conv1d", in_channels=3, out_channels=2, kernel=2, stride=2), (2, 3, 6)),
        (L.LayerSpec("transposed_conv2d", in_channels=2, out_channels=3, kernel=2, stride=2), (2, 2, 4, 5)),
        (L.LayerSpec("maxpool", kernel=2, stride=2), (2, 3, 10)),
        (L.LayerSpec("maxpool", kernel=2, stride=2), (2, 2, 6, 8)),
        (L.LayerSpec("maxpool", kernel=3, stride=2), (1, 2, 9)),
        (L.LayerSpec("relu"), (3, 4)),
        (L.LayerSpec("dense", in_channels=6, out_channels=3), (4, 6)),
        (L.LayerSpec("bilstm", in_channels=3, hidden_size=4), (2, 5, 3)),
        (L.LayerSpec("global_avg_pool"), (2, 3, 7)),
        (L.LayerSpec("global_avg_pool"), (2, 3, 4, 5)),
    ]


class TestLayerGradients:
    @pytest.mark.parametrize("spec,shape", layer_cases())
    def test_gradient_matches_finite_differences(self, spec, shape):
        rng = np.random.default_rng(hash((spec.kind, shape)) % 2**32)
        params = L.init_params(spec, rng, dtype=np.float64)
        x = tracked(rng, shape)
        if spec.kind == "maxpool":
            # keep window maxima away from ties so the subgradient is unique
            x.data += np.linspace(0, 1, x.data.size).reshape(shape) * 10

        everything = dict(params)
        everything["input"] = x
        err = relative_gradient_error(
            lambda: scalarize(L.forward(spec, params, x)), everything
        )
        assert err <= GRAD_TOL, f"{spec.kind}: relative error {err:.3e}"

    def test_concat_gradient(self):
        rng = np.random.default_rng(9)
        a = tracked(rng, (2, 3, 4))
        b = tracked(rng, (2, 5, 4))
        spec = L.LayerSpec("concat", axis=1)
        err = relative_gradient_error(
            lambda: scalarize(L.forward(spec, {}, [a, b])), {"a": a, "b": b}
        )
        assert err <= GRAD_TOL

    def test_softmax_xent_as_layer(self):
        rng = np.random.default_rng(10)
        logits = tracked(rng, (3, 5))
        spec = L.LayerSpec("softmax_xent")
        err = relative_gradient_error(
            lambda: L.forward(spec, {}, logits, labels=np.array([0, 2, 4])),
            {"logits": logits},
        )
        assert err <= GRAD_TOL


class TestLayerSemantics:
    def test_identity_kernel_conv1d(self):
        spec = L.LayerSpec("conv1d", in_channels=1, out_channels=1, kernel=1)
        params = {
            "w": Tensor(np.ones((1, 1, 1))),
            "b": Tensor(np.zeros(1)),
        }
        x = Tensor(np.arange(8.0).reshape(1, 1, 8))
        out = L.forward(spec, params, x)
        assert np.array_equal(out.data, x.data)

    def test_conv1d_matches_nested_loop_oracle(self):
        x = Tensor(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
        spec = L.LayerSpec("conv1d", in_channels=1, out_channels=1, kernel=2)
        params = {"w": Tensor(np.ones((1, 1, 2))), "b": Tensor(np.zeros(1))}
        out = L.forward(spec, params, x)
        assert np.array_equal(out.data, [[[3.0, 5.0, 7.0]]])

    def test_conv1d_random_against_loops(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((2, 3, 15))
        w = rng.standard_normal((4, 3, 5))
        b = rng.standard_normal(4)
        spec = L.LayerSpec("conv1d", in_channels=3, out_channels=4, kernel=5, stride=2)
        out = L.forward(spec, {"w": Tensor(w), "b": Tensor(b)}, Tensor(x))
        n_out = (15 - 5) // 2 + 1
        expected = np.zeros((2, 4, n_out))
        for bi in range(2):
            for co in range(4):
                for t in range(n_out):
                    acc = b[co]
                    for ci in range(3):
                        for k in range(5):
                            acc += w[co, ci, k] * x[bi, ci, t * 2 + k]
                    expected[bi, co, t] = acc
        assert np.allclose(out.data, expected)

    def test_conv2d_random_against_loops(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal((1, 2, 7, 8))
        w = rng.standard_normal((3, 2, 3, 3))
        b = rng.standard_normal(3)
        spec = L.LayerSpec("conv2d", in_channels=2, out_channels=3, kernel=3)
        out = L.forward(spec, {"w": Tensor(w), "b": Tensor(b)}, Tensor(x))
        expected = np.zeros((1, 3, 5, 6))
        for co in range(3):
            for i in range(5):
                for j in range(6):
                    acc = b[co]
                    for ci in range(2):
                        for ki in range(3):
                            for kj in range(3):
                                acc += w[co, ci, ki, kj] * x[0, ci, i + ki, j + kj]
                    expected[0, co, i, j] = acc
        assert np.allclose(out.data, expected)

    def test_maxpool_block_maxima(self):
        ramp = np.arange(16.0).reshape(1, 1, 4, 4)
        spec = L.LayerSpec("maxpool", kernel=2, stride=2)
        out = L.forward(spec, {}, Tensor(ramp))
        assert np.array_equal(out.data, [[[[5.0, 7.0], [13.0, 15.0]]]])

    def test_transposed_conv_doubles_length(self):
        spec = L.LayerSpec("transposed_conv1d", in_channels=2, out_channels=3, kernel=2, stride=2)
        rng = np.random.default_rng(13)
        params = L.init_params(spec, rng)
        out = L.forward(spec, params, Tensor(np.zeros((1, 2, 9), dtype=np.float32)))
        assert out.data.shape == (1, 3, 18)

    def test_same_padding_splits_high(self):
        # length 5, kernel 4, stride 1 -> deficit 3: one low, two high
        x = Tensor(np.array([[[1.0, 1.0, 1.0, 1.0, 1.0]]]))
        spec = L.LayerSpec("conv1d", in_channels=1, out_channels=1, kernel=4, padding="same")
        params = {"w": Tensor(np.ones((1, 1, 4))), "b": Tensor(np.zeros(1))}
        out = L.forward(spec, params, x)
        assert np.array_equal(out.data[0, 0], [3.0, 4.0, 4.0, 3.0, 2.0])

    def test_bilstm_output_concatenates_directions(self):
        rng = np.random.default_rng(14)
        spec = L.LayerSpec("bilstm", in_channels=3, hidden_size=4)
        params = L.init_params(spec, rng, dtype=np.float64)
        x = Tensor(rng.standard_normal((2, 6, 3)))
        out = L.forward(spec, params, x)
        assert out.data.shape == (2, 6, 8)


@st.composite
def random_conv_case(draw):
    kind = draw(st.sampled_from(["conv1d", "conv2d", "maxpool1d", "maxpool2d", "tconv1d", "tconv2d"]))
    stride = draw(st.integers(1, 3))
    kernel = draw(st.integers(1, 5))
    length = draw(st.integers(kernel, 14))
    batch = draw(st.integers(1, 3))
    channels = draw(st.integers(1, 3))
    return kind, stride, kernel, length, batch, channels


class TestShapeAlgebra:
    @given(random_conv_case(), st.sampled_from(["valid", "same"]))
    @settings(max_examples=60, deadline=None)
    def test_declared_shape_matches_actual(self, case, padding):
        kind, stride, kernel, length, batch, channels = case
        rng = np.random.default_rng(0)
        if kind in ("conv1d", "conv2d"):
            spec = L.LayerSpec(kind, in_channels=channels, out_channels=2,
                               kernel=kernel, stride=stride, padding=padding)
        elif kind in ("tconv1d", "tconv2d"):
            spec = L.LayerSpec("transposed_conv" + kind[-2:], in_channels=channels,
                               out_channels=2, kernel=kernel, stride=stride)
        else:
            spec = L.LayerSpec("maxpool", kernel=kernel, stride=stride)
        shape = (batch, channels, length) if kind.endswith("1d") else (batch, channels, length, length)
        params = L.init_params(spec, rng)
        x = Tensor(np.zeros(shape, dtype=np.float32))
        try:
            declared = L.output_shape(spec, shape)
        except ShapeMismatch:
            with pytest.raises(ShapeMismatch):
                L.forward(spec, params, x)
            return
        out = L.forward(spec, params, x)
        assert out.data.shape == declared


class TestAdam:
    def test_zero_gradient_zero_decay_no_change(self):
        p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        p.grad = np.zeros(2)
        opt.step()
        assert np.array_equal(p.data, [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        # constant gradient 1: bias correction gives m_hat/sqrt(v_hat) = 1
        p = Tensor(np.array([0.5]), requires_grad=True)
        opt = Adam({"p": p}, lr=1e-3)
        p.grad = np.array([1.0])
        opt.step()
        assert p.data[0] == pytest.approx(0.5 - 1e-3, abs=1e-9)

    def test_decoupled_weight_decay_shrinks(self):
        p = Tensor(np.array([2.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.01, weight_decay=0.1)
        p.grad = np.array([0.0])
        opt.step()
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.01 * 0.1))

    def test_step_count_increments(self):
        p = Tensor(np.array([1.0]), requires_grad=True)
        opt = Adam({"p": p}, lr=0.1)
        for _ in range(3):
            p.grad = np.array([0.1])
            opt.step()
        assert opt.step_count == 3


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(21)
        params = {
            "layer1.w": Tensor(rng.standard_normal((3, 4)).astype(np.float32), requires_grad=True),
            "layer1.b": Tensor(np.zeros(4, dtype=np.float32), requires_grad=True),
        }
        manifest = {"model_kind": "unet5", "seed": 7, "fusion": False}
        stem = tmp_path / "model"
        nn.save_checkpoint(stem, manifest, params)
        loaded_manifest, loaded = nn.load_checkpoint(stem)
        assert loaded_manifest["model_kind"] == "unet5"
        assert loaded_manifest["seed"] == 7
        assert [e["name"] for e in loaded_manifest["params"]] == list(params)
        for name, p in params.items():
            assert np.array_equal(loaded[name], p.data)

    def test_truncated_blob_rejected(self, tmp_path):
        params = {"w": Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)}
        stem = tmp_path / "model"
        nn.save_checkpoint(stem, {"model_kind": "utime2"}, params)
        (tmp_path / "model.bin").write_bytes(b"\x00" * 4)
        with pytest.raises(nn.CheckpointError):
            nn.load_checkpoint(stem)
