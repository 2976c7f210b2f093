import numpy as np
import pytest

from bridgekit import autograd as ag
from bridgekit.autograd import Tensor, grad_check
from bridgekit.nn import (
    INIT_STD,
    Embedding,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    TransformerLayer,
    meta_init,
    zero_output_projections,
)

TOL = 1e-3


def rng(seed=0):
    return np.random.default_rng(seed)


def inputs(shape, seed=1):
    return Tensor(rng(seed).standard_normal(shape), requires_grad=True)


def scalarize(out: Tensor, seed=7) -> Tensor:
    w = rng(seed).standard_normal(out.shape)
    return (out * Tensor(w)).sum()


def check_all_params(module: Module, loss_fn, tol=TOL):
    for name, p in module.named_parameters():
        rep = grad_check(lambda _: loss_fn(), p, tol=tol)
        assert rep.passed, f"{name}: rel error {rep.max_rel_error:.2e}"


class TestInit:
    def test_linear_init_statistics(self):
        lin = Linear(256, 256, rng())
        assert abs(lin.weight.data.std() - INIT_STD) < 1e-3
        np.testing.assert_array_equal(lin.bias.data, 0.0)

    def test_layer_norm_init(self):
        ln = LayerNorm(6)
        np.testing.assert_array_equal(ln.gain.data, 1.0)
        np.testing.assert_array_equal(ln.bias.data, 0.0)

    def test_parameter_names_are_ordered(self):
        names = [n for n, _ in TransformerLayer(8, 2, rng()).named_parameters()]
        assert names[:2] == ["attn.query.weight", "attn.query.bias"]
        assert names[-2:] == ["ln2.gain", "ln2.bias"]

    def test_meta_init_allocates_nothing(self):
        with meta_init():
            lin = Linear(4096, 4096, rng())
        assert lin.weight.shape == (4096, 4096)
        assert lin.weight.data.strides == (0, 0)

    def test_ffn_count(self):
        # D=2, expansion 4: 2*8+8 + 8*2+2
        assert FeedForward(2, rng()).num_parameters() == 42

    def test_bad_dims(self):
        with pytest.raises(ValueError):
            Linear(0, 3, rng())
        with pytest.raises(ValueError):
            MultiHeadAttention(10, 3, rng())


class TestAttention:
    def test_self_attention_gradients(self):
        mha = MultiHeadAttention(8, 2, rng())
        x = inputs((2, 3, 8))
        mask = np.array([[1, 1, 0], [1, 1, 1]], dtype=bool)
        rep = grad_check(lambda t: mha(t, key_mask=mask), x, tol=TOL)
        assert rep.passed, rep.max_rel_error
        check_all_params(mha, lambda: scalarize(mha(x, key_mask=mask)))

    def test_cross_attention_gradients(self):
        mca = MultiHeadAttention(8, 2, rng(3))
        x, y = inputs((2, 3, 8)), inputs((2, 4, 8), seed=2)
        assert grad_check(lambda t: mca(t, y), x, tol=TOL).passed
        assert grad_check(lambda t: mca(x, t), y, tol=TOL).passed
        check_all_params(mca, lambda: scalarize(mca(x, y)))

    def test_masked_keys_get_zero_weight(self):
        mha = MultiHeadAttention(8, 2, rng())
        got = []
        mask = np.array([[1, 0, 1, 0]], dtype=bool)
        mha(inputs((1, 4, 8)), key_mask=mask, record=lambda w, m: got.append(w))
        w = got[0]
        assert w.shape == (1, 2, 4, 4)
        np.testing.assert_array_equal(w[..., ~mask[0]], 0.0)
        np.testing.assert_allclose(w.sum(-1), 1.0, rtol=1e-12)

    def test_fully_masked_raises(self):
        with pytest.raises(ValueError, match="masked"):
            MultiHeadAttention(8, 2, rng())(inputs((1, 3, 8)), key_mask=np.zeros((1, 3), bool))

    def test_matches_manual_single_head(self):
        mha = MultiHeadAttention(4, 1, rng())
        x = rng(5).standard_normal((3, 4))
        q = x @ mha.query.weight.data
        k = x @ mha.key.weight.data
        v = x @ mha.value.weight.data
        s = q @ k.T / 2.0
        a = np.exp(s - s.max(1, keepdims=True))
        a /= a.sum(1, keepdims=True)
        ref = a @ v @ mha.output.weight.data
        np.testing.assert_allclose(mha(Tensor(x)).data, ref, rtol=1e-12, atol=1e-15)

    def test_permutation_equivariance_without_positions(self):
        mha = MultiHeadAttention(8, 2, rng())
        x = rng(2).standard_normal((1, 5, 8))
        perm = np.array([3, 0, 4, 1, 2])
        out = mha(Tensor(x)).data
        np.testing.assert_allclose(mha(Tensor(x[:, perm])).data, out[:, perm], rtol=1e-12)


class TestBlocks:
    def test_ffn_gradients(self):
        ffn = FeedForward(6, rng(), expansion=2)
        x = inputs((2, 3, 6))
        assert grad_check(lambda t: ffn(t), x, tol=TOL).passed
        check_all_params(ffn, lambda: scalarize(ffn(x)))

    def test_embedding_gradients(self):
        emb = Embedding(5, 4, rng())
        ids = np.array([[0, 3, 3, 1]])
        check_all_params(emb, lambda: scalarize(emb(ids)))

    def test_embedding_range_check(self):
        with pytest.raises((IndexError, ValueError)):
            Embedding(5, 4, rng())(np.array([5]))

    @pytest.mark.parametrize("norm", ["pre", "post"])
    def test_transformer_layer_gradients(self, norm):
        layer = TransformerLayer(8, 2, rng(), norm=norm, expansion=2)
        x = inputs((2, 3, 8))
        mask = np.array([[1, 1, 1], [1, 1, 0]], dtype=bool)
        assert grad_check(lambda t: layer(t, mask), x, tol=TOL).passed
        check_all_params(layer, lambda: scalarize(layer(x, mask)))

    def test_pre_norm_with_zeroed_outputs_is_identity(self):
        layer = TransformerLayer(8, 2, rng(), norm="pre")
        zero_output_projections(layer)
        x = rng(1).standard_normal((2, 3, 8))
        np.testing.assert_array_equal(layer(Tensor(x)).data, x)

    def test_state_dict_round_trip(self):
        a, b = TransformerLayer(8, 2, rng(0)), TransformerLayer(8, 2, rng(1))
        b.load_state_dict(a.state_dict())
        x = Tensor(rng(2).standard_normal((1, 3, 8)))
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_load_state_dict_rejects_mismatch(self):
        a = Linear(3, 2, rng())
        with pytest.raises(KeyError):
            a.load_state_dict({"weight": np.zeros((3, 2))})
        with pytest.raises(ValueError):
            a.load_state_dict({"weight": np.zeros((2, 3)), "bias": np.zeros(2)})

    def test_layer_norm_output_statistics(self):
        out = LayerNorm(16)(Tensor(rng().standard_normal((4, 16)) * 5 + 3)).data
        np.testing.assert_allclose(out.mean(-1), 0.0, atol=1e-12)
        np.testing.assert_allclose(out.var(-1), 1.0, rtol=1e-4)

    def test_dropout_train_eval(self):
        layer = TransformerLayer(8, 2, rng(), dropout=0.5)
        x = Tensor(rng(1).standard_normal((1, 3, 8)))
        layer.eval()
        np.testing.assert_array_equal(layer(x).data, layer(x).data)
        layer.train()
        a = layer(x, rng=rng(1)).data
        b = layer(x, rng=rng(2)).data
        assert not np.array_equal(a, b)
        ag.current_tape().reset()
