import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowcast.encdec import (
    BtBlockParams,
    GruParams,
    MhsaParams,
    bt_block,
    combine_streams,
    gru_encode,
    mhsa,
    output_projection,
)
from flowcast.errors import ContractError, DimensionError
from flowcast.gradcheck import check_gradients
from flowcast.tensor import Tensor, tensor
from flowcast.tensor import mean as tmean
from flowcast.tensor import sum_ as tsum


# -- independent oracles ---------------------------------------------------------

def gru_oracle(x, p):
    """Step-by-step plain-numpy recurrence (reset-before-candidate variant)."""

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    t_steps, n, d = x.shape
    h = np.zeros((n, d))
    outs = []
    for t in range(t_steps):
        z = sig(x[t] @ p["w_z"] + h @ p["u_z"] + p["b_z"])
        r = sig(x[t] @ p["w_r"] + h @ p["u_r"] + p["b_r"])
        c = np.tanh(x[t] @ p["w_n"] + (r * h) @ p["u_n"] + p["b_n"])
        h = (1.0 - z) * c + z * h
        outs.append(h.copy())
    return np.stack(outs)


def mhsa_oracle(q, k, v, heads, w_q, w_k, w_v, w_o):
    """Explicit per-head loop over 2-D inputs."""
    d_head = w_q.shape[1] // heads
    pieces = []
    for j in range(heads):
        cols = slice(j * d_head, (j + 1) * d_head)
        qj = q @ w_q[:, cols]
        kj = k @ w_k[:, cols]
        vj = v @ w_v[:, cols]
        scores = qj @ kj.T / np.sqrt(d_head)
        scores = scores - scores.max(axis=1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=1, keepdims=True)
        pieces.append(attn @ vj)
    return np.concatenate(pieces, axis=1) @ w_o


def gru_params(d, seed, scale=0.4):
    rng = np.random.default_rng(seed)
    names = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n"]
    fields = {}
    for name in names:
        shape = (d,) if name.startswith("b") else (d, d)
        fields[name] = tensor(rng.normal(0, scale, shape), requires_grad=True)
    return GruParams(**fields)


def mhsa_params(width, heads, d_head, seed, scale=0.4):
    rng = np.random.default_rng(seed)
    return MhsaParams(
        heads=heads,
        w_q=tensor(rng.normal(0, scale, (width, heads * d_head)), requires_grad=True),
        w_k=tensor(rng.normal(0, scale, (width, heads * d_head)), requires_grad=True),
        w_v=tensor(rng.normal(0, scale, (width, heads * d_head)), requires_grad=True),
        w_o=tensor(rng.normal(0, scale, (heads * d_head, width)), requires_grad=True))


def bt_params(t_out, d, heads, seed):
    rng = np.random.default_rng(seed)
    return BtBlockParams(
        it=tensor(rng.normal(0, 0.4, (t_out, 3 * d)), requires_grad=True),
        stage1=mhsa_params(3 * d, heads, (3 * d) // heads, seed + 1),
        stage2=mhsa_params(3 * d, heads, (3 * d) // heads, seed + 2),
        out_proj=tensor(rng.normal(0, 0.4, (3 * d, d)), requires_grad=True))


# -- GRU -------------------------------------------------------------------------

class TestGru:
    def test_zero_params_zero_output(self):
        p = GruParams(**{name: Tensor(np.zeros((3, 3)) if not name.startswith("b")
                                      else np.zeros(3))
                         for name in ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r",
                                      "w_n", "u_n", "b_n"]})
        out = gru_encode(Tensor(np.ones((4, 2, 3))), p)
        np.testing.assert_array_equal(out.data, np.zeros((4, 2, 3)))

    def test_matches_scalar_recurrence_oracle(self):
        p = gru_params(2, seed=0)
        x = np.random.default_rng(1).normal(size=(2, 1, 2))
        out = gru_encode(Tensor(x), p)
        arrays = {name: getattr(p, name).data for name in
                  ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n"]}
        np.testing.assert_allclose(out.data, gru_oracle(x, arrays), atol=1e-12)

    def test_matches_oracle_multinode(self):
        p = gru_params(4, seed=2)
        x = np.random.default_rng(3).normal(size=(5, 3, 4))
        arrays = {name: getattr(p, name).data for name in
                  ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_n", "u_n", "b_n"]}
        np.testing.assert_allclose(gru_encode(Tensor(x), p).data,
                                   gru_oracle(x, arrays), atol=1e-12)

    def test_causality(self):
        p = gru_params(3, seed=4)
        rng = np.random.default_rng(5)
        x = rng.normal(size=(6, 2, 3))
        base = gru_encode(Tensor(x), p).data
        bumped = x.copy()
        bumped[4] += rng.normal(size=(2, 3))
        out = gru_encode(Tensor(bumped), p).data
        np.testing.assert_array_equal(out[:4], base[:4])
        assert not np.allclose(out[4:], base[4:])

    def test_batched_matches_loop(self):
        p = gru_params(3, seed=6)
        x = np.random.default_rng(7).normal(size=(2, 4, 3, 3))
        batched = gru_encode(Tensor(x), p).data
        for b in range(2):
            np.testing.assert_allclose(batched[b],
                                       gru_encode(Tensor(x[b]), p).data,
                                       atol=1e-14)

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            gru_encode(Tensor(np.zeros((2, 2, 5))), gru_params(3, seed=8))

    def test_gradcheck(self):
        p = gru_params(2, seed=9)
        x = tensor(np.random.default_rng(10).normal(size=(3, 2, 2)),
                   requires_grad=True)
        leaves = [x] + [getattr(p, f) for f in
                        ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r",
                         "w_n", "u_n", "b_n"]]

        def loss(_):
            out = gru_encode(x, p)
            return tsum(out * out)

        assert check_gradients(loss, leaves) < 1e-5


class TestCombineStreams:
    def test_zero_stream_passthrough(self):
        y = Tensor(np.random.default_rng(11).normal(size=(2, 3, 4)))
        out = combine_streams(y, Tensor(np.zeros((2, 3, 4))))
        np.testing.assert_array_equal(out.data, y.data)

    def test_fixed_mode_commutative(self):
        rng = np.random.default_rng(12)
        a, b = Tensor(rng.normal(size=(2, 2))), Tensor(rng.normal(size=(2, 2)))
        np.testing.assert_array_equal(combine_streams(a, b).data,
                                      combine_streams(b, a).data)

    def test_trainable_half_is_half_fixed(self):
        rng = np.random.default_rng(13)
        a, b = Tensor(rng.normal(size=(3, 2))), Tensor(rng.normal(size=(3, 2)))
        beta = Tensor(np.array(0.5))
        np.testing.assert_allclose(combine_streams(a, b, beta=beta).data,
                                   0.5 * combine_streams(a, b).data, atol=1e-12)

    def test_beta_must_be_scalar(self):
        with pytest.raises(ContractError):
            combine_streams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))),
                            beta=Tensor(np.zeros(2)))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            combine_streams(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 3))))


# -- attention ----------------------------------------------------------------------

class TestMhsa:
    def test_singleton_attention_returns_value_row(self):
        p = MhsaParams(heads=1, w_q=Tensor(np.eye(3)), w_k=Tensor(np.eye(3)),
                       w_v=Tensor(np.eye(3)), w_o=Tensor(np.eye(3)))
        q = Tensor(np.array([[0.3, -1.0, 2.0]]))
        kv = Tensor(np.array([[5.0, 6.0, 7.0]]))
        out = mhsa(q, kv, kv, p)
        np.testing.assert_allclose(out.data, [[5.0, 6.0, 7.0]], atol=1e-12)

    def test_identical_keys_average_values(self):
        p = MhsaParams(heads=1, w_q=Tensor(np.eye(2)), w_k=Tensor(np.eye(2)),
                       w_v=Tensor(np.eye(2)), w_o=Tensor(np.eye(2)))
        q = Tensor(np.random.default_rng(14).normal(size=(3, 2)))
        k = Tensor(np.array([[1.0, 2.0], [1.0, 2.0]]))
        v = Tensor(np.array([[10.0, 0.0], [0.0, 4.0]]))
        out = mhsa(q, k, v, p)
        np.testing.assert_allclose(out.data, np.tile([5.0, 2.0], (3, 1)), atol=1e-12)

    def test_matches_per_head_loop_oracle(self):
        rng = np.random.default_rng(15)
        p = mhsa_params(width=4, heads=2, d_head=2, seed=16)
        q, k, v = (rng.normal(size=(3, 4)) for _ in range(3))
        expected = mhsa_oracle(q, k, v, 2, p.w_q.data, p.w_k.data, p.w_v.data,
                               p.w_o.data)
        np.testing.assert_allclose(mhsa(Tensor(q), Tensor(k), Tensor(v), p).data,
                                   expected, atol=1e-12)

    def test_uneven_lengths(self):
        rng = np.random.default_rng(17)
        p = mhsa_params(width=4, heads=2, d_head=3, seed=18)
        q = rng.normal(size=(5, 4))
        k = rng.normal(size=(2, 4))
        v = rng.normal(size=(2, 4))
        expected = mhsa_oracle(q, k, v, 2, p.w_q.data, p.w_k.data, p.w_v.data,
                               p.w_o.data)
        out = mhsa(Tensor(q), Tensor(k), Tensor(v), p)
        assert out.shape == (5, 4)
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_batched_matches_loop(self):
        rng = np.random.default_rng(19)
        p = mhsa_params(width=4, heads=2, d_head=2, seed=20)
        q = rng.normal(size=(2, 3, 5, 4))
        kv = rng.normal(size=(2, 3, 6, 4))
        out = mhsa(Tensor(q), Tensor(kv), Tensor(kv), p).data
        for i in range(2):
            for j in range(3):
                expected = mhsa_oracle(q[i, j], kv[i, j], kv[i, j], 2,
                                       p.w_q.data, p.w_k.data, p.w_v.data,
                                       p.w_o.data)
                np.testing.assert_allclose(out[i, j], expected, atol=1e-12)

    def test_broadcast_query_over_batch(self):
        rng = np.random.default_rng(21)
        p = mhsa_params(width=4, heads=2, d_head=2, seed=22)
        q = rng.normal(size=(3, 4))            # shared queries
        kv = rng.normal(size=(5, 2, 4))        # five batch entries
        out = mhsa(Tensor(q), Tensor(kv), Tensor(kv), p).data
        assert out.shape == (5, 3, 4)
        for i in range(5):
            expected = mhsa_oracle(q, kv[i], kv[i], 2, p.w_q.data, p.w_k.data,
                                   p.w_v.data, p.w_o.data)
            np.testing.assert_allclose(out[i], expected, atol=1e-12)

    def test_width_mismatch(self):
        p = mhsa_params(width=4, heads=2, d_head=2, seed=23)
        with pytest.raises(DimensionError):
            mhsa(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))),
                 Tensor(np.zeros((2, 4))), p)

    def test_gradcheck(self):
        rng = np.random.default_rng(24)
        p = mhsa_params(width=4, heads=2, d_head=2, seed=25)
        q = tensor(rng.normal(size=(2, 4)), requires_grad=True)
        kv = tensor(rng.normal(size=(3, 4)), requires_grad=True)

        def loss(_):
            out = mhsa(q, kv, kv, p)
            return tsum(out * out)

        assert check_gradients(loss, [q, kv, p.w_q, p.w_k, p.w_v, p.w_o]) < 1e-5


# -- bottleneck block -----------------------------------------------------------------

class TestBtBlock:
    def test_zero_value_maps_zero_output(self):
        p = bt_params(t_out=3, d=4, heads=2, seed=26)
        p.stage2.w_v = Tensor(np.zeros((12, 12)))
        rng = np.random.default_rng(27)
        out = bt_block(Tensor(rng.normal(size=(3, 2, 4))),
                       Tensor(rng.normal(size=(3, 4))),
                       Tensor(rng.normal(size=(2, 4))), p)
        np.testing.assert_allclose(out.data, np.zeros((3, 2, 4)), atol=1e-12)

    @pytest.mark.parametrize("l_in,t_out", [(3, 3), (5, 3)])
    def test_output_shape_for_both_lengths(self, l_in, t_out):
        p = bt_params(t_out=t_out, d=4, heads=2, seed=28)
        rng = np.random.default_rng(29)
        out = bt_block(Tensor(rng.normal(size=(l_in, 2, 4))),
                       Tensor(rng.normal(size=(l_in, 4))),
                       Tensor(rng.normal(size=(2, 4))), p)
        assert out.shape == (t_out, 2, 4)

    def test_batched_matches_loop(self):
        p = bt_params(t_out=2, d=4, heads=2, seed=30)
        rng = np.random.default_rng(31)
        z = rng.normal(size=(3, 2, 2, 4))
        m_t = Tensor(rng.normal(size=(2, 4)))
        m_s = Tensor(rng.normal(size=(2, 4)))
        out = bt_block(Tensor(z), m_t, m_s, p).data
        for b in range(3):
            single = bt_block(Tensor(z[b]), m_t, m_s, p).data
            np.testing.assert_allclose(out[b], single, atol=1e-12)

    def test_nodes_independent(self):
        # changing one node's sequence must not disturb other nodes' outputs
        p = bt_params(t_out=3, d=4, heads=2, seed=32)
        rng = np.random.default_rng(33)
        z = rng.normal(size=(3, 3, 4))
        m_t = Tensor(rng.normal(size=(3, 4)))
        m_s = Tensor(rng.normal(size=(3, 4)))
        base = bt_block(Tensor(z), m_t, m_s, p).data
        z2 = z.copy()
        z2[:, 1, :] += 1.0
        out = bt_block(Tensor(z2), m_t, m_s, p).data
        np.testing.assert_array_equal(out[:, 0], base[:, 0])
        np.testing.assert_array_equal(out[:, 2], base[:, 2])
        assert not np.allclose(out[:, 1], base[:, 1])

    def test_shape_validation(self):
        p = bt_params(t_out=3, d=4, heads=2, seed=34)
        rng = np.random.default_rng(35)
        with pytest.raises(DimensionError):
            bt_block(Tensor(rng.normal(size=(3, 2, 4))),
                     Tensor(rng.normal(size=(4, 4))),   # wrong length
                     Tensor(rng.normal(size=(2, 4))), p)

    def test_gradcheck_inducing_vectors(self):
        p = bt_params(t_out=2, d=4, heads=2, seed=36)
        rng = np.random.default_rng(37)
        z = Tensor(rng.normal(size=(2, 2, 4)))
        m_t = Tensor(rng.normal(size=(2, 4)))
        m_s = Tensor(rng.normal(size=(2, 4)))

        def loss(_):
            out = bt_block(z, m_t, m_s, p)
            return tmean(out * out)

        assert check_gradients(loss, [p.it, p.out_proj, p.stage1.w_q]) < 1e-5


class TestOutputProjection:
    def test_zero_weights_give_bias(self):
        z = Tensor(np.random.default_rng(38).normal(size=(3, 2, 4)))
        out = output_projection(z, Tensor(np.zeros((4, 2))),
                                Tensor(np.array([1.5, -2.0])))
        np.testing.assert_allclose(out.data,
                                   np.broadcast_to([1.5, -2.0], (3, 2, 2)))

    def test_selector_column(self):
        z = np.random.default_rng(39).normal(size=(2, 2, 3))
        w = np.zeros((3, 1))
        w[0, 0] = 1.0
        out = output_projection(Tensor(z), Tensor(w), Tensor(np.zeros(1)))
        np.testing.assert_allclose(out.data[..., 0], z[..., 0])

    def test_gradcheck(self):
        rng = np.random.default_rng(40)
        z = Tensor(rng.normal(size=(2, 2, 3)))
        w = tensor(rng.normal(size=(3, 2)), requires_grad=True)
        b = tensor(rng.normal(size=2), requires_grad=True)

        def loss(_):
            out = output_projection(z, w, b)
            return tsum(out * out)

        assert check_gradients(loss, [w, b]) < 1e-6


class TestDecoderStack:
    @pytest.mark.parametrize("blocks", [1, 2, 3, 4])
    def test_stack_depth_preserves_shape(self, blocks):
        rng = np.random.default_rng(41)
        t_in, t_out, n, d = 4, 3, 2, 4
        z = Tensor(rng.normal(size=(t_in, n, d)))
        m_t_hist = Tensor(rng.normal(size=(t_in, d)))
        m_t_pred = Tensor(rng.normal(size=(t_out, d)))
        m_s = Tensor(rng.normal(size=(n, d)))
        for i in range(blocks):
            p = bt_params(t_out=t_out, d=d, heads=2, seed=50 + i)
            m_t = m_t_hist if z.shape[0] == t_in and i == 0 else m_t_pred
            z = bt_block(z, m_t, m_s, p)
        assert z.shape == (t_out, n, d)
