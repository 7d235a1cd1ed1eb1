import math

import numpy as np
import pytest

from changesense.errors import InputError
from changesense.tensor import Tensor, backward, grad_check, make_rng
from changesense.vcp import (
    VCPConfig, cea_layer, diff_embedding, diff_features, encode_images,
    init_cea_params, init_encoder_params, vcp_forward,
)


def rand_images(seed, k=2, size=16):
    rng = make_rng(seed, "img")
    return [Tensor(rng.uniform(0, 1, size=(size, size, 3))) for _ in range(k)]


class TestEncoder:
    def test_identical_images_identical_features(self):
        cfg = VCPConfig(d_f=8)
        params = init_encoder_params(1, cfg)
        im = rand_images(2, k=1)[0]
        stack = encode_images([im, im.copy()], params, cfg)
        for l in range(1, 5):
            assert np.array_equal(stack.stage(1, l).data, stack.stage(2, l).data)

    def test_zero_image_finite(self):
        cfg = VCPConfig(d_f=8)
        params = init_encoder_params(1, cfg)
        z = Tensor(np.zeros((16, 16, 3)))
        stack = encode_images([z, z.copy()], params, cfg)
        for l in range(1, 5):
            assert np.isfinite(stack.stage(1, l).data).all()

    def test_fixed_seed_reproducible(self):
        cfg = VCPConfig(d_f=8)
        ims = rand_images(5)
        out1 = encode_images(ims, init_encoder_params(9, cfg), cfg)
        out2 = encode_images(ims, init_encoder_params(9, cfg), cfg)
        assert np.array_equal(out1.stage(1, 4).data, out2.stage(1, 4).data)

    def test_shape_mismatch(self):
        cfg = VCPConfig(d_f=8)
        params = init_encoder_params(1, cfg)
        with pytest.raises(InputError):
            encode_images([Tensor(np.zeros((16, 16, 3))),
                           Tensor(np.zeros((32, 32, 3)))], params, cfg)

    def test_halving_resolutions(self):
        cfg = VCPConfig(d_f=8)
        params = init_encoder_params(1, cfg)
        stack = encode_images(rand_images(3, size=32), params, cfg)
        assert [stack.stage(1, l).shape[:2] for l in range(1, 5)] == [
            (16, 16), (8, 8), (4, 4), (2, 2)]


class TestDiffFeatures:
    def test_identical_zero(self):
        x = Tensor(make_rng(1).normal(size=(2, 2, 3)))
        assert (diff_features(x, x.copy()).data == 0).all()

    def test_symmetry_bitwise(self):
        rng = make_rng(2)
        a, b = Tensor(rng.normal(size=(3, 3, 4))), Tensor(rng.normal(size=(3, 3, 4)))
        assert np.array_equal(diff_features(a, b).data, diff_features(b, a).data)

    def test_hand_values(self):
        out = diff_features(Tensor([[[1.0], [-2.0]]]), Tensor([[[3.0], [1.0]]]))
        assert np.array_equal(out.data.reshape(2), [2.0, 3.0])

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            diff_features(Tensor(np.zeros((2, 2, 3))), Tensor(np.zeros((2, 2, 4))))


class TestDiffEmbedding:
    def params(self, w1, b1, w2, b2):
        return {"m.w1": Tensor(w1), "m.b1": Tensor(b1),
                "m.w2": Tensor(w2), "m.b2": Tensor(b2)}

    def test_zero_input_zero_bias(self):
        d = 3
        p = self.params(np.ones((d, d)), np.zeros(d), np.ones((d, d)), np.zeros(d))
        out = diff_embedding(Tensor(np.zeros((2, 2, d))), p, "m")
        assert (out.data == 0).all()

    def test_shape_contract(self):
        rng = make_rng(4)
        d = 4
        p = self.params(rng.normal(size=(d, d)), rng.normal(size=d),
                        rng.normal(size=(d, d)), rng.normal(size=d))
        for w, h in [(1, 1), (3, 5), (8, 8)]:
            out = diff_embedding(Tensor(rng.uniform(size=(w, h, d))), p, "m")
            assert out.shape == (w, h, d)

    def test_hand_oracle(self):
        w1 = np.array([[1.0, 0.0], [0.0, 2.0]])
        w2 = np.array([[0.5, 1.0], [1.0, 0.0]])
        p = self.params(w1, np.zeros(2), w2, np.zeros(2))
        x = np.array([1.0, 2.0])
        expect = np.maximum(x @ w1, 0) @ w2  # two-matmul oracle
        out = diff_embedding(Tensor(x.reshape(1, 1, 2)), p, "m")
        assert np.allclose(out.data.reshape(2), expect, atol=1e-15)


def cea_oracle(fi, fj, e, w, symmetric=False):
    """Straight-line numpy evaluation of one change-enhanced attention layer."""
    W, H, d = fi.shape
    n = W * H
    fi2, fj2, e2 = fi.reshape(n, d), fj.reshape(n, d), e.reshape(n, d)
    ebias = (e2 @ w["wein"]).reshape(n)

    def sm(x):
        z = np.exp(x - x.max())
        return z / z.sum()

    s1 = np.einsum("nd,nd->n", fi2 @ w["wq1"], fj2 @ w["wk2"]) / math.sqrt(d)
    a1 = sm(s1 + ebias)
    q2, k1 = (fj2, fi2) if symmetric else (fi2, fj2)
    s2 = np.einsum("nd,nd->n", q2 @ w["wq2"], k1 @ w["wk1"]) / math.sqrt(d)
    a2 = sm(s2 + ebias)
    fi_out = fi + (a1[:, None] * (fj2 @ w["wv2"])).reshape(W, H, d)
    fj_out = fj + (a2[:, None] * (fi2 @ w["wv1"])).reshape(W, H, d)
    e_out = e + (((a1 + a2) / 2)[:, None] @ w["weout"]).reshape(W, H, d)
    return fi_out, fj_out, e_out, a1, a2


def cea_weights(seed, d, zero_values=False):
    rng = make_rng(seed, "w")
    names = ["wq1", "wq2", "wk1", "wk2", "wv1", "wv2"]
    w = {name: rng.normal(size=(d, d)) for name in names}
    if zero_values:
        w["wv1"] = np.zeros((d, d))
        w["wv2"] = np.zeros((d, d))
    w["wein"] = rng.normal(size=(d, 1))
    w["weout"] = rng.normal(size=(1, d))
    return w


def as_params(w, prefix="p", rg=False):
    return {f"{prefix}.{k}": Tensor(v, requires_grad=rg) for k, v in w.items()}


class TestCEALayer:
    def test_zero_value_projection_identity(self):
        rng = make_rng(6)
        d = 3
        fi = Tensor(rng.normal(size=(2, 2, d)))
        fj = Tensor(rng.normal(size=(2, 2, d)))
        e = Tensor(rng.normal(size=(2, 2, d)))
        params = as_params(cea_weights(0, d, zero_values=True))
        fi2, fj2, _ = cea_layer(fi, fj, e, params, "p")
        assert np.array_equal(fi2.data, fi.data)
        assert np.array_equal(fj2.data, fj.data)

    def test_attention_sums_to_one(self):
        rng = make_rng(7)
        d = 3
        fi = Tensor(rng.normal(size=(2, 3, d)))
        fj = Tensor(rng.normal(size=(2, 3, d)))
        e = Tensor(np.zeros((2, 3, d)))
        w = cea_weights(1, d, zero_values=True)
        params = as_params(w)
        # with zero values the update is zero; check the maps via the oracle
        _, _, _, a1, a2 = cea_oracle(fi.data, fj.data, e.data, w)
        assert abs(a1.sum() - 1.0) < 1e-12 and abs(a2.sum() - 1.0) < 1e-12
        assert (a1 >= 0).all() and (a2 >= 0).all()

    @pytest.mark.parametrize("symmetric", [False, True])
    def test_matches_straight_line_oracle(self, symmetric):
        rng = make_rng(8)
        d = 2
        fi = Tensor(rng.normal(size=(1, 2, d)))
        fj = Tensor(rng.normal(size=(1, 2, d)))
        e = Tensor(rng.normal(size=(1, 2, d)))
        w = cea_weights(2, d)
        out = cea_layer(fi, fj, e, as_params(w), "p", symmetric_queries=symmetric)
        oracle = cea_oracle(fi.data, fj.data, e.data, w, symmetric=symmetric)
        for got, want in zip(out, oracle):
            assert np.allclose(got.data, want, atol=1e-12)

    def test_e_residual_exact(self):
        rng = make_rng(9)
        d = 3
        fi = Tensor(rng.normal(size=(2, 2, d)))
        fj = Tensor(rng.normal(size=(2, 2, d)))
        e = Tensor(rng.normal(size=(2, 2, d)))
        w = cea_weights(3, d)
        _, _, e_out = cea_layer(fi, fj, e, as_params(w), "p")
        _, _, _, a1, a2 = cea_oracle(fi.data, fj.data, e.data, w)
        resid = (((a1 + a2) / 2)[:, None] @ w["weout"]).reshape(2, 2, d)
        assert np.allclose(e_out.data - e.data, resid, atol=1e-12)

    def test_grad_check(self):
        rng = make_rng(10)
        d = 3
        fi = Tensor(rng.normal(size=(2, 2, d)))
        fj = Tensor(rng.normal(size=(2, 2, d)))
        e = Tensor(rng.normal(size=(2, 2, d)))
        params = as_params(cea_weights(4, d), rg=True)
        names = sorted(params)
        wsum = Tensor(rng.normal(size=(2, 2, d)))

        def f(ps):
            p = dict(zip(names, ps))
            a, b, c = cea_layer(fi, fj, e, p, "p")
            return ((a + b + c) * wsum).sum()

        assert grad_check(f, [params[n] for n in names]) <= 1e-4


class TestVCPForward:
    def test_identical_pair_zero_diff(self):
        cfg = VCPConfig(d_f=6)
        params = {**init_encoder_params(1, cfg), **init_cea_params(1, cfg)}
        im = rand_images(11, k=1)[0]
        out = vcp_forward([im, im.copy()], params, cfg)
        for l in (2, 3, 4):
            assert (out.f_diff[(1, 2)][l].data == 0).all()

    def test_outputs_finite(self):
        cfg = VCPConfig(d_f=6)
        params = {**init_encoder_params(2, cfg), **init_cea_params(2, cfg)}
        out = vcp_forward(rand_images(12, k=3), params, cfg)
        for p in range(1, 4):
            for l in range(1, 5):
                assert np.isfinite(out.enhanced.stage(p, l).data).all()

    def test_k1_rejected(self):
        cfg = VCPConfig(d_f=6)
        params = {**init_encoder_params(1, cfg), **init_cea_params(1, cfg)}
        with pytest.raises(InputError):
            vcp_forward(rand_images(1, k=1), params, cfg)

    def test_no_cea_keeps_raw(self):
        cfg = VCPConfig(d_f=6, use_cea=False)
        params = init_encoder_params(3, cfg)
        out = vcp_forward(rand_images(13), params, cfg)
        assert out.enhanced is out.raw
        assert out.f_diff[(1, 2)][2].shape == out.raw.stage(1, 2).shape

    def test_grad_check_cea_weights(self):
        cfg = VCPConfig(d_f=3)
        params = {**init_encoder_params(4, cfg), **init_cea_params(4, cfg)}
        ims = rand_images(14, size=16)
        # a representative slice of the CEA parameter set, to keep runtime down
        names = ["cea.s4.l1.wq1", "cea.s4.l1.wv2", "cea.s4.l2.wein",
                 "cea.s4.l2.weout", "cea.s4.mlp.w1", "cea.s3.l1.wk2"]
        rng = make_rng(15)
        probes = None

        def f(ps):
            nonlocal probes
            p = {**params, **dict(zip(names, ps))}
            out = vcp_forward(ims, p, cfg)
            total = None
            for l in (2, 3, 4):
                x = out.enhanced.stage(1, l) + out.enhanced.stage(2, l)
                if probes is None:
                    probes = {}
                if l not in probes:
                    probes[l] = rng.normal(size=x.shape)
                term = (x * Tensor(probes[l])).sum()
                total = term if total is None else total + term
            return total

        leaves = [params[n].copy(requires_grad=True) for n in names]
        assert grad_check(f, leaves) <= 1e-4
