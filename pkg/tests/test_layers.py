import numpy as np
import pytest
import torch

from heterocast.attention import decentralization_pool
from heterocast.layers import GatedTemporalConv, HeteroGraphConv, propagate

from conftest import finite_difference_max_rel_error


def fill(param, array):
    with torch.no_grad():
        param.copy_(torch.as_tensor(array, dtype=param.dtype))


def randomize(module, rng, scale=0.5):
    for p in module.parameters():
        fill(p, rng.normal(scale=scale, size=tuple(p.shape)))


def eq6_oracle(h, adj, theta, w1s, w2s, pooled):
    """Literal diffusion-convolution sum with explicit matrix powers.

    h: (B,F,N,L); adj: (F,N,N); theta: (K+1,O,F); w1s/w2s: per-step attention
    weights (None for no attention); pooled: (F,).
    """
    B, F, N, L = h.shape
    K1, O, _ = theta.shape
    out = np.zeros((B, O, N, L))
    for k in range(K1):
        if w1s is None:
            alpha = np.ones(F)
        else:
            hidden = np.maximum(0.0, w1s[k] @ pooled)
            logits = w2s[k] @ hidden
            e = np.exp(logits - logits.max())
            alpha = e / e.sum()
        for f in range(F):
            a_pow = np.linalg.matrix_power(adj[f], k)
            for b in range(B):
                prop = a_pow @ h[b, f]  # (N, L)
                for o in range(O):
                    out[b, o] += theta[k, o, f] * alpha[f] * prop
    return out


class TestGatedTemporalConv:
    def test_zero_kernels_zero_output(self):
        tcn = GatedTemporalConv(2, 2, kernel_size=2, dilation=1)
        for p in tcn.parameters():
            fill(p, np.zeros(tuple(p.shape)))
        out = tcn(torch.randn(3, 2, 4, 10))
        assert torch.equal(out, torch.zeros_like(out))

    def test_hand_convolution_constant_input(self):
        tcn = GatedTemporalConv(1, 1, kernel_size=2, dilation=1)
        fill(tcn.filter_conv.weight, np.array([[[[0.0, 1.0]]]]))  # current-step tap
        fill(tcn.gate_conv.weight, np.zeros((1, 1, 1, 2)))  # sigmoid(0) = 0.5
        c = 0.7
        out = tcn(torch.full((1, 1, 1, 6), c))
        expected = np.tanh(c) * 0.5
        np.testing.assert_allclose(out.detach().numpy().ravel(), [expected] * 5, rtol=1e-6)

    def test_output_length(self, rng):
        for ks, dil in [(2, 1), (2, 2), (3, 2)]:
            tcn = GatedTemporalConv(2, 3, kernel_size=ks, dilation=dil)
            out = tcn(torch.randn(1, 2, 4, 12))
            assert out.shape[-1] == 12 - (ks - 1) * dil

    def test_too_short_input(self):
        tcn = GatedTemporalConv(1, 1, kernel_size=2, dilation=4)
        with pytest.raises(ValueError):
            tcn(torch.randn(1, 1, 2, 4))

    def test_last_step_perturbation_hits_only_last_output(self, rng):
        tcn = GatedTemporalConv(2, 2, kernel_size=2, dilation=2).double()
        randomize(tcn, rng)
        x = torch.as_tensor(rng.normal(size=(1, 2, 3, 10)))
        xp = x.clone()
        xp[..., -1] += 0.5
        base, pert = tcn(x), tcn(xp)
        diff = (base - pert).abs().amax(dim=(0, 1, 2))
        assert (diff[:-1] == 0).all()
        assert diff[-1] > 0

    @pytest.mark.parametrize("trial", range(4))
    def test_causality_random_positions(self, trial):
        rng = np.random.default_rng(100 + trial)
        ks, dil = 2, int(rng.integers(1, 4))
        tcn = GatedTemporalConv(2, 2, kernel_size=ks, dilation=dil).double()
        randomize(tcn, rng)
        L = 16
        x = torch.as_tensor(rng.normal(size=(1, 2, 3, L)))
        for p in rng.integers(0, L, size=25):
            xp = x.clone()
            xp[..., int(p)] += 1.0
            with torch.no_grad():
                diff = (tcn(x) - tcn(xp)).abs().amax(dim=(0, 1, 2)).numpy()
            changed = np.nonzero(diff)[0]
            window = (ks - 1) * dil
            allowed = set(range(max(0, p - window), min(p, L - window - 1) + 1))
            assert set(changed) <= allowed
            assert len(changed) > 0

    def test_gradients_match_finite_differences(self, rng):
        tcn = GatedTemporalConv(2, 2, kernel_size=2, dilation=2).double()
        randomize(tcn, rng)
        x = torch.as_tensor(rng.normal(size=(2, 2, 3, 9)))
        with torch.no_grad():
            target = tcn(x) + torch.as_tensor(
                rng.choice([-1.0, 1.0], size=(2, 2, 3, 7)) * rng.uniform(0.5, 1.5, (2, 2, 3, 7))
            )
        worst, _ = finite_difference_max_rel_error(
            tcn, lambda: (tcn(x) - target).abs().mean()
        )
        assert worst <= 1e-4


class TestPropagate:
    def test_matrix_power_associativity(self, rng):
        adj = torch.as_tensor(rng.random((3, 5, 5)))
        h = torch.as_tensor(rng.normal(size=(2, 3, 5, 4)))
        stepped = h
        for _ in range(3):
            stepped = propagate(adj, stepped)
        powered = torch.einsum(
            "fnj,bfjl->bfnl",
            torch.as_tensor(np.stack([np.linalg.matrix_power(adj[f].numpy(), 3)
                                      for f in range(3)])),
            h,
        )
        assert torch.allclose(stepped, powered, atol=1e-9)

    def test_batched_adjacency_matches_per_sample(self, rng):
        adj = torch.as_tensor(rng.random((4, 3, 5, 5)))
        h = torch.as_tensor(rng.normal(size=(4, 3, 5, 2)))
        batched = propagate(adj, h)
        for b in range(4):
            single = propagate(adj[b], h[b : b + 1])
            assert torch.allclose(batched[b : b + 1], single, atol=1e-12)


class TestHeteroGraphConv:
    def test_single_node_hand_case(self):
        conv = HeteroGraphConv(1, 1, max_diffusion_step=1, attention_reduction=1)
        fill(conv.theta, np.ones((2, 1, 1)))
        adj = torch.tensor([[[2.0]]])
        pooled = decentralization_pool(adj)
        h = torch.randn(1, 1, 1, 3)
        out = conv(h, adj, pooled)
        assert torch.allclose(out, 3 * h, atol=1e-6)  # h + 2h

    def test_k0_identity_mix_uniform_attention(self, rng):
        F = 4
        conv = HeteroGraphConv(F, F, max_diffusion_step=0, attention_reduction=2)
        fill(conv.theta, np.eye(F)[None])
        for att in conv.attentions:
            fill(att.w1, np.zeros(tuple(att.w1.shape)))  # uniform softmax = 1/F
        adj = torch.as_tensor(rng.random((F, 3, 3))).float()
        h = torch.randn(2, F, 3, 5)
        out = conv(h, adj, decentralization_pool(adj))
        assert torch.allclose(out, h / F, atol=1e-6)

    def test_matches_explicit_power_oracle(self, rng):
        B, F, N, K = 1, 2, 3, 2
        conv = HeteroGraphConv(F, F, max_diffusion_step=K, attention_reduction=1).double()
        randomize(conv, rng)
        adj_np = rng.random((F, N, N))
        adj = torch.as_tensor(adj_np)
        pooled = decentralization_pool(adj)
        h = torch.as_tensor(rng.normal(size=(B, F, N, 6)))
        got = conv(h, adj, pooled).detach().numpy()
        expected = eq6_oracle(
            h.numpy(), adj_np,
            conv.theta.detach().numpy(),
            [att.w1.detach().numpy() for att in conv.attentions],
            [att.w2.detach().numpy() for att in conv.attentions],
            pooled.numpy(),
        )
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_oracle_without_attention(self, rng):
        conv = HeteroGraphConv(2, 3, max_diffusion_step=2, attention_reduction=1,
                               use_attention=False).double()
        randomize(conv, rng)
        adj_np = rng.random((2, 4, 4))
        adj = torch.as_tensor(adj_np)
        h = torch.as_tensor(rng.normal(size=(2, 2, 4, 3)))
        got = conv(h, adj, decentralization_pool(adj)).detach().numpy()
        expected = eq6_oracle(h.numpy(), adj_np, conv.theta.detach().numpy(),
                              None, None, None)
        np.testing.assert_allclose(got, expected, atol=1e-10)

    def test_linearity_in_hidden_state(self, rng):
        conv = HeteroGraphConv(3, 3, max_diffusion_step=2, attention_reduction=3).double()
        randomize(conv, rng)
        adj = torch.as_tensor(rng.random((3, 4, 4)))
        pooled = decentralization_pool(adj)
        h1 = torch.as_tensor(rng.normal(size=(2, 3, 4, 5)))
        h2 = torch.as_tensor(rng.normal(size=(2, 3, 4, 5)))
        combined = conv(2.5 * h1 - 0.5 * h2, adj, pooled)
        parts = 2.5 * conv(h1, adj, pooled) - 0.5 * conv(h2, adj, pooled)
        assert torch.allclose(combined, parts, atol=1e-9)

    def test_channel_mismatch(self, rng):
        conv = HeteroGraphConv(3, 3, max_diffusion_step=1, attention_reduction=3)
        adj = torch.rand(2, 4, 4)
        with pytest.raises(ValueError):
            conv(torch.randn(1, 3, 4, 5), adj, decentralization_pool(adj))

    def test_negative_k_rejected(self):
        with pytest.raises(ValueError):
            HeteroGraphConv(2, 2, max_diffusion_step=-1, attention_reduction=1)

    def test_per_sample_adjacency(self, rng):
        conv = HeteroGraphConv(2, 2, max_diffusion_step=1, attention_reduction=2).double()
        randomize(conv, rng)
        adj = torch.as_tensor(rng.random((3, 2, 4, 4)))
        pooled = decentralization_pool(adj)  # (3, 2)
        h = torch.as_tensor(rng.normal(size=(3, 2, 4, 5)))
        batched = conv(h, adj, pooled)
        for b in range(3):
            single = conv(h[b : b + 1], adj[b], pooled[b])
            assert torch.allclose(batched[b : b + 1], single, atol=1e-11)

    def test_gradients_match_finite_differences(self, rng):
        conv = HeteroGraphConv(2, 2, max_diffusion_step=2, attention_reduction=2).double()
        randomize(conv, rng)
        adj = torch.as_tensor(rng.random((2, 3, 3)) + 0.1)
        pooled = decentralization_pool(adj)
        h = torch.as_tensor(rng.normal(size=(2, 2, 3, 4)))
        with torch.no_grad():
            target = conv(h, adj, pooled) + torch.as_tensor(
                rng.choice([-1.0, 1.0], size=(2, 2, 3, 4)) * rng.uniform(0.5, 1.5, (2, 2, 3, 4))
            )
        worst, _ = finite_difference_max_rel_error(
            conv, lambda: (conv(h, adj, pooled) - target).abs().mean()
        )
        assert worst <= 1e-4
