import numpy as np
import pytest
import torch

from recapdet.simnet import SimilarityNet, SimNetConfig, pair_features


class TestPairFeatures:
    def test_definition(self):
        np.testing.assert_array_equal(pair_features([1, 2], [3, 4]), [1, 2, 3, 4, 3, 8])

    def test_zero_vectors(self):
        np.testing.assert_array_equal(pair_features([0, 0, 0], [0, 0, 0]), np.zeros(9))

    def test_basis_vectors(self):
        np.testing.assert_array_equal(pair_features([1, 0], [0, 1]), [1, 0, 0, 1, 0, 0])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            pair_features([1, 2], [1, 2, 3])

    def test_asymmetric_in_argument_order(self):
        a, b = np.array([1.0, 2.0]), np.array([3.0, 4.0])
        assert not np.array_equal(pair_features(a, b), pair_features(b, a))


class TestSimilarityNet:
    def test_scores_bounded(self):
        net = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=0))
        rng = np.random.default_rng(0)
        a = torch.tensor(rng.normal(0, 3, (50, 8)), dtype=torch.float32)
        b = torch.tensor(rng.normal(0, 3, (50, 8)), dtype=torch.float32)
        scores = net(a, b)
        assert torch.all(scores > 0) and torch.all(scores < 1)

    def test_zero_output_layer_scores_half(self):
        net = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=0))
        with torch.no_grad():
            net.out.weight.zero_()
            net.out.bias.zero_()
        rng = np.random.default_rng(1)
        from recapdet.simnet import similarity

        for _ in range(5):
            assert similarity(net, rng.normal(size=8), rng.normal(size=8)) == 0.5

    def test_single_pair_matches_batched_forward(self):
        from recapdet.simnet import similarity

        net = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=2))
        rng = np.random.default_rng(2)
        a = rng.normal(size=8).astype(np.float32)
        b = rng.normal(size=8).astype(np.float32)
        with torch.no_grad():
            batched = net(torch.tensor(a)[None, :], torch.tensor(b)[None, :])
        assert similarity(net, a, b) == pytest.approx(float(batched[0]), abs=1e-6)

    def test_not_symmetric(self):
        from recapdet.simnet import similarity

        net = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=3))
        rng = np.random.default_rng(3)
        a, b = rng.normal(size=8), rng.normal(size=8)
        assert similarity(net, a, b) != similarity(net, b, a)

    def test_batch_shape_validated(self):
        net = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=0))
        with pytest.raises(ValueError):
            net(torch.zeros(2, 8), torch.zeros(2, 4))

    def test_init_deterministic(self):
        a = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=9))
        b = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=9))
        for va, vb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(va, vb)

    def test_hidden_dim_validated(self):
        with pytest.raises(ValueError):
            SimNetConfig(hidden_dim=0)


class TestGradientOracle:
    def test_similarity_gradient_matches_finite_differences(self):
        # analytic (autograd) gradient of the score w.r.t. each entry of the
        # first embedding, against central differences on fixed random nets
        for seed in range(4):
            net = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=seed))
            rng = np.random.default_rng(seed)
            a = torch.tensor(rng.normal(0, 1, 8), dtype=torch.float64, requires_grad=True)
            b = torch.tensor(rng.normal(0, 1, 8), dtype=torch.float64)
            net = net.double()
            score = net(a[None, :], b[None, :])[0]
            (grad,) = torch.autograd.grad(score, a)
            step = 1e-4
            for i in range(8):
                up, down = a.detach().clone(), a.detach().clone()
                up[i] += step
                down[i] -= step
                with torch.no_grad():
                    fd = (net(up[None, :], b[None, :])[0] - net(down[None, :], b[None, :])[0]) / (2 * step)
                assert float(grad[i]) == pytest.approx(float(fd), rel=1e-4, abs=1e-9)

    def test_gradient_flows_to_parameters(self):
        net = SimilarityNet(8, SimNetConfig(hidden_dim=16, init_seed=1))
        a = torch.randn(4, 8, requires_grad=True)
        b = torch.randn(4, 8)
        net(a, b).sum().backward()
        assert a.grad is not None and a.grad.abs().sum() > 0
        assert net.hidden.weight.grad is not None
