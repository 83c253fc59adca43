import numpy as np
import pytest
import torch

from recapdet.embedder import EmbedderConfig, embed, init_embedder, patches_to_tensor
from tests.conftest import make_patch

SMALL = EmbedderConfig(embed_dim=16, hidden_dim=32, init_seed=3)


def random_patch(rng, source_id="p"):
    pixels = rng.integers(0, 256, (224, 224, 3), dtype=np.uint8)
    return make_patch(source_id=source_id, pixels=pixels)


class TestInit:
    def test_same_seed_same_weights(self):
        a = init_embedder(SMALL)
        b = init_embedder(SMALL)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb
            assert torch.equal(va, vb)

    def test_different_seed_different_weights(self):
        a = init_embedder(SMALL)
        b = init_embedder(EmbedderConfig(embed_dim=16, hidden_dim=32, init_seed=4))
        assert any(not torch.equal(va, vb) for va, vb in zip(a.state_dict().values(), b.state_dict().values()))

    def test_global_rng_does_not_leak_in(self):
        torch.manual_seed(111)
        a = init_embedder(SMALL)
        torch.manual_seed(999)
        b = init_embedder(SMALL)
        for va, vb in zip(a.state_dict().values(), b.state_dict().values()):
            assert torch.equal(va, vb)

    def test_default_embed_dim_is_256(self):
        model = init_embedder(EmbedderConfig(init_seed=1))
        rng = np.random.default_rng(0)
        out = embed(model, [random_patch(rng)])
        assert out[0].values.shape == (256,)

    def test_unknown_backbone_rejected(self):
        with pytest.raises(ValueError, match="unknown backbone"):
            EmbedderConfig(backbone="resnet9000")

    def test_embed_dim_minimum(self):
        with pytest.raises(ValueError):
            EmbedderConfig(embed_dim=4)

    def test_resnet_like_backbone_builds_and_runs(self):
        model = init_embedder(EmbedderConfig(backbone="resnet_like_50", embed_dim=16, hidden_dim=32, init_seed=0))
        rng = np.random.default_rng(1)
        out = embed(model, [random_patch(rng)])
        assert out[0].values.shape == (16,)


class TestEmbed:
    def test_order_preserved_and_sources_tagged(self):
        rng = np.random.default_rng(2)
        patches = [random_patch(rng, source_id=f"img-{i}") for i in range(5)]
        out = embed(init_embedder(SMALL), patches)
        assert [e.source for e in out] == [p.key for p in patches]
        for e in out:
            assert np.all(np.isfinite(e.values))

    def test_identical_patches_identical_embeddings(self):
        rng = np.random.default_rng(3)
        patch = random_patch(rng)
        twin = make_patch(source_id="twin", pixels=patch.pixels)
        out = embed(init_embedder(SMALL), [patch, twin])
        np.testing.assert_array_equal(out[0].values, out[1].values)

    def test_batch_size_independent(self):
        rng = np.random.default_rng(4)
        patches = [random_patch(rng, source_id=f"i{i}") for i in range(7)]
        model = init_embedder(SMALL)
        alone = embed(model, [patches[3]])[0].values
        grouped = embed(model, patches, batch_size=7)[3].values
        np.testing.assert_allclose(grouped, alone, rtol=1e-5, atol=1e-6)

    def test_empty_batch_rejected(self):
        with pytest.raises(ValueError):
            embed(init_embedder(SMALL), [])

    def test_tensor_scaling(self):
        patch = make_patch(fill=255)
        tensor = patches_to_tensor([patch])
        assert tensor.shape == (1, 3, 224, 224)
        assert float(tensor.max()) == 1.0


class TestFreezing:
    def test_frozen_backbone_untouched_by_optimizer(self):
        config = EmbedderConfig(embed_dim=16, hidden_dim=32, init_seed=5, freeze_backbone=True)
        model = init_embedder(config)
        before_backbone = {k: v.clone() for k, v in model.backbone.state_dict().items()}
        before_head = {k: v.clone() for k, v in model.head.state_dict().items()}
        trainable = [p for p in model.parameters() if p.requires_grad]
        assert all(not p.requires_grad for p in model.backbone.parameters())
        optimizer = torch.optim.Adam(trainable, lr=1e-2)
        rng = np.random.default_rng(6)
        loss = model(patches_to_tensor([random_patch(rng)])).square().sum()
        loss.backward()
        optimizer.step()
        for k, v in model.backbone.state_dict().items():
            assert torch.equal(v, before_backbone[k])
        assert any(not torch.equal(v, before_head[k]) for k, v in model.head.state_dict().items())
