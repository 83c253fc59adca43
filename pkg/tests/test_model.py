import numpy as np
import pytest

from recapdet.embedder import EmbedderConfig
from recapdet.model import CheckpointError, ForensicModel, PatchScorer, load_checkpoint, save_checkpoint
from recapdet.simnet import SimNetConfig
from tests.conftest import make_patch

SMALL_EMB = EmbedderConfig(embed_dim=16, hidden_dim=32, init_seed=1)
SMALL_SIM = SimNetConfig(hidden_dim=16, init_seed=2)


def small_model():
    return ForensicModel.create(SMALL_EMB, SMALL_SIM)


def random_patches(n, seed=0):
    rng = np.random.default_rng(seed)
    return [
        make_patch(source_id=f"img-{i}", pixels=rng.integers(0, 256, (224, 224, 3), dtype=np.uint8))
        for i in range(n)
    ]


class TestCheckpoint:
    def test_roundtrip_preserves_embeddings_and_scores(self, tmp_path):
        model = small_model()
        patches = random_patches(4)
        before = np.stack([e.values for e in model.embed_patches(patches)])
        scorer = PatchScorer(model)
        score_before = scorer(patches[0], patches[1])

        save_checkpoint(model, tmp_path / "ckpt")
        loaded = load_checkpoint(tmp_path / "ckpt")
        after = np.stack([e.values for e in loaded.embed_patches(patches)])
        np.testing.assert_allclose(after, before, atol=1e-6)
        assert PatchScorer(loaded)(patches[0], patches[1]) == pytest.approx(score_before, abs=1e-6)

    def test_missing_checkpoint(self, tmp_path):
        with pytest.raises(CheckpointError, match="missing"):
            load_checkpoint(tmp_path / "absent")

    def test_config_mismatch_detected(self, tmp_path):
        save_checkpoint(small_model(), tmp_path / "ckpt")
        other = EmbedderConfig(embed_dim=32, hidden_dim=32, init_seed=1)
        with pytest.raises(CheckpointError, match="config mismatch"):
            load_checkpoint(tmp_path / "ckpt", expected_embedder=other)

    def test_corrupt_weights_detected(self, tmp_path):
        import json
        import torch

        path = save_checkpoint(small_model(), tmp_path / "ckpt")
        meta = json.loads((path / "meta.json").read_text())
        meta["embedder"]["embed_dim"] = 64  # weights no longer match the config
        (path / "meta.json").write_text(json.dumps(meta))
        with pytest.raises(CheckpointError, match="do not match"):
            load_checkpoint(path)

    def test_clone_is_independent(self):
        import torch

        model = small_model()
        clone = model.clone()
        with torch.no_grad():
            for p in model.embedder.parameters():
                p.add_(1.0)
        for a, b in zip(model.embedder.parameters(), clone.embedder.parameters()):
            assert not torch.equal(a, b)


class TestPatchScorer:
    def test_cache_consistent_with_direct_scoring(self):
        model = small_model()
        patches = random_patches(3, seed=5)
        scorer = PatchScorer(model)
        pairwise = scorer.score_pairs([(patches[0], patches[1]), (patches[0], patches[2])])
        single = scorer(patches[0], patches[1])
        assert single == pytest.approx(pairwise[0], abs=1e-7)

    def test_scores_within_unit_interval(self):
        model = small_model()
        patches = random_patches(4, seed=6)
        scorer = PatchScorer(model)
        scores = scorer.score_pairs([(a, b) for a in patches for b in patches])
        assert np.all(scores > 0) and np.all(scores < 1)
