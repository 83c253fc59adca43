import numpy as np
import pytest
import torch

from recapdet.channelsim import SynthSpec, generate_corpus
from recapdet.corpus import Manifest, PatchStore, SplitSpec, split_corpus
from recapdet.embedder import EmbedderConfig
from recapdet.losses import LossConfig
from recapdet.model import ForensicModel
from recapdet.simnet import SimNetConfig
from recapdet.trainer import TrainConfig, TrainingError, evaluate_triplet_loss, finetune, train
from recapdet.triplets import MiningConfig, Triplet, build_candidate_triplets
from tests.conftest import make_patch


def small_model(seed=1):
    return ForensicModel.create(
        EmbedderConfig(embed_dim=32, hidden_dim=64, init_seed=seed),
        SimNetConfig(hidden_dim=64, init_seed=seed + 1),
    )


def quick_config(epochs=3, seed=0, **overrides):
    defaults = dict(
        epochs=epochs,
        learning_rate=2e-3,
        batch_size=32,
        weight_decay=1e-4,
        grad_clip_norm=1.0,
        loss=LossConfig(),
        mining=MiningConfig(max_per_anchor=8),
        seed=seed,
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("trainer_corpus")
    spec = SynthSpec(n_templates=4, n_genuine_per_template=3, n_recaptured_per_template=8, master_seed=17)
    manifest = generate_corpus(spec, root)
    store = PatchStore.from_manifest(manifest, stride=224)
    train_split, val_split, test_split = split_corpus(manifest, SplitSpec(seed=5))
    return manifest, store, train_split, val_split


class TestTrainLoop:
    def test_history_length_matches_epochs(self, corpus):
        manifest, store, train_split, val_split = corpus
        model, history = train(small_model(), train_split, val_split, store, quick_config(epochs=2))
        assert len(history) == 2
        for record in history.records:
            assert np.isfinite([record.l_ts, record.l_ns, record.l_fl]).all()
            assert record.l_fl == pytest.approx(record.l_ts + 0.3 * record.l_ns, abs=1e-9)

    def test_deterministic_given_seed(self, corpus):
        manifest, store, train_split, val_split = corpus
        _, h1 = train(small_model(), train_split, val_split, store, quick_config(epochs=2, seed=3))
        _, h2 = train(small_model(), train_split, val_split, store, quick_config(epochs=2, seed=3))
        assert abs(h1.records[-1].l_fl - h2.records[-1].l_fl) < 1e-6

    def test_logged_loss_matches_recomputation(self, corpus):
        manifest, store, train_split, _ = corpus
        # validation split without recaptured rows yields no triplets, so the
        # returned model is exactly the final-epoch state
        genuine_only = Manifest(rows=[r for r in train_split.rows if r.label == "genuine"], root=manifest.root)
        config = quick_config(epochs=2)
        model, history = train(small_model(), train_split, genuine_only, store, config)
        candidates = build_candidate_triplets(train_split, store)
        recomputed = evaluate_triplet_loss(model, candidates, config.loss)
        assert recomputed.l_fl == pytest.approx(history.records[-1].l_fl, abs=1e-5)

    def test_loss_decreases_on_separable_data(self, corpus):
        # multi-seed oracle: ~190 candidate triplets, 10 epochs each
        manifest, store, train_split, val_split = corpus
        wins = 0
        for seed in range(10):
            model, history = train(
                small_model(seed=seed), train_split, val_split, store, quick_config(epochs=10, seed=seed)
            )
            wins += history.records[-1].l_fl < history.records[0].l_fl
        assert wins >= 9

    def test_frozen_backbone_is_bit_identical_after_training(self, corpus):
        manifest, store, train_split, val_split = corpus
        model = ForensicModel.create(
            EmbedderConfig(embed_dim=32, hidden_dim=64, init_seed=2, freeze_backbone=True),
            SimNetConfig(hidden_dim=64, init_seed=3),
        )
        before = {k: v.clone() for k, v in model.embedder.backbone.state_dict().items()}
        model, _ = train(model, train_split, val_split, store, quick_config(epochs=1))
        for k, v in model.embedder.backbone.state_dict().items():
            assert torch.equal(v, before[k])

    def test_poisoned_weights_abort_with_diagnostics(self, corpus):
        manifest, store, train_split, val_split = corpus
        model = small_model()
        with torch.no_grad():
            model.embedder.head[-1].weight.fill_(float("nan"))
        with pytest.raises(TrainingError, match="epoch 0"):
            train(model, train_split, val_split, store, quick_config(epochs=1))


class TestFinetune:
    def test_zero_learning_rate_is_identity(self, corpus):
        manifest, store, train_split, val_split = corpus
        model = small_model()
        support = build_candidate_triplets(train_split, store)[:6]
        tuned = finetune(model, support, quick_config(epochs=2, learning_rate=0.0))
        patches = store.all_patches()[:4]
        before = np.stack([e.values for e in model.embed_patches(patches)])
        after = np.stack([e.values for e in tuned.embed_patches(patches)])
        np.testing.assert_array_equal(before, after)

    def test_original_model_untouched(self, corpus):
        manifest, store, train_split, val_split = corpus
        model = small_model()
        snapshot = {k: v.clone() for k, v in model.embedder.state_dict().items()}
        support = build_candidate_triplets(train_split, store)[:6]
        finetune(model, support, quick_config(epochs=1, learning_rate=1e-3))
        for k, v in model.embedder.state_dict().items():
            assert torch.equal(v, snapshot[k])

    def test_empty_support_rejected(self):
        with pytest.raises(ValueError, match="empty support"):
            finetune(small_model(), [], quick_config())

    def test_device_balanced_support_accepted(self):
        # 2 scanner-group and 4 phone-group triplets, as in the target-domain
        # adaptation recipe
        support = []
        for i in range(6):
            group = "high" if i < 2 else "low"
            device = "scanner" if i < 2 else "phone"
            kwargs = dict(template_id="U00", resolution_group=group, device_class=device)
            support.append(
                Triplet(
                    make_patch(source_id=f"ref{i}", **kwargs),
                    make_patch(source_id=f"pos{i}", **kwargs),
                    make_patch(source_id=f"neg{i}", label="recaptured", channel="print_scan", **kwargs),
                )
            )
        tuned = finetune(small_model(), support, quick_config(epochs=1, learning_rate=1e-4))
        assert tuned is not None

    def test_finetune_moves_weights(self, corpus):
        manifest, store, train_split, val_split = corpus
        model = small_model()
        support = build_candidate_triplets(train_split, store)[:6]
        tuned = finetune(model, support, quick_config(epochs=2, learning_rate=1e-3))
        changed = any(
            not torch.equal(a, b)
            for a, b in zip(model.embedder.parameters(), tuned.embedder.parameters())
        )
        assert changed


class TestConfigValidation:
    def test_epoch_minimum(self):
        with pytest.raises(ValueError):
            TrainConfig(epochs=0)

    def test_optimizer_name(self):
        with pytest.raises(ValueError):
            TrainConfig(optimizer="sgd")

    def test_negative_weight_decay(self):
        with pytest.raises(ValueError):
            TrainConfig(weight_decay=-1.0)
