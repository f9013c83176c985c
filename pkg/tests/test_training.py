import numpy as np
import pytest

from airobject import diff_core as dc
from airobject.feature_store import SynthConfig, generate_synthetic, split_track
from airobject.graph_encoder import ModelConfig, encode_frame
from airobject.temporal_encoder import (
    sequence_average_pool,
    stack_sequence,
    temporal_conv,
)
from airobject.topo_graph import frame_graphs_for_track
from airobject.training import (
    DatasetTooSmallError,
    PairBatch,
    SingleIdentityBatchError,
    TrainConfig,
    composite_gradcheck,
    dense_feature_loss,
    matching_loss,
    sample_pairs,
    sparse_location_loss,
    train_stage1,
    train_stage2,
)

MODEL = ModelConfig(descriptor_dim=8, position_embed_dim=2, object_dim=16)


def zero_noise_tracks(num_objects=10, frames=4, seed=123):
    return generate_synthetic(
        SynthConfig(
            num_objects=num_objects,
            videos=2,
            frames_per_track=frames,
            keypoints_per_object=(5, 9),
            position_jitter_sigma=0.0,
            descriptor_noise_sigma=0.0,
            dropout_rate=0.0,
            spurious_rate=0.0,
            descriptor_dim=8,
            seed=seed,
        )
    )


def unit(v):
    return v / np.linalg.norm(v)


class TestSparseLocationLoss:
    def test_one_hot_row_is_one(self):
        row = np.zeros((1, 16))
        row[0, 5] = 3.7  # scale cancels under normalization
        assert abs(sparse_location_loss(dc.Tensor(row)).item() - 1.0) < 1e-12

    def test_uniform_row_hits_sqrt_d(self):
        row = np.full((1, 4), 0.25)
        assert abs(sparse_location_loss(dc.Tensor(row)).item() - 2.0) < 1e-12

    def test_random_rows_within_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            rows = np.abs(rng.normal(size=(int(rng.integers(1, 6)), 16))) + 1e-6
            val = sparse_location_loss(dc.Tensor(rows)).item()
            assert 1.0 - 1e-9 <= val <= 4.0 + 1e-9

    def test_zero_row_raises(self):
        rows = np.ones((2, 8))
        rows[1] = 0.0
        with pytest.raises(dc.ZeroVectorError):
            sparse_location_loss(dc.Tensor(rows))


class TestDenseFeatureLoss:
    def test_one_hot_sum(self):
        rows = np.zeros((3, 16))
        rows[:, 2] = 1.0  # summed vector is one-hot, phi-l1 = 1
        assert abs(dense_feature_loss(dc.Tensor(rows), 10.0).item() - 9.0) < 1e-12

    def test_uniform_sum_in_2048_saturates(self):
        rows = np.full((2, 2048), 0.01)
        assert dense_feature_loss(dc.Tensor(rows), 10.0).item() == 0.0

    def test_zero_delta_floor(self):
        rows = np.abs(np.random.default_rng(1).normal(size=(4, 16)))
        assert dense_feature_loss(dc.Tensor(rows), 0.0).item() == 0.0

    def test_bounded_by_delta(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            rows = np.abs(rng.normal(size=(3, 16))) + 1e-9
            val = dense_feature_loss(dc.Tensor(rows), 5.0).item()
            assert 0.0 <= val <= 5.0


class TestMatchingLoss:
    def test_identical_positive_pair_is_zero(self):
        v = dc.Tensor(unit(np.random.default_rng(3).normal(size=16)))
        loss = matching_loss(PairBatch(positives=[(v, v)], negatives=[]), 0.2)
        assert abs(loss.item()) < 1e-12

    def test_hinge_boundary_contributes_exactly_zero(self):
        a = np.zeros(8); a[0] = 1.0
        b = np.zeros(8); b[0] = 0.2; b[1] = np.sqrt(1.0 - 0.04)
        loss = matching_loss(
            PairBatch(positives=[], negatives=[(dc.Tensor(a), dc.Tensor(b))]), 0.2
        )
        assert loss.item() == 0.0

    def test_half_cosine_negative(self):
        a = np.zeros(8); a[0] = 1.0
        b = np.zeros(8); b[0] = 0.5; b[1] = np.sqrt(0.75)
        loss = matching_loss(
            PairBatch(positives=[], negatives=[(dc.Tensor(a), dc.Tensor(b))]), 0.2
        )
        assert abs(loss.item() - 0.3) < 1e-12

    def test_rejects_unnormalized_descriptors(self):
        v = dc.Tensor(np.ones(4))
        with pytest.raises(ValueError, match="unit-norm"):
            matching_loss(PairBatch(positives=[(v, v)], negatives=[]), 0.2)

    def test_loss_nonnegative_randomized(self):
        rng = np.random.default_rng(4)
        for _ in range(100):
            entries = [
                (f"id{i % 3}", dc.Tensor(unit(rng.normal(size=8)))) for i in range(6)
            ]
            batch = sample_pairs(entries)
            assert matching_loss(batch, 0.2).item() >= 0.0


class TestSamplePairs:
    def _entries(self, ids):
        rng = np.random.default_rng(5)
        return [(i, dc.Tensor(unit(rng.normal(size=8)))) for i in ids]

    def test_two_identities_two_each(self):
        batch = sample_pairs(self._entries(["a", "a", "b", "b"]))
        assert len(batch.positives) == 2
        assert len(batch.negatives) == 4

    def test_single_identity_raises(self):
        with pytest.raises(SingleIdentityBatchError):
            sample_pairs(self._entries(["a", "a"]))

    @pytest.mark.parametrize("b", [2, 3, 5, 8])
    def test_enumeration_oracle(self, b):
        ids = [f"id{i}" for i in range(b) for _ in range(2)]
        entries = self._entries(ids)
        batch = sample_pairs(entries)
        # brute-force enumeration over all unordered index pairs
        pos = neg = 0
        for i in range(len(ids)):
            for j in range(i + 1, len(ids)):
                if ids[i] == ids[j]:
                    pos += 1
                else:
                    neg += 1
        assert len(batch.positives) == pos == b
        assert len(batch.negatives) == neg == 2 * b * (b - 1)


class TestStage1:
    def test_zero_lr_leaves_params_and_flat_history(self):
        tracks = zero_noise_tracks()
        cfg = TrainConfig(batch_size=10, lr=0.0, epochs=3, seed=1)
        from airobject.graph_encoder import init_encoder_params

        encoder = init_encoder_params(MODEL, np.random.default_rng(1))
        before = [p.data.copy() for p in encoder.parameters()]
        _, history = train_stage1(tracks, cfg, MODEL, encoder=encoder)
        for p, b in zip(encoder.parameters(), before):
            assert np.array_equal(p.data, b)
        totals = [h["total"] for h in history]
        assert max(totals) - min(totals) < 1e-9

    def test_descends_on_zero_noise_set(self):
        tracks = zero_noise_tracks()
        cfg = TrainConfig(batch_size=10, lr=1e-3, epochs=50, seed=0)
        _, history = train_stage1(tracks, cfg, MODEL)
        assert history[-1]["total"] < history[0]["total"]

    def test_deterministic_history(self):
        tracks = zero_noise_tracks()
        cfg = TrainConfig(batch_size=5, lr=1e-3, epochs=3, seed=7)
        _, h1 = train_stage1(tracks, cfg, MODEL)
        _, h2 = train_stage1(tracks, cfg, MODEL)
        assert h1 == h2

    def test_single_identity_dataset_rejected(self):
        tracks = zero_noise_tracks(num_objects=1)
        with pytest.raises(DatasetTooSmallError):
            train_stage1(tracks, TrainConfig(batch_size=2, epochs=1), MODEL)


class TestStage2:
    def _trained_encoder(self, tracks):
        cfg = TrainConfig(batch_size=10, lr=1e-3, epochs=2, seed=0)
        encoder, _ = train_stage1(tracks, cfg, MODEL)
        return encoder

    def test_encoder_frozen_bitwise(self):
        tracks = zero_noise_tracks()
        encoder = self._trained_encoder(tracks)
        before = [p.data.tobytes() for p in encoder.parameters()]
        cfg = TrainConfig(batch_size=10, lr=1e-3, epochs=3, seed=2)
        train_stage2(tracks, encoder, cfg)
        after = [p.data.tobytes() for p in encoder.parameters()]
        assert before == after
        assert all(p.requires_grad for p in encoder.parameters())  # flags restored

    def test_matching_separation_improves(self):
        # Structural features are non-negative, so at init every descriptor
        # pair (positive or negative) sits near cosine 1. The margin loss
        # spreads that cone: the pos-neg cosine gap widens and L_m descends.
        tracks = zero_noise_tracks()
        encoder = self._trained_encoder(tracks)
        cfg = TrainConfig(batch_size=10, lr=1e-3, epochs=25, seed=3)
        _, history = train_stage2(tracks, encoder, cfg)
        assert history[-1]["L_m"] < history[0]["L_m"]
        gap_first = history[0]["pos_cos"] - history[0]["neg_cos"]
        gap_last = history[-1]["pos_cos"] - history[-1]["neg_cos"]
        assert gap_last > gap_first

    def test_s_l_max_one_still_trains(self):
        tracks = zero_noise_tracks()
        encoder = self._trained_encoder(tracks)
        cfg = TrainConfig(batch_size=10, lr=1e-3, epochs=2, seed=4, s_l_max=1)
        _, history = train_stage2(tracks, encoder, cfg)
        assert len(history) == 2

    def test_short_tracks_rejected(self):
        tracks = zero_noise_tracks(frames=1)
        encoder_tracks = zero_noise_tracks()
        encoder = self._trained_encoder(encoder_tracks)
        with pytest.raises(DatasetTooSmallError):
            train_stage2(tracks, encoder, TrainConfig(batch_size=2, epochs=1))


class TestTrainConfig:
    def test_batch_size_floor(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=1)

    def test_lambda_range(self):
        with pytest.raises(ValueError):
            TrainConfig(lambda_margin=0.0)
        with pytest.raises(ValueError):
            TrainConfig(lambda_margin=1.0)

    def test_defaults_match_published_settings(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 16
        assert cfg.lr == 1e-4
        assert cfg.s_l_max == 4
        assert cfg.lambda_margin == 0.2


class TestCompositeGradcheck:
    def test_full_pipeline_gradient(self):
        assert composite_gradcheck() < 1e-4

    def test_negative_control(self):
        with dc.corrupt_adjoints(1.5):
            assert composite_gradcheck() > 1e-2
