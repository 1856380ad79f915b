import math

import numpy as np
import pytest

import seaformer.distill as D
import seaformer.nn as nn
from oracles import cosine_mean_oracle, cross_entropy_oracle, kl_oracle
from seaformer.backbone import build_variant
from seaformer.tensor import ConfigurationError, DimensionError, Tensor


def rand(rng, shape):
    return Tensor._wrap(rng.standard_normal(shape))


class TestFeatureSimilarity:
    def test_identical_features_give_minus_one(self):
        rng = np.random.default_rng(0)
        f = rand(rng, (4, 3, 3))
        assert abs(D.feature_similarity_loss(f, f).item() + 1.0) < 1e-9

    def test_antiparallel_gives_plus_one(self):
        rng = np.random.default_rng(1)
        f = rand(rng, (4, 3, 3))
        neg = Tensor._wrap(-f.data)
        assert abs(D.feature_similarity_loss(f, neg).item() - 1.0) < 1e-9

    def test_matches_per_position_oracle(self):
        rng = np.random.default_rng(2)
        fs, ft = rand(rng, (4, 2, 2)), rand(rng, (4, 2, 2))
        got = D.feature_similarity_loss(fs, ft).item()
        assert abs(got - cosine_mean_oracle(fs.data, ft.data)) < 1e-12

    def test_zero_norm_positions_contribute_zero(self):
        rng = np.random.default_rng(3)
        fs = rand(rng, (4, 2, 2))
        fs.data[:, 0, 0] = 0.0
        ft = rand(rng, (4, 2, 2))
        got = D.feature_similarity_loss(fs, ft).item()
        assert math.isfinite(got)
        assert abs(got - cosine_mean_oracle(fs.data, ft.data)) < 1e-12

    def test_bounded(self):
        for seed in range(10):
            rng = np.random.default_rng(seed)
            val = D.feature_similarity_loss(rand(rng, (3, 4, 4)),
                                            rand(rng, (3, 4, 4))).item()
            assert -1.0 - 1e-12 <= val <= 1.0 + 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(DimensionError):
            D.feature_similarity_loss(Tensor(np.ones((2, 2, 2))),
                                      Tensor(np.ones((2, 2, 3))))


class TestOutputSimilarity:
    def test_identical_logits_zero(self):
        rng = np.random.default_rng(4)
        z = rand(rng, (5, 3, 3))
        assert D.output_similarity_loss(z, z).item() == 0.0

    def test_two_class_hand_value(self):
        # teacher [ln 2, 0], student [0, 0] at every position:
        # KL = (2/3) ln(4/3) + (1/3) ln(2/3)
        teacher = Tensor(np.stack([np.full((2, 2), math.log(2.0)), np.zeros((2, 2))]))
        student = Tensor(np.zeros((2, 2, 2)))
        expected = (2 / 3) * math.log(4 / 3) + (1 / 3) * math.log(2 / 3)
        got = D.output_similarity_loss(student, teacher).item()
        assert abs(got - expected) < 1e-12
        assert abs(expected - 0.056633012265132426) < 1e-15

    def test_nonnegative_on_random_pairs(self):
        for seed in range(100):
            rng = np.random.default_rng(seed)
            s, t = rand(rng, (4, 2, 2)), rand(rng, (4, 2, 2))
            assert D.output_similarity_loss(s, t).item() >= -1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        s, t = rand(rng, (3, 2, 2)), rand(rng, (3, 2, 2))
        got = D.output_similarity_loss(s, t).item()
        assert abs(got - kl_oracle(s.data, t.data)) < 1e-12


class TestCrossEntropy:
    def test_uniform_two_class(self):
        logits = Tensor(np.zeros((2, 1, 1)))
        labels = np.array([[0]])
        assert abs(D.cross_entropy_loss(logits, labels).item() - math.log(2.0)) < 1e-12

    def test_saturated_true_class(self):
        logits = Tensor(np.array([[[30.0]], [[0.0]]]))
        labels = np.array([[0]])
        assert D.cross_entropy_loss(logits, labels).item() < 1e-12

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(6)
        logits = rand(rng, (3, 2, 2))
        labels = rng.integers(0, 3, size=(2, 2))
        got = D.cross_entropy_loss(logits, labels).item()
        assert abs(got - cross_entropy_oracle(logits.data, labels)) < 1e-12

    def test_ignore_index_excluded(self):
        rng = np.random.default_rng(7)
        logits = rand(rng, (3, 2, 2))
        labels = np.array([[0, 255], [255, 2]])
        got = D.cross_entropy_loss(logits, labels).item()
        assert abs(got - cross_entropy_oracle(logits.data, labels)) < 1e-12

    def test_all_ignored_warns_and_returns_zero(self):
        logits = Tensor(np.zeros((3, 2, 2)))
        labels = np.full((2, 2), 255)
        with pytest.warns(UserWarning):
            assert D.cross_entropy_loss(logits, labels).item() == 0.0


class TestUpsampleModule:
    def build(self, rng, c_low=6, c_gate=6):
        return D.build_upsample_params(rng, c_low, c_gate, variant="mobilenet")

    def test_output_doubles_low_res(self):
        rng = np.random.default_rng(8)
        params = self.build(rng, 8, 8)
        out = D.upsample_module(rand(rng, (8, 4, 4)), rand(rng, (8, 8, 8)), params)
        assert out.shape == (8, 8, 8)

    def test_output_doubles_for_all_even_gate_sizes(self):
        rng = np.random.default_rng(9)
        params = self.build(rng, 4, 4)
        for h, w in ((2, 3), (3, 2), (4, 4), (5, 1)):
            out = D.upsample_module(rand(rng, (4, h, w)),
                                    rand(rng, (4, 2 * h, 2 * w)), params)
            assert out.shape == (4, 2 * h, 2 * w)

    def test_gate_dim_mismatch_rejected(self):
        rng = np.random.default_rng(10)
        params = self.build(rng, 4, 4)
        with pytest.raises(ConfigurationError):
            D.upsample_module(rand(rng, (4, 4, 4)), rand(rng, (4, 7, 8)), params)

    def test_zero_gate_logits_weights_half(self):
        rng = np.random.default_rng(11)
        params = self.build(rng, 4, 4)
        for _, t in nn.named_tensors(params.gate):
            if t.rank == 4:
                t.data = np.zeros_like(t.data)
        low = rand(rng, (4, 3, 3))
        gate = rand(rng, (4, 6, 6))
        out = D.upsample_module(low, gate, params)
        main = nn.bilinear_resize(nn.mobilenet_block(low, params.main), 6, 6)
        expected = nn.mobilenet_block(Tensor._wrap(0.5 * main.data), params.refine)
        assert np.abs(out.data - expected.data).max() < 1e-12

    def test_constant_input_constant_main_path_interior(self):
        # Constant propagation holds away from the zero-padded borders: the
        # depthwise window (k=5, pad=2) sees identical values at every
        # interior position.
        rng = np.random.default_rng(12)
        params = self.build(rng, 4, 4)
        low = Tensor(np.full((4, 8, 8), 0.7))
        main = nn.mobilenet_block(low, params.main)
        interior = main.data[:, 2:-2, 2:-2].reshape(4, -1)
        assert np.abs(interior - interior[:, :1]).max() < 1e-12

    def test_three_variants_pairwise_distinct(self):
        rng = np.random.default_rng(13)
        low = rand(rng, (4, 4, 4))
        gate = rand(rng, (4, 8, 8))
        outs = []
        for variant in D.UPSAMPLE_VARIANTS:
            params = D.build_upsample_params(np.random.default_rng(3), 4, 4,
                                             variant=variant)
            outs.append(D.upsample_feature(low, gate, params, variant).data)
        for i in range(len(outs)):
            for j in range(i + 1, len(outs)):
                assert np.abs(outs[i] - outs[j]).max() > 1e-6


class TestDistillStep:
    @pytest.fixture(scope="class")
    def setup(self):
        teacher = build_variant("T", 12, seed=0)
        student = build_variant("T", 12, seed=1)
        rng = np.random.default_rng(2)
        x = Tensor._wrap(rng.standard_normal((3, 128, 128)))
        labels = rng.integers(0, 12, size=(16, 16))
        return teacher, student, x, labels

    def test_self_distillation_identities(self, setup):
        teacher, _, x, labels = setup
        report = D.distill_step(teacher, teacher, x, labels, halve_student=False)
        assert abs(report.l_feat + 1.0) < 1e-9
        assert abs(report.l_out) < 1e-9

    def test_total_is_exact_sum(self, setup):
        teacher, student, x, labels = setup
        report = D.distill_step(teacher, student, x, labels)
        assert report.total == report.l_cls + report.l_cross + report.l_feat + report.l_out

    def test_loss_ladder_four_distinct_totals(self, setup):
        teacher, student, x, labels = setup
        ladder = [("cls",), ("cls", "out"), ("cls", "out", "feat"),
                  ("cls", "out", "feat", "cross")]
        totals = [D.distill_step(teacher, student, x, labels, losses=losses).total
                  for losses in ladder]
        assert all(math.isfinite(t) for t in totals)
        assert len({round(t, 9) for t in totals}) == 4

    def test_disabled_losses_report_zero(self, setup):
        teacher, student, x, labels = setup
        report = D.distill_step(teacher, student, x, labels, losses=("cls",))
        assert report.l_cross == report.l_feat == report.l_out == 0.0
        assert report.l_cls > 0.0

    def test_indivisible_input_rejected(self, setup):
        teacher, student, _, labels = setup
        with pytest.raises(DimensionError):
            D.distill_step(teacher, student, Tensor(np.zeros((3, 64, 64))), labels)
