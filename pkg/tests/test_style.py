"""Style extraction, threshold calibration, and the style file format."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from reservoir_tta.errors import (
    DegenerateBatchError,
    InputDomainError,
    InsufficientDataError,
    StyleFileFormatError,
)
from reservoir_tta.style import (
    VAR_FLOOR,
    FeatureExtractor,
    calibrate_threshold,
    export_styles,
    extract_style,
    import_styles,
    mean_style,
)

# ||s(B) - s(B + noise)|| for the fixed batches below, computed once with an
# independent loop-based forward/variance oracle and frozen.
NOISE_SHIFT_NORM = 2.330165752262114


def _oracle_style(batch, ex):
    """Independent reference: explicit loops + direct variance formula."""
    x = np.array(batch, dtype=float)
    out = []
    for w, b in zip(ex._weights, ex._biases):
        nxt = np.empty((x.shape[0], w.shape[0]))
        for i in range(x.shape[0]):
            for c in range(w.shape[0]):
                nxt[i, c] = float(np.dot(w[c], x[i]) + b[c])
        if ex.nonlinearity == "tanh":
            nxt = np.tanh(nxt)
        x = nxt
        for c in range(x.shape[1]):
            col = x[:, c]
            var = float(np.mean((col - col.mean()) ** 2))
            out.append(np.log(max(var, VAR_FLOOR)))
    return np.array(out)


class TestExtractStyle:
    def test_unit_variance_channels_give_zero_entries(self):
        # Identity extractor, batch engineered for per-channel variance 1.
        ex = FeatureExtractor(3, layer_channels=(3,), seed=1, nonlinearity="identity")
        target = np.vstack([np.eye(3), -np.eye(3)]) * np.sqrt(3)
        # Solve for inputs whose layer-1 activations are `target`.
        w = ex._weights[0]
        batch = (target - ex._biases[0]) @ np.linalg.inv(w).T
        style = extract_style(batch, ex)
        np.testing.assert_allclose(style, 0.0, atol=1e-12)

    def test_constant_batch_hits_floor_everywhere(self):
        ex = FeatureExtractor(4, seed=2)
        batch = np.ones((6, 4)) * 0.37
        style = extract_style(batch, ex)
        np.testing.assert_array_equal(style, np.log(VAR_FLOOR))
        assert np.all(np.isfinite(style))

    def test_noise_shift_matches_frozen_oracle_constant(self):
        ex = FeatureExtractor(6, layer_channels=(4, 5), seed=20240601)
        b1 = np.random.default_rng(421).standard_normal((4, 6))
        b2 = b1 + 0.5 * np.random.default_rng(422).standard_normal((4, 6))
        s1, s2 = extract_style(b1, ex), extract_style(b2, ex)
        np.testing.assert_array_equal(s1, _oracle_style(b1, ex))
        np.testing.assert_array_equal(s2, _oracle_style(b2, ex))
        assert np.linalg.norm(s1 - s2) == pytest.approx(NOISE_SHIFT_NORM, abs=1e-12)

    def test_single_sample_batch_rejected(self):
        ex = FeatureExtractor(4, seed=3)
        with pytest.raises(DegenerateBatchError):
            extract_style(np.ones((1, 4)), ex)

    def test_nonfinite_batch_rejected(self):
        ex = FeatureExtractor(4, seed=3)
        bad = np.ones((4, 4))
        bad[2, 1] = np.nan
        with pytest.raises(InputDomainError):
            extract_style(bad, ex)

    def test_deterministic_across_reconstructions(self):
        batch = np.random.default_rng(9).standard_normal((8, 5))
        a = extract_style(batch, FeatureExtractor(5, seed=77))
        b = extract_style(batch, FeatureExtractor(5, seed=77))
        np.testing.assert_array_equal(a, b)

    def test_scale_sensitivity_on_linear_extractor(self):
        # Multiplying inputs by c shifts every above-floor entry by 2 ln c.
        ex = FeatureExtractor(5, layer_channels=(4, 4), seed=5, nonlinearity="identity")
        batch = np.random.default_rng(11).standard_normal((16, 5))
        c = 3.7
        base, scaled = extract_style(batch, ex), extract_style(c * batch, ex)
        np.testing.assert_allclose(scaled - base, 2 * np.log(c), rtol=1e-10)

    def test_all_zero_input_is_finite(self):
        ex = FeatureExtractor(4, seed=6)
        style = extract_style(np.zeros((5, 4)), ex)
        assert np.all(np.isfinite(style))

    def test_dimension_layout_is_layer_major(self):
        ex = FeatureExtractor(4, layer_channels=(2, 3), seed=8)
        batch = np.random.default_rng(0).standard_normal((6, 4))
        style = extract_style(batch, ex)
        assert style.shape == (5,)
        acts = ex.activations(batch)
        np.testing.assert_allclose(style[:2], np.log(acts[0].var(axis=0)))
        np.testing.assert_allclose(style[2:], np.log(acts[1].var(axis=0)))


class TestFeatureExtractor:
    def test_same_seed_bit_identical_weights(self):
        a = FeatureExtractor(6, seed=123)
        b = FeatureExtractor(6, seed=123)
        for wa, wb in zip(a._weights, b._weights):
            np.testing.assert_array_equal(wa, wb)

    def test_weights_immutable(self):
        ex = FeatureExtractor(6, seed=1)
        with pytest.raises(ValueError):
            ex._weights[0][0, 0] = 1.0

    def test_channel_counts_match_spec(self):
        ex = FeatureExtractor(7, layer_channels=(3, 9, 2), seed=0)
        acts = ex.activations(np.zeros((2, 7)))
        assert [a.shape[1] for a in acts] == [3, 9, 2]
        assert ex.style_dim == 14

    def test_invalid_construction(self):
        with pytest.raises(InputDomainError):
            FeatureExtractor(0)
        with pytest.raises(InputDomainError):
            FeatureExtractor(4, layer_channels=())
        with pytest.raises(InputDomainError):
            FeatureExtractor(4, nonlinearity="relu")


class TestCalibrateThreshold:
    def test_identical_vectors_give_zero_tau(self):
        styles = [np.ones(3)] * 10
        cal = calibrate_threshold(styles, 0.99)
        assert cal.tau == 0.0
        assert cal.source_sample_count == 10

    def test_single_pair(self):
        cal = calibrate_threshold([np.array([0.0, 0.0]), np.array([3.0, 4.0])], 0.5)
        assert cal.tau == pytest.approx(5.0)

    def test_matches_nearest_rank_oracle_on_large_sample(self):
        rng = np.random.default_rng(31)
        styles = [rng.standard_normal(8) for _ in range(2000)]
        cal = calibrate_threshold(styles, 0.99)
        # Brute-force oracle: every pair individually, sort, ceil(q*N)-th.
        dists = [
            float(np.sqrt(((a - b) ** 2).sum()))
            for i, a in enumerate(styles)
            for b in styles[i + 1 :]
        ]
        dists.sort()
        rank = int(np.ceil(0.99 * len(dists)))
        assert cal.tau == dists[rank - 1]

    def test_requires_two_vectors(self):
        with pytest.raises(InsufficientDataError):
            calibrate_threshold([np.zeros(3)], 0.9)

    def test_quantile_bounds(self):
        pts = [np.zeros(2), np.ones(2)]
        with pytest.raises(InputDomainError):
            calibrate_threshold(pts, 0.0)
        with pytest.raises(InputDomainError):
            calibrate_threshold(pts, 1.5)

    @given(st.randoms(use_true_random=False))
    @settings(max_examples=25, deadline=None)
    def test_permutation_invariant(self, rnd):
        rng = np.random.default_rng(77)
        styles = [rng.standard_normal(4) for _ in range(12)]
        shuffled = styles[:]
        rnd.shuffle(shuffled)
        assert (
            calibrate_threshold(styles, 0.7).tau
            == calibrate_threshold(shuffled, 0.7).tau
        )

    def test_quantile_monotone(self):
        rng = np.random.default_rng(5)
        styles = [rng.standard_normal(6) for _ in range(40)]
        taus = [calibrate_threshold(styles, q).tau for q in (0.1, 0.5, 0.9, 0.99, 1.0)]
        assert all(a <= b for a, b in zip(taus, taus[1:]))


class TestMeanStyle:
    def test_singleton(self):
        np.testing.assert_array_equal(mean_style([np.array([1.0, 1.0])]), [1.0, 1.0])

    def test_midpoint(self):
        out = mean_style([np.array([0.0, 0.0]), np.array([2.0, 4.0])])
        np.testing.assert_array_equal(out, [1.0, 2.0])

    def test_matches_accumulation_oracle(self):
        rng = np.random.default_rng(13)
        styles = [rng.standard_normal(5) for _ in range(100)]
        acc = np.zeros(5)
        for s in styles:
            acc += s
        np.testing.assert_allclose(mean_style(styles), acc / 100, rtol=1e-12)

    def test_empty_rejected(self):
        with pytest.raises(InsufficientDataError):
            mean_style([])


class TestStyleFile:
    def test_empty_file_gives_empty_sequence(self, tmp_path):
        path = tmp_path / "styles.txt"
        path.write_text("")
        assert import_styles(path, 4) == []

    def test_single_row(self, tmp_path):
        path = tmp_path / "styles.txt"
        path.write_text("0.0,1.0\n")
        out = import_styles(path, 2)
        assert len(out) == 1
        np.testing.assert_array_equal(out[0], [0.0, 1.0])

    def test_round_trip_bitwise(self, tmp_path):
        rng = np.random.default_rng(3)
        styles = [
            rng.standard_normal(7) * 10.0 ** rng.integers(-8, 8) for _ in range(50)
        ]
        path = tmp_path / "styles.txt"
        assert export_styles(path, styles) == 50
        loaded = import_styles(path, 7)
        assert len(loaded) == 50
        for a, b in zip(styles, loaded):
            np.testing.assert_array_equal(a, b)

    def test_comments_and_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "styles.txt"
        path.write_text("# header\n\n1.0,2.0\n  # another\n3.0,4.0\n")
        assert len(import_styles(path, 2)) == 2

    def test_dimension_mismatch(self, tmp_path):
        path = tmp_path / "styles.txt"
        path.write_text("1.0,2.0,3.0\n")
        with pytest.raises(StyleFileFormatError):
            import_styles(path, 2)

    def test_nonfinite_entry(self, tmp_path):
        path = tmp_path / "styles.txt"
        path.write_text("1.0,nan\n")
        with pytest.raises(StyleFileFormatError):
            import_styles(path, 2)

    def test_unparseable_entry(self, tmp_path):
        path = tmp_path / "styles.txt"
        path.write_text("1.0,zap\n")
        with pytest.raises(StyleFileFormatError):
            import_styles(path, 2)
