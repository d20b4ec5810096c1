"""Tests for the Bayesian color classifier."""

from __future__ import annotations

import numpy as np
import pytest

from skinseg.bayes import (
    ColorHistogramPair,
    bc_prob_map,
    binarize,
    fit_histograms,
    load_histograms,
    posterior,
    quantize_color,
    save_histograms,
)
from skinseg.errors import (
    ChannelMismatchError,
    ContractError,
    EmptyClassError,
    HistogramFileError,
)
from skinseg.imgio import BinaryMask, Image, ProbMap, SamplePair


def _pair(skin: dict[int, int], nonskin: dict[int, int], bins: int = 2) -> ColorHistogramPair:
    """Build histograms from sparse cell counts."""
    skin_counts = np.zeros(bins**3, dtype=np.uint64)
    nonskin_counts = np.zeros(bins**3, dtype=np.uint64)
    for cell, count in skin.items():
        skin_counts[cell] = count
    for cell, count in nonskin.items():
        nonskin_counts[cell] = count
    return ColorHistogramPair(
        bins=bins,
        skin_counts=skin_counts,
        nonskin_counts=nonskin_counts,
        n_skin=int(skin_counts.sum()),
        n_nonskin=int(nonskin_counts.sum()),
    )


@pytest.fixture
def reference_pair() -> ColorHistogramPair:
    """Histograms over 2 bins per channel.

    Cell 0 (dark): 30 of 100 skin pixels, 10 of 100 non-skin pixels.
    Cell 1 (red only): skin only. Cell 2 (green only): never seen.
    """
    return _pair({0: 30, 1: 70}, {0: 10, 7: 90})


class TestQuantize:
    """Test color quantization."""

    def test_reference_color(self):
        """Test (0.5, 0.25, 0.75) with 4 bins lands in (2, 1, 3)."""
        assert quantize_color((0.5, 0.25, 0.75), 4) == (2, 1, 3)

    def test_one_goes_to_last_bin(self):
        """Test the upper edge of the unit interval is clamped."""
        assert quantize_color((1.0, 1.0, 1.0), 32) == (31, 31, 31)

    def test_bins_must_be_at_least_two(self):
        """Test a single bin is rejected."""
        with pytest.raises(ContractError):
            quantize_color((0.1, 0.2, 0.3), 1)


class TestFit:
    """Test histogram fitting."""

    def test_two_pixel_image(self):
        """Test a skin and a non-skin pixel are counted in their cells."""
        # Arrange
        image = Image(np.array([[[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]]))
        truth = BinaryMask(np.array([[True, False]]))

        # Act
        hist = fit_histograms([SamplePair("a", image, truth)], bins=2)

        # Assert
        assert hist.n_skin == 1
        assert hist.n_nonskin == 1
        assert int(hist.skin_counts[1]) == 1
        assert int(hist.nonskin_counts[0]) == 1

    def test_totals_cover_every_pixel(self, synthetic_samples):
        """Test skin and non-skin totals add up to the pixel count."""
        # Act
        hist = fit_histograms(synthetic_samples, bins=8)

        # Assert
        pixels = sum(s.truth.height * s.truth.width for s in synthetic_samples)
        assert hist.n_skin + hist.n_nonskin == pixels
        assert hist.n_skin == sum(s.truth.count for s in synthetic_samples)

    def test_pixel_and_sample_order_do_not_matter(self, synthetic_samples):
        """Test shuffling samples and the pixels inside them leaves the counts unchanged."""
        # Arrange
        rng = np.random.default_rng(17)
        shuffled = []
        for index in rng.permutation(len(synthetic_samples)):
            sample = synthetic_samples[index]
            height, width = sample.truth.shape
            order = rng.permutation(height * width)
            pixels = sample.image.data.reshape(-1, 3)[order].reshape(height, width, 3)
            bits = sample.truth.bits.ravel()[order].reshape(height, width)
            shuffled.append(SamplePair(sample.id, Image(pixels), BinaryMask(bits)))

        # Act
        original = fit_histograms(synthetic_samples, bins=8)
        reordered = fit_histograms(shuffled, bins=8)

        # Assert
        assert (reordered.n_skin, reordered.n_nonskin) == (original.n_skin, original.n_nonskin)
        np.testing.assert_array_equal(reordered.skin_counts, original.skin_counts)
        np.testing.assert_array_equal(reordered.nonskin_counts, original.nonskin_counts)

    def test_grayscale_rejected(self):
        """Test fitting requires RGB images."""
        sample = SamplePair("g", Image(np.zeros((2, 2))), BinaryMask.full(2, 2))

        with pytest.raises(ChannelMismatchError):
            fit_histograms([sample], bins=2)

    def test_inconsistent_totals_rejected(self):
        """Test counts must sum to the declared totals."""
        with pytest.raises(ContractError):
            ColorHistogramPair(
                bins=2,
                skin_counts=np.ones(8, dtype=np.uint64),
                nonskin_counts=np.ones(8, dtype=np.uint64),
                n_skin=7,
                n_nonskin=8,
            )


class TestPosterior:
    """Test the skin posterior."""

    def test_reference_cell(self, reference_pair):
        """Test 30/100 against 10/100 with equal priors gives 0.75."""
        assert posterior(reference_pair, (0.1, 0.1, 0.1)) == pytest.approx(0.75)

    def test_unseen_color_returns_prior(self, reference_pair):
        """Test a color seen in neither class falls back to the skin prior."""
        # Act
        equal = posterior(reference_pair, (0.1, 0.9, 0.1))
        skewed = posterior(reference_pair, (0.1, 0.9, 0.1), (0.3, 0.7))

        # Assert
        assert equal == 0.5
        assert skewed == pytest.approx(0.3)

    def test_skin_only_color(self, reference_pair):
        """Test a color never seen as non-skin is certain skin."""
        assert posterior(reference_pair, (0.9, 0.1, 0.1)) == 1.0

    def test_smoothing_softens_certainty(self, reference_pair):
        """Test add-alpha smoothing keeps skin-only colors below 1."""
        assert 0.5 < posterior(reference_pair, (0.9, 0.1, 0.1), alpha=1.0) < 1.0

    def test_priors_shift_the_posterior(self, reference_pair):
        """Test a larger skin prior raises the posterior."""
        assert posterior(reference_pair, (0.1, 0.1, 0.1), (0.7, 0.3)) > 0.75

    def test_empty_class(self):
        """Test the posterior is undefined without non-skin pixels."""
        hist = _pair({0: 5}, {})

        with pytest.raises(EmptyClassError):
            posterior(hist, (0.1, 0.1, 0.1))

    @pytest.mark.parametrize("priors", [(0.5, 0.6), (0.0, 1.0), (1.2, -0.2)])
    def test_invalid_priors(self, reference_pair, priors):
        """Test priors must be positive and sum to 1."""
        with pytest.raises(ContractError):
            posterior(reference_pair, (0.1, 0.1, 0.1), priors)

    def test_scale_invariance(self, histograms):
        """Test multiplying every count by a constant leaves posteriors unchanged."""
        # Arrange
        scaled = ColorHistogramPair(
            bins=histograms.bins,
            skin_counts=histograms.skin_counts * np.uint64(7),
            nonskin_counts=histograms.nonskin_counts * np.uint64(7),
            n_skin=histograms.n_skin * 7,
            n_nonskin=histograms.n_nonskin * 7,
        )
        colors = np.random.default_rng(0).uniform(size=(1000, 3))

        # Act & Assert
        for color in colors:
            assert posterior(scaled, color) == pytest.approx(
                posterior(histograms, color), abs=1e-12
            )


class TestProbMap:
    """Test the per-pixel classifier."""

    def test_matches_scalar_posterior(self, histograms, rgb_image):
        """Test every pixel equals the scalar posterior of its color."""
        # Act
        prob = bc_prob_map(histograms, rgb_image)

        # Assert
        assert prob.shape == rgb_image.shape
        for row in range(rgb_image.height):
            for col in range(rgb_image.width):
                assert prob.values[row, col] == posterior(histograms, rgb_image.data[row, col])

    def test_brute_force_counts(self, synthetic_samples, rgb_image):
        """Test the map against a direct recount of the training pixels."""
        # Arrange
        bins = 4
        hist = fit_histograms(synthetic_samples, bins=bins)
        pixels = np.concatenate([s.image.data.reshape(-1, 3) for s in synthetic_samples])
        labels = np.concatenate([s.truth.bits.ravel() for s in synthetic_samples])
        cells = np.minimum((pixels * bins).astype(int), bins - 1)

        # Act
        prob = bc_prob_map(hist, rgb_image)

        # Assert
        for row, col in [(0, 0), (3, 7), (15, 15)]:
            target = np.minimum((rgb_image.data[row, col] * bins).astype(int), bins - 1)
            same = np.all(cells == target, axis=1)
            like_skin = np.count_nonzero(same & labels) / np.count_nonzero(labels)
            like_non = np.count_nonzero(same & ~labels) / np.count_nonzero(~labels)
            expected = 0.5 if like_skin + like_non == 0 else like_skin / (like_skin + like_non)
            assert prob.values[row, col] == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", [0, 1])
    def test_random_histograms_against_direct_formula(self, seed):
        """Test ten thousand random colors against counts and priors evaluated by hand."""
        # Arrange
        rng = np.random.default_rng(seed)
        bins = 4
        skin = rng.integers(0, 6, size=bins**3)
        nonskin = rng.integers(0, 6, size=bins**3)
        unseen = rng.choice(bins**3, size=8, replace=False)
        skin[unseen] = 0
        nonskin[unseen] = 0
        hist = _pair(dict(enumerate(skin.tolist())), dict(enumerate(nonskin.tolist())), bins)
        p_skin = float(rng.uniform(0.05, 0.95))
        priors = (p_skin, 1.0 - p_skin)
        img = Image(rng.uniform(0.0, 1.0, size=(100, 100, 3)))

        # Act
        prob = bc_prob_map(hist, img, priors)

        # Assert
        fallbacks = 0
        for row in range(img.height):
            for col in range(img.width):
                color = img.data[row, col]
                red, green, blue = quantize_color(color, bins)
                cell = red + bins * (green + bins * blue)
                weighted_skin = int(skin[cell]) / hist.n_skin * priors[0]
                weighted_non = int(nonskin[cell]) / hist.n_nonskin * priors[1]
                if weighted_skin + weighted_non == 0:
                    expected = priors[0]
                    fallbacks += 1
                else:
                    expected = weighted_skin / (weighted_skin + weighted_non)
                assert prob.values[row, col] == pytest.approx(expected, abs=1e-12)
                assert posterior(hist, color, priors) == prob.values[row, col]
        assert fallbacks > 0

    def test_rejects_grayscale(self, histograms):
        """Test the classifier needs color."""
        with pytest.raises(ChannelMismatchError):
            bc_prob_map(histograms, Image(np.zeros((2, 2))))


class TestBinarize:
    """Test thresholding."""

    def test_threshold_is_inclusive(self):
        """Test values equal to the threshold count as skin."""
        # Arrange
        prob = ProbMap(np.array([[0.49, 0.5, 0.51]]))

        # Act
        mask = binarize(prob, 0.5)

        # Assert
        np.testing.assert_array_equal(mask.bits, [[False, True, True]])

    def test_extremes(self):
        """Test threshold 0 keeps everything and threshold 1 keeps only ones."""
        prob = ProbMap(np.array([[0.0, 0.999, 1.0]]))

        assert binarize(prob, 0.0).count == 3
        assert binarize(prob, 1.0).count == 1


class TestHistogramFiles:
    """Test BCH1 persistence."""

    def test_saved_histograms_load_back(self, histograms, tmp_path):
        """Test counts and totals survive a save and load."""
        # Arrange
        path = tmp_path / "bc.bch"

        # Act
        save_histograms(histograms, path)
        loaded = load_histograms(path)

        # Assert
        assert loaded.bins == histograms.bins
        assert (loaded.n_skin, loaded.n_nonskin) == (histograms.n_skin, histograms.n_nonskin)
        np.testing.assert_array_equal(loaded.skin_counts, histograms.skin_counts)
        np.testing.assert_array_equal(loaded.nonskin_counts, histograms.nonskin_counts)

    def test_wrong_magic(self, tmp_path):
        """Test foreign files are rejected."""
        path = tmp_path / "bad.bch"
        path.write_bytes(b"NOPE" + bytes(100))

        with pytest.raises(HistogramFileError):
            load_histograms(path)

    def test_truncated(self, histograms, tmp_path):
        """Test a cut-off payload is rejected."""
        # Arrange
        path = tmp_path / "cut.bch"
        save_histograms(histograms, path)
        path.write_bytes(path.read_bytes()[:-20])

        # Act & Assert
        with pytest.raises(HistogramFileError):
            load_histograms(path)
