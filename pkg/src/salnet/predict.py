"""Forward pass plus the test-time post-processing that turns raw output into a map."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SaliencyMap, minmax_normalize, preprocess_image, resize_bilinear
from .errors import ShapeError


@dataclass(frozen=True)
class PostProcessConfig:
    sigma: float = 2.0
    # None: smooth vector-map outputs only
    smooth: bool | None = None


def smooth_map(m, sigma):
    """Gaussian blur truncated at 4 sigma with reflected borders (kernel sums to 1)."""
    if sigma <= 0:
        return np.asarray(m, dtype=np.float64)
    from scipy.ndimage import gaussian_filter  # deferred: slow import

    return gaussian_filter(np.asarray(m, dtype=np.float64), sigma, mode="reflect", truncate=4.0)


def postprocess(raw, out_hw, post: PostProcessConfig, vector_map=True):
    m = resize_bilinear(raw, out_hw)
    smooth = post.smooth if post.smooth is not None else vector_map
    if smooth:
        m = smooth_map(m, post.sigma)
    return SaliencyMap(minmax_normalize(m), (0.0, 1.0))


def predict(network, image, post: PostProcessConfig = PostProcessConfig(), out_hw=None):
    """Saliency map in [0, 1] for one preprocessed image ``(3, h, w)``.

    ``out_hw`` is the size of the original image (defaults to the input size);
    the raw network output is bilinearly resized to it before smoothing.
    """
    image = np.asarray(image)
    if image.ndim != 3:
        raise ShapeError(f"predict takes one (C, H, W) image, got {image.shape}")
    raw = network(image[None])[0, 0]
    out_hw = tuple(out_hw or image.shape[1:])
    return postprocess(raw, out_hw, post, network.spec.output_kind == "vector_map")


def network_kind(network):
    return "shallow" if network.spec.output_kind == "vector_map" else "deep"


def predict_sample(network, sample, stats, post: PostProcessConfig = PostProcessConfig()):
    """Preprocess a raw sample for ``network`` and predict at the sample's own size."""
    x = preprocess_image(network_kind(network), sample.image, stats,
                         network.spec.input_shape[1:], sample.image_range)
    return predict(network, x, post, out_hw=sample.hw)
