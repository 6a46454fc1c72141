"""Feature-space perturbation: build the carrier image.

A small fixed convolutional extractor (weights drawn deterministically from
a seed) stands in for a pretrained network. The attack walks the clean
image toward a cross-class target in feature space with signed-gradient
steps, projected to an L-infinity ball, and keeps the best iterate seen.
Forward and backward passes are written out by hand so the gradient can be
checked against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DatasetError, GeometryError
from .imageops import as_image

KERNEL = 3


@dataclass(frozen=True)
class PerturbConfig:
    """Attack hyperparameters (all surfaced as CLI flags)."""

    epsilon: float = 16 / 255
    step_size: float = 2 / 255
    iterations: int = 40
    layer: int = 2
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must be in [0, 1], got {self.epsilon}")
        if self.step_size < 0 or self.step_size > self.epsilon:
            raise ValueError(
                f"step_size must be in [0, epsilon], got {self.step_size}"
            )
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.layer not in (1, 2):
            raise ValueError(f"layer must be 1 or 2, got {self.layer}")


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """3x3 convolution with zero padding 1; x is (C, H, W), w is (O, C, 3, 3)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    return np.einsum("chwkl,ockl->ohw", win, w, optimize=True)


def _conv_input_grad(
    gy: np.ndarray, w: np.ndarray, stride: int, x_shape: tuple[int, ...]
) -> np.ndarray:
    """Gradient of the convolution w.r.t. its input (weights are fixed)."""
    c, h, wd = x_shape
    _, ho, wo = gy.shape
    gxp = np.zeros((c, h + 2, wd + 2))
    for di in range(KERNEL):
        for dj in range(KERNEL):
            contrib = np.einsum("ohw,oc->chw", gy, w[:, :, di, dj], optimize=True)
            gxp[:, di : di + stride * ho : stride, dj : dj + stride * wo : stride] += (
                contrib
            )
    return gxp[:, 1 : 1 + h, 1 : 1 + wd]


class FeatureExtractor:
    """Fixed two-layer conv net, weights deterministic from a 64-bit seed.

    conv(in->8, 3x3, stride 1, pad 1) -> ReLU -> conv(8->16, 3x3, stride 2,
    pad 1) -> ReLU. Weights are He-scaled normals drawn from a Philox
    generator in a fixed order (layer 1 first), so the same seed yields the
    same network everywhere. No biases.
    """

    def __init__(self, seed: int, in_channels: int = 3):
        if in_channels not in (1, 3):
            raise GeometryError(f"in_channels must be 1 or 3, got {in_channels}")
        self.seed = seed
        self.in_channels = in_channels
        rng = np.random.Generator(np.random.Philox(seed))
        self.w1 = rng.normal(
            0.0, np.sqrt(2.0 / (in_channels * KERNEL * KERNEL)),
            (8, in_channels, KERNEL, KERNEL),
        )
        self.w2 = rng.normal(
            0.0, np.sqrt(2.0 / (8 * KERNEL * KERNEL)), (16, 8, KERNEL, KERNEL)
        )

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise GeometryError(
                f"expected ({self.in_channels}, H, W) input, got shape {x.shape}"
            )
        return x

    def forward(self, x: np.ndarray, layer: int = 2) -> np.ndarray:
        x = self._check(x)
        z1 = _conv_forward(x, self.w1, 1)
        a1 = np.maximum(z1, 0.0)
        if layer == 1:
            return a1
        z2 = _conv_forward(a1, self.w2, 2)
        return np.maximum(z2, 0.0)


def to_unit(image: np.ndarray) -> np.ndarray:
    """uint8 (H, W, C) image -> float64 (C, H, W) in [0, 1]."""
    img = as_image(image)
    return img.transpose(2, 0, 1).astype(np.float64) / 255.0


def from_unit(x: np.ndarray) -> np.ndarray:
    """float64 (C, H, W) in [0, 1] -> uint8 (H, W, C), rounding half up."""
    q = np.floor(np.clip(x, 0.0, 1.0) * 255.0 + 0.5)
    return q.astype(np.uint8).transpose(1, 2, 0)


def extract_features(x: np.ndarray, fe: FeatureExtractor, layer: int = 2) -> np.ndarray:
    """Deterministic forward pass to the requested activation map."""
    if layer not in (1, 2):
        raise ValueError(f"layer must be 1 or 2, got {layer}")
    return fe.forward(x, layer)


def fsp_loss(
    x: np.ndarray, target_features: np.ndarray, fe: FeatureExtractor, layer: int = 2
) -> float:
    """Squared Euclidean distance between feature maps."""
    f = extract_features(x, fe, layer)
    if f.shape != target_features.shape:
        raise GeometryError(
            f"feature shapes differ: {f.shape} vs {target_features.shape}"
        )
    d = f - target_features
    return float((d * d).sum())


def fsp_gradient(
    x: np.ndarray, target_features: np.ndarray, fe: FeatureExtractor, layer: int = 2
) -> np.ndarray:
    """Analytic d(loss)/d(x), same shape as x.

    Hand-written reverse pass: squared-distance head, ReLU subgradient
    (zero at zero), then the transposed convolutions.
    """
    x = fe._check(x)
    z1 = _conv_forward(x, fe.w1, 1)
    a1 = np.maximum(z1, 0.0)
    if layer == 1:
        f = a1
    else:
        z2 = _conv_forward(a1, fe.w2, 2)
        f = np.maximum(z2, 0.0)
    if f.shape != target_features.shape:
        raise GeometryError(
            f"feature shapes differ: {f.shape} vs {target_features.shape}"
        )
    g = 2.0 * (f - target_features)
    if layer == 2:
        g = g * (z2 > 0.0)
        g = _conv_input_grad(g, fe.w2, 2, a1.shape)
    g = g * (z1 > 0.0)
    return _conv_input_grad(g, fe.w1, 1, x.shape)


def _descend(
    clean_unit: np.ndarray,
    target_features: np.ndarray,
    fe: FeatureExtractor,
    cfg: PerturbConfig,
) -> tuple[np.ndarray, list[float]]:
    """Projected signed-gradient descent; returns (best iterate, loss trace).

    The trace holds the loss of every accepted (best-so-far) iterate, so it
    is non-increasing and starts at the initial loss.
    """
    lo = np.clip(clean_unit - cfg.epsilon, 0.0, 1.0)
    hi = np.clip(clean_unit + cfg.epsilon, 0.0, 1.0)
    x = clean_unit.copy()
    best = x
    best_loss = fsp_loss(x, target_features, fe, cfg.layer)
    trace = [best_loss]
    for _ in range(cfg.iterations):
        g = fsp_gradient(x, target_features, fe, cfg.layer)
        x = np.clip(x - cfg.step_size * np.sign(g), lo, hi)
        loss = fsp_loss(x, target_features, fe, cfg.layer)
        if loss < best_loss:
            best, best_loss = x.copy(), loss
            trace.append(loss)
    return best, trace


def fsp_perturb(
    clean: np.ndarray,
    target: np.ndarray,
    fe: FeatureExtractor,
    cfg: PerturbConfig,
) -> np.ndarray:
    """Perturb the clean image toward the target's features.

    The result is re-quantized to 8 bits and clamped so that every sample
    stays within round(epsilon*255) of the clean image.
    """
    clean_img = as_image(clean)
    target_img = as_image(target)
    if clean_img.shape != target_img.shape:
        raise GeometryError(
            f"clean/target shapes differ: {clean_img.shape} vs {target_img.shape}"
        )
    target_features = extract_features(to_unit(target_img), fe, cfg.layer)
    best, _ = _descend(to_unit(clean_img), target_features, fe, cfg)
    carrier = from_unit(best)
    budget = int(np.floor(cfg.epsilon * 255.0 + 0.5))
    ci = clean_img.astype(np.int64)
    carrier = np.clip(carrier.astype(np.int64), ci - budget, ci + budget)
    return np.clip(carrier, 0, 255).astype(np.uint8)


def choose_target(labels, index: int, seed: int) -> int:
    """Pick a target record uniformly among those with a different label.

    Deterministic for a given (labels, seed, index): the draw comes from a
    generator seeded with both values.
    """
    labels = np.asarray(labels)
    others = np.flatnonzero(labels != labels[index])
    if others.size == 0:
        raise DatasetError("cannot choose a cross-class target: only one class present")
    rng = np.random.default_rng([seed, index])
    return int(others[rng.integers(others.size)])


def uniform_noise_carrier(
    clean: np.ndarray,
    target: np.ndarray,
    fe: FeatureExtractor,
    cfg: PerturbConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Baseline generator: clean plus uniform integer noise within the budget."""
    img = as_image(clean)
    budget = int(np.floor(cfg.epsilon * 255.0 + 0.5))
    noise = rng.integers(-budget, budget + 1, size=img.shape, dtype=np.int64)
    return np.clip(img.astype(np.int64) + noise, 0, 255).astype(np.uint8)


def fsp_carrier(
    clean: np.ndarray,
    target: np.ndarray,
    fe: FeatureExtractor,
    cfg: PerturbConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    return fsp_perturb(clean, target, fe, cfg)


GENERATORS = {
    "fsp": fsp_carrier,
    "uniform-noise": uniform_noise_carrier,
}
