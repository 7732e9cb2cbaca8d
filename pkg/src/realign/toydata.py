"""Synthetic data spaces: 2-D Gaussian mixtures and 16x16 grayscale shape images.

Each space returns ``(x, labels)`` with ``x`` flat of shape ``(n, dim)``. Labels
index a one-hot condition embedding; :meth:`conditions` maps them to feature rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from realign.diffusion import Condition, condition_features


def one_hot_conditions(labels, n_classes: int) -> np.ndarray:
    conds = [Condition(tuple(np.eye(n_classes)[k])) for k in np.asarray(labels)]
    return condition_features(conds, n_classes)


@dataclass
class GaussianMixture2D:
    """Isotropic mixture whose components sit evenly on a circle."""

    n_components: int = 4
    radius: float = 2.0
    std: float = 0.35
    offset: tuple[float, float] = (0.0, 0.0)

    @property
    def dim(self) -> int:
        return 2

    @property
    def cond_dim(self) -> int:
        return self.n_components

    @property
    def means(self) -> np.ndarray:
        ang = 2 * np.pi * np.arange(self.n_components) / self.n_components
        return np.stack([self.radius * np.cos(ang), self.radius * np.sin(ang)], axis=1) + np.asarray(self.offset)

    def sample(self, rng: np.random.Generator, n: int, labels=None):
        if labels is None:
            labels = rng.integers(0, self.n_components, size=n)
        labels = np.asarray(labels)
        x = self.means[labels] + self.std * rng.standard_normal((len(labels), 2))
        return x, labels

    def conditions(self, labels) -> np.ndarray:
        return one_hot_conditions(labels, self.n_components)


SHAPES = ("square", "disk", "bar")


@dataclass
class ShapeImages:
    """Grayscale ``size x size`` images in [-1, 1]: one bright shape on a dark background.

    ``contrast`` scales the shape-to-background step and ``blur`` applies a box
    blur of that many passes; low contrast / heavy blur stand in for
    "flat" images, sharp high contrast for preferred ones.
    """

    size: int = 16
    contrast: tuple[float, float] = (1.4, 1.8)
    blur: int = 0
    jitter: int = 2
    extent: tuple[int, int] = (3, 5)
    texture: float = 0.0
    classes: tuple[str, ...] = field(default_factory=lambda: SHAPES)

    @property
    def dim(self) -> int:
        return self.size * self.size

    @property
    def cond_dim(self) -> int:
        return len(self.classes)

    def conditions(self, labels) -> np.ndarray:
        return one_hot_conditions(labels, len(self.classes))

    def render(self, rng: np.random.Generator, label: int) -> np.ndarray:
        n = self.size
        yy, xx = np.mgrid[0:n, 0:n]
        cy = (n - 1) / 2 + rng.integers(-self.jitter, self.jitter + 1)
        cx = (n - 1) / 2 + rng.integers(-self.jitter, self.jitter + 1)
        r = rng.integers(self.extent[0], self.extent[1] + 1)
        kind = self.classes[label]
        if kind == "square":
            shape = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r)
        elif kind == "disk":
            shape = (yy - cy) ** 2 + (xx - cx) ** 2 <= (r + 0.5) ** 2
        elif kind == "bar":
            shape = (np.abs(yy - cy) <= 1) & (np.abs(xx - cx) <= r + 2)
        else:
            raise ValueError(f"unknown shape {kind!r}")
        step = rng.uniform(*self.contrast)
        img = np.full((n, n), -step / 2)
        img[shape] = step / 2
        for _ in range(self.blur):
            img = box_blur(img)
        if self.texture > 0:
            img = img + self.texture * rng.standard_normal(img.shape)
        return img

    def sample(self, rng: np.random.Generator, n: int, labels=None):
        if labels is None:
            labels = rng.integers(0, len(self.classes), size=n)
        labels = np.asarray(labels)
        x = np.stack([self.render(rng, int(k)).ravel() for k in labels]) if len(labels) else np.zeros((0, self.dim))
        return x, labels


def box_blur(img: np.ndarray) -> np.ndarray:
    p = np.pad(img, 1, mode="edge")
    return (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:] + p[1:-1, 1:-1]) / 5.0
