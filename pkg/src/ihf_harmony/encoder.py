"""Frozen multi-stage convolutional feature pyramid.

Stands in for a pre-trained VGG: four stages with channel widths
(16, 32, 64, 128) at strides (1, 2, 4, 8).  Weights are drawn once from a
seeded generator with orthogonal rows and then never updated.  Gradients do
flow through the encoder to its input.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor, channel_stats, conv2d, leaky_relu, no_tape

DEFAULT_SEED = 1337
DEFAULT_WIDTHS = (16, 32, 64, 128)
IN_CHANNELS = 3


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


class FixedEncoder:
    """Seeded frozen encoder; ``stages(x)`` returns the four feature maps."""

    kernel = 3

    def __init__(self, seed: int = DEFAULT_SEED, widths: Sequence[int] = DEFAULT_WIDTHS,
                 in_channels: int = IN_CHANNELS):
        self.seed = int(seed)
        self.widths = tuple(int(w) for w in widths)
        self.in_channels = in_channels
        rng = np.random.default_rng(self.seed)
        gain = np.sqrt(2.0 / (1.0 + 0.2 ** 2))
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        c_in = in_channels
        for c_out in self.widths:
            fan_in = c_in * self.kernel * self.kernel
            w = _orthogonal(rng, c_out, fan_in, gain).reshape(c_out, c_in, self.kernel, self.kernel)
            w = w.astype(np.float32)
            w.flags.writeable = False
            b = np.zeros(c_out, dtype=np.float32)
            b.flags.writeable = False
            self.weights.append(Tensor(w, name=f"enc.w{len(self.weights)}"))
            self.biases.append(Tensor(b, name=f"enc.b{len(self.biases)}"))
            c_in = c_out
        self._cache64: dict | None = None

    @property
    def factor(self) -> int:
        return 2 ** (len(self.widths) - 1)

    @property
    def embedding_size(self) -> int:
        return 2 * sum(self.widths)

    def _params(self, dtype):
        if dtype == np.float32:
            return self.weights, self.biases
        if self._cache64 is None:
            self._cache64 = (
                [Tensor(w.data.astype(np.float64)) for w in self.weights],
                [Tensor(b.data.astype(np.float64)) for b in self.biases],
            )
        return self._cache64

    def stages(self, image, upto: int | None = None) -> list[Tensor]:
        """Stage features for a (3, H, W) or (N, 3, H, W) image in [-1, 1].

        ``upto`` stops after that many stages (the losses never need stage 4).
        """
        x = as_tensor(image)
        if x.ndim not in (3, 4) or x.shape[-3] != self.in_channels:
            raise ShapeError(f"encoder expects ({self.in_channels}, H, W) images, got {x.shape}")
        h, w = x.shape[-2:]
        if h % self.factor or w % self.factor:
            raise ShapeError(f"encoder input height and width must be divisible by {self.factor}, got {h}x{w}")
        weights, biases = self._params(x.dtype)
        feats = []
        for i, (wt, bs) in enumerate(zip(weights[:upto], biases[:upto])):
            x = leaky_relu(conv2d(x, wt, bs, stride=1 if i == 0 else 2, padding=1), 0.2)
            feats.append(x)
        return feats

    def snapshot(self) -> list[np.ndarray]:
        return [w.data.copy() for w in self.weights] + [b.data.copy() for b in self.biases]


def encode_stages(image, encoder: FixedEncoder) -> list[Tensor]:
    return encoder.stages(image)


def embedding_from_stages(stages: Sequence[Tensor]) -> np.ndarray:
    """Concat[mu(f1)..mu(f4), sigma(f1)..sigma(f4)] along the channel axis."""
    with no_tape():
        stats = [channel_stats(f) for f in stages]
    mus = [m.data for m, _ in stats]
    sigmas = [s.data for _, s in stats]
    return np.concatenate(mus + sigmas, axis=-1)


def artefact_embedding(image, encoder: FixedEncoder) -> np.ndarray:
    """Artefact embedding z_s of one image (480,) or a batch (N, 480)."""
    with no_tape():
        return embedding_from_stages(encoder.stages(image))


def template_embedding(images, encoder: FixedEncoder, chunk: int = 32) -> np.ndarray:
    """Element-wise mean of per-image embeddings: a site's target template.

    ``images`` is a list of (3, H, W) arrays or one (N, 3, H, W) array.
    """
    if isinstance(images, np.ndarray) and images.ndim == 4:
        batch = images
    else:
        images = [np.asarray(im.data if isinstance(im, Tensor) else im) for im in images]
        if not images:
            raise ValueError("template_embedding needs at least one image")
        shape = images[0].shape
        if any(im.shape != shape for im in images):
            raise ShapeError("template_embedding needs images of identical shape")
        batch = np.stack(images)
    if len(batch) == 0:
        raise ValueError("template_embedding needs at least one image")
    embs = np.concatenate([artefact_embedding(batch[i:i + chunk], encoder)
                           for i in range(0, len(batch), chunk)])
    return embs.mean(axis=0)
