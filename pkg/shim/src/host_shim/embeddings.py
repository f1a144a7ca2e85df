"""Embedding providers for the evaluator's wire interface.

``real_embedding_provider`` is where a pretrained vision-language model would
be loaded; without local weights it raises ModelUnavailable.  The built-in
``test-card/v1`` model is a deterministic desk-scale stand-in that actually
looks at its input: images embed by mean color, texts by the color words they
contain, in a shared space — enough for sanity ordering checks (a red card
really does score higher against "red" than against "blue"), useless for
anything else.
"""

from __future__ import annotations

import os
import zlib

import numpy as np

from .errors import ModelUnavailable

WEIGHTS_ENV = "HOST_SHIM_WEIGHTS"

_COLOR_RGB = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 0.8, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "orange": (1.0, 0.55, 0.0),
    "pink": (1.0, 0.6, 0.7),
    "purple": (0.6, 0.0, 0.8),
    "white": (1.0, 1.0, 1.0),
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "brown": (0.55, 0.3, 0.1),
    "cyan": (0.0, 0.9, 0.9),
}


class TestCardModel:
    """Shared color space: dims 0-2 RGB, dim 3 anchor, rest hashed words."""

    dim = 32
    logit_scale = 100.0

    def _finish(self, v: np.ndarray) -> np.ndarray:
        return v / np.linalg.norm(v)

    def embed_image(self, image: np.ndarray) -> np.ndarray:
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        mean = arr.reshape(-1, arr.shape[2]).mean(axis=0) / 255.0
        rgb = np.repeat(mean, 3)[:3] if mean.size < 3 else mean[:3]
        v = np.zeros(self.dim)
        v[:3], v[3] = rgb, 1.0
        return self._finish(v)

    def embed_text(self, text: str) -> np.ndarray:
        words = [w.strip(".,:;!?") for w in text.lower().split()]
        v = np.zeros(self.dim)
        colors = [_COLOR_RGB[w] for w in words if w in _COLOR_RGB]
        if colors:
            v[:3] = np.mean(colors, axis=0)
        v[3] = 1.0
        for w in words:
            if w and w not in _COLOR_RGB:
                v[4 + zlib.crc32(w.encode()) % (self.dim - 4)] += 0.05
        return self._finish(v)


def real_embedding_provider(model_id: str):
    """An embedding provider for ``model_id``, or ModelUnavailable.

    ``test-card/v1`` is always available.  Anything else needs weights under
    $HOST_SHIM_WEIGHTS/<model id>; loading such a model is out of scope here,
    so the error names the path it looked at.
    """
    if model_id == "test-card/v1":
        return TestCardModel()
    root = os.environ.get(WEIGHTS_ENV, "")
    wanted = os.path.join(root, model_id) if root else f"${WEIGHTS_ENV}/{model_id}"
    if not root or not os.path.isdir(wanted):
        raise ModelUnavailable(
            f"no local weights for {model_id!r} (looked at {wanted})")
    raise ModelUnavailable(
        f"weights found at {wanted} but no loader is built in; "
        f"only test-card/v1 runs without one")
