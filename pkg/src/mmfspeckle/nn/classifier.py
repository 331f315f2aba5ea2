"""Small CNN digit classifier applied to binarized reconstructions."""

from __future__ import annotations

import numpy as np

from . import layers as L
from .optim import AdamState, adam_update


class Classifier:
    """3x3 conv (8 channels) + ReLU + 2x2 max-pool + dense layer to 10 logits."""

    def __init__(self, image_shape=(32, 32), channels: int = 8, params: dict | None = None, rng=None):
        self.image_shape = tuple(image_shape)
        self.channels = channels
        if params is None:
            rng = rng or np.random.default_rng(0)
            h, w = self.image_shape
            feat = channels * (h // 2) * (w // 2)
            params = {
                "clf.conv.w": L.he_uniform(rng, (channels, 1, 3, 3), 9),
                "clf.conv.b": np.zeros(channels, dtype=np.float32),
                "clf.dense.w": L.he_uniform(rng, (10, feat), feat) * np.float32(0.5),
                "clf.dense.b": np.zeros(10, dtype=np.float32),
            }
        self.params = params

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def _forward(self, x):
        h, c1 = L.conv2d_forward(x, self.params["clf.conv.w"], self.params["clf.conv.b"])
        h, c2 = L.relu_forward(h)
        h, c3 = L.maxpool2_forward(h)
        logits, c4 = L.dense_forward(h, self.params["clf.dense.w"], self.params["clf.dense.b"])
        return logits, (c1, c2, c3, c4)

    def _prep(self, images):
        x = np.asarray(images, dtype=np.float32)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[2:] != self.image_shape:
            raise ValueError(f"classifier expects {self.image_shape} images, got {x.shape[2:]}")
        return x

    def probabilities(self, images) -> np.ndarray:
        x = self._prep(images)
        out = [L.softmax(self._forward(x[i:i + 256])[0].astype(np.float64)) for i in range(0, len(x), 256)]
        return np.concatenate(out)

    def predict(self, images) -> np.ndarray:
        return self.probabilities(images).argmax(axis=1)

    def loss_and_grad(self, x, labels):
        logits, (c1, c2, c3, c4) = self._forward(x)
        loss, lc = L.softmax_xent_forward(logits, labels)
        dlogits = L.softmax_xent_backward(lc).astype(x.dtype)
        dh, dw4, db4 = L.dense_backward(dlogits, c4)
        dh = L.maxpool2_backward(dh, c3)
        dh = L.relu_backward(dh, c2)
        _, dw1, db1 = L.conv2d_backward(dh, c1)
        return loss, {"clf.conv.w": dw1, "clf.conv.b": db1, "clf.dense.w": dw4, "clf.dense.b": db4}


def classifier_train(images, labels, epochs: int = 8, rng=None, lr: float = 1e-3, batch_size: int = 64,
                     model: Classifier | None = None) -> Classifier:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() > 9):
        raise ValueError("labels must lie in 0-9")
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[:, None]
    model = model or Classifier(x.shape[2:], rng=rng)
    state = AdamState(lr=lr)
    for _ in range(epochs):
        order = rng.permutation(len(x))
        for start in range(0, len(order), batch_size):
            idx = np.sort(order[start:start + batch_size])
            _, grads = model.loss_and_grad(x[idx], labels[idx])
            adam_update(state, model.params, grads)
    return model


def classifier_predict(model: Classifier, image) -> int:
    return int(model.predict(np.asarray(image)[None])[0])
