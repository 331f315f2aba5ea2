"""U-Net encoder-decoder for speckle-to-digit reconstruction."""

from __future__ import annotations

import numpy as np

from . import layers as L

HEADS = ("relu", "sigmoid")


class UNet:
    """Encoder blocks (two 3x3 conv + ReLU, then 2x2 max-pool), a bottleneck
    block, mirrored decoder blocks (2x upsample, skip concatenation, two 3x3
    conv + ReLU), and a 1x1 output convolution followed by the head.

    ``channels`` lists the encoder widths followed by the bottleneck width, so
    its length minus one is the depth. The ReLU head is clamped into
    [eps, 1-eps] by the loss; the sigmoid head is the bounded alternative.
    """

    def __init__(self, channels=(8, 16, 32), head: str = "relu", params: dict | None = None,
                 rng=None, head_bias: float = 0.25, dtype=np.float32):
        if head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}")
        if len(channels) < 2:
            raise ValueError("need at least one encoder level and a bottleneck")
        self.channels = tuple(int(c) for c in channels)
        self.head = head
        self.params = params if params is not None else self._init(rng or np.random.default_rng(0), head_bias, dtype)

    @property
    def depth(self) -> int:
        return len(self.channels) - 1

    def _block_names(self):
        names = [f"enc{i}" for i in range(self.depth)] + ["mid"]
        names += [f"dec{i}" for i in range(self.depth)]
        return names

    def _block_io(self):
        io = []
        c = 1
        for o in self.channels[:-1]:
            io.append((c, o))
            c = o
        io.append((c, self.channels[-1]))
        c = self.channels[-1]
        for o in reversed(self.channels[:-1]):
            io.append((c + o, o))
            c = o
        return io

    def _init(self, rng, head_bias, dtype):
        params = {}
        for name, (cin, cout) in zip(self._block_names(), self._block_io()):
            for j, ci in enumerate((cin, cout)):
                params[f"{name}.conv{j}.w"] = L.he_uniform(rng, (cout, ci, 3, 3), ci * 9, dtype)
                params[f"{name}.conv{j}.b"] = np.zeros(cout, dtype=dtype)
        c = self.channels[0]
        params[f"head.{self.head}.w"] = L.he_uniform(rng, (1, c, 1, 1), c, dtype) * dtype(0.1)
        params[f"head.{self.head}.b"] = np.full(1, head_bias if self.head == "relu" else 0.0, dtype=dtype)
        return params

    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def astype(self, dtype) -> "UNet":
        return UNet(self.channels, self.head, {k: v.astype(dtype) for k, v in self.params.items()})

    def copy(self) -> "UNet":
        return UNet(self.channels, self.head, {k: v.copy() for k, v in self.params.items()})

    # ------------------------------------------------------------------ passes

    def _block(self, name, x, caches):
        for j in range(2):
            x, c1 = L.conv2d_forward(x, self.params[f"{name}.conv{j}.w"], self.params[f"{name}.conv{j}.b"])
            x, c2 = L.relu_forward(x)
            caches.append((c1, c2))
        return x

    def _block_back(self, name, dy, caches, grads):
        for j in (1, 0):
            c1, c2 = caches.pop()
            dy = L.relu_backward(dy, c2)
            dy, dw, db = L.conv2d_backward(dy, c1)
            grads[f"{name}.conv{j}.w"] = dw
            grads[f"{name}.conv{j}.b"] = db
        return dy

    def forward(self, x: np.ndarray, keep: bool = False):
        """Head output in [0, inf) (ReLU) or (0, 1) (sigmoid)."""
        L._check4(x)
        if x.shape[1] != 1:
            raise ValueError("U-Net expects single-channel speckle input")
        if x.shape[2] % (1 << self.depth) or x.shape[3] % (1 << self.depth):
            raise ValueError(f"input dims {x.shape[2:]} not divisible by 2^{self.depth}")
        caches = []
        skips = []
        h = x.astype(next(iter(self.params.values())).dtype, copy=False)
        for i in range(self.depth):
            h = self._block(f"enc{i}", h, caches)
            skips.append(h)
            h, pc = L.maxpool2_forward(h)
            caches.append(pc)
        h = self._block("mid", h, caches)
        for i in range(self.depth):
            h, uc = L.upsample2_forward(h)
            h, cc = L.concat_forward(h, skips.pop())
            caches.append((uc, cc))
            h = self._block(f"dec{i}", h, caches)
        h, hc = L.conv2d_forward(h, self.params[f"head.{self.head}.w"], self.params[f"head.{self.head}.b"])
        if self.head == "relu":
            out, ac = L.relu_forward(h)
        else:
            out, ac = L.sigmoid_forward(h)
        caches.append((hc, ac))
        return (out, caches) if keep else out

    def backward(self, dout: np.ndarray, caches: list) -> dict:
        grads = {}
        hc, ac = caches.pop()
        dh = L.relu_backward(dout, ac) if self.head == "relu" else L.sigmoid_backward(dout, ac)
        dh, dw, db = L.conv2d_backward(dh, hc)
        grads[f"head.{self.head}.w"] = dw
        grads[f"head.{self.head}.b"] = db
        skip_grads = []
        for i in reversed(range(self.depth)):
            dh = self._block_back(f"dec{i}", dh, caches, grads)
            uc, cc = caches.pop()
            dh, dskip = L.concat_backward(dh, cc)
            skip_grads.append(dskip)
            dh = L.upsample2_backward(dh, uc)
        dh = self._block_back("mid", dh, caches, grads)
        for i in reversed(range(self.depth)):
            pc = caches.pop()
            dh = L.maxpool2_backward(dh, pc)
            dh = dh + skip_grads.pop()
            dh = self._block_back(f"enc{i}", dh, caches, grads)
        return grads

    def loss_and_grad(self, x: np.ndarray, target: np.ndarray, eps: float = L.BCE_EPS):
        out, caches = self.forward(x, keep=True)
        loss, lc = L.bce_forward(out, target.astype(out.dtype), eps)
        grads = self.backward(L.bce_backward(lc), caches)
        return loss, grads

    def predict(self, x: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Reconstructions clamped to [0, 1]."""
        outs = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.clip(np.concatenate(outs), 0.0, 1.0)


def binarize_output(recon: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(recon) >= threshold).astype(np.uint8)


def reconstruct_binary(model: UNet, dataset, batch_size: int = 128) -> np.ndarray:
    """Binary (n, H, W) reconstructions for every record of a dataset."""
    return binarize_output(model.predict(dataset.inputs(), batch_size))[:, 0]
