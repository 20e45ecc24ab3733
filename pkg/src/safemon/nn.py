"""Small convolutional softmax classifier, trained from scratch.

Everything is plain numpy in float64: 3x3 stride-1 convolutions with
clamp-to-edge padding, rectifier activations, 2x2 max-pooling, dense layers,
and a softmax cross-entropy head. Parameters live in one flat vector with
per-layer reshaped views, which keeps the SGD update and the
finite-difference checks trivial.

Layer descriptors: ("conv", out_channels), ("relu",), ("pool",),
("flatten",), ("dense", units). The final layer must be dense; softmax is
applied on top of its logits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Xoshiro256


@dataclass
class _Layer:
    kind: str
    w_slice: slice | None = None
    w_shape: tuple | None = None
    b_slice: slice | None = None
    fan_in: int = 0


class ConvNet:
    def __init__(self, input_shape: tuple[int, int, int], layers):
        self.input_shape = tuple(int(d) for d in input_shape)
        self.layer_specs = tuple(tuple(l) for l in layers)
        h, w, c = self.input_shape
        flat_dim = None  # None while still spatial
        offset = 0
        built: list[_Layer] = []
        for spec in self.layer_specs:
            kind = spec[0]
            if kind == "conv":
                if flat_dim is not None:
                    raise ValueError("conv layer after flatten")
                out_ch = int(spec[1])
                w_size = 9 * c * out_ch
                layer = _Layer(
                    kind,
                    w_slice=slice(offset, offset + w_size),
                    w_shape=(3, 3, c, out_ch),
                    b_slice=slice(offset + w_size, offset + w_size + out_ch),
                    fan_in=9 * c,
                )
                offset += w_size + out_ch
                c = out_ch
            elif kind == "relu":
                layer = _Layer(kind)
            elif kind == "pool":
                if flat_dim is not None:
                    raise ValueError("pool layer after flatten")
                if h % 2 or w % 2:
                    raise ValueError(f"2x2 pooling needs even dimensions, got {h}x{w}")
                h //= 2
                w //= 2
                layer = _Layer(kind)
            elif kind == "flatten":
                if flat_dim is not None:
                    raise ValueError("duplicate flatten")
                flat_dim = h * w * c
                layer = _Layer(kind)
            elif kind == "dense":
                if flat_dim is None:
                    raise ValueError("dense layer requires a preceding flatten")
                units = int(spec[1])
                w_size = flat_dim * units
                layer = _Layer(
                    kind,
                    w_slice=slice(offset, offset + w_size),
                    w_shape=(flat_dim, units),
                    b_slice=slice(offset + w_size, offset + w_size + units),
                    fan_in=flat_dim,
                )
                offset += w_size + units
                flat_dim = units
            else:
                raise ValueError(f"unknown layer kind {kind!r}")
            built.append(layer)
        if not built or built[-1].kind != "dense":
            raise ValueError("network must end in a dense layer")
        self._layers = built
        self.param_count = offset
        self.output_dim = flat_dim

    # -- parameters --------------------------------------------------------

    def init_params(self, rng: Xoshiro256, scheme: str = "he") -> np.ndarray:
        if scheme != "he":
            raise ValueError(f"unknown init scheme {scheme!r}")
        params = np.zeros(self.param_count, dtype=np.float64)
        for layer in self._layers:
            if layer.w_slice is None:
                continue
            n = layer.w_slice.stop - layer.w_slice.start
            std = np.sqrt(2.0 / layer.fan_in)
            params[layer.w_slice] = std * rng.normals(n)
            # biases stay zero
        return params

    def _weights(self, params: np.ndarray, layer: _Layer):
        w = params[layer.w_slice].reshape(layer.w_shape)
        b = params[layer.b_slice]
        return w, b

    # -- forward / backward -------------------------------------------------

    def forward(self, params: np.ndarray, x: np.ndarray,
                keep_cache: bool = False):
        caches = [] if keep_cache else None
        for layer in self._layers:
            if layer.kind == "conv":
                w, b = self._weights(params, layer)
                n, hh, ww, cin = x.shape
                cols = _im2col3(x)  # (n*h*w, 9*cin)
                out = cols @ w.reshape(9 * cin, -1) + b
                if keep_cache:
                    caches.append((cols, (n, hh, ww, cin)))
                x = out.reshape(n, hh, ww, -1)
            elif layer.kind == "relu":
                if keep_cache:
                    caches.append(x > 0)
                x = np.maximum(x, 0.0)
            elif layer.kind == "pool":
                n, hh, ww, cc = x.shape
                if keep_cache:
                    win = (
                        x.reshape(n, hh // 2, 2, ww // 2, 2, cc)
                        .transpose(0, 1, 3, 5, 2, 4)
                        .reshape(n, hh // 2, ww // 2, cc, 4)
                    )
                    idx = win.argmax(axis=4)  # first max wins ties
                    x = np.take_along_axis(win, idx[..., None], axis=4)[..., 0]
                    caches.append((idx, (n, hh, ww, cc)))
                else:
                    x = x.reshape(n, hh // 2, 2, ww // 2, 2, cc).max(axis=(2, 4))
            elif layer.kind == "flatten":
                if keep_cache:
                    caches.append(x.shape)
                x = x.reshape(x.shape[0], -1)
            elif layer.kind == "dense":
                if keep_cache:
                    caches.append(x)
                w, b = self._weights(params, layer)
                x = x @ w + b
        return (x, caches) if keep_cache else x

    def loss_and_grad(self, params: np.ndarray, x: np.ndarray,
                      labels: np.ndarray) -> tuple[float, np.ndarray]:
        logits, caches = self.forward(params, x, keep_cache=True)
        loss, delta = softmax_cross_entropy(logits, labels)
        grad = np.zeros_like(params)
        first = self._layers[0]
        for layer, cache in zip(reversed(self._layers), reversed(caches)):
            if layer.kind == "dense":
                w, _ = self._weights(params, layer)
                grad[layer.w_slice] = (cache.T @ delta).reshape(-1)
                grad[layer.b_slice] = delta.sum(axis=0)
                delta = delta @ w.T
            elif layer.kind == "flatten":
                delta = delta.reshape(cache)
            elif layer.kind == "pool":
                idx, (n, hh, ww, cc) = cache
                dwin = np.zeros((n, hh // 2, ww // 2, cc, 4), dtype=np.float64)
                np.put_along_axis(dwin, idx[..., None], delta[..., None], axis=4)
                delta = (
                    dwin.reshape(n, hh // 2, ww // 2, cc, 2, 2)
                    .transpose(0, 1, 4, 2, 5, 3)
                    .reshape(n, hh, ww, cc)
                )
            elif layer.kind == "relu":
                delta = delta * cache
            elif layer.kind == "conv":
                cols, (n, hh, ww, cin) = cache
                w, _ = self._weights(params, layer)
                cout = w.shape[3]
                dmat = delta.reshape(n * hh * ww, cout)
                grad[layer.b_slice] = dmat.sum(axis=0)
                grad[layer.w_slice] = (cols.T @ dmat).reshape(-1)
                if layer is first:
                    break  # nothing below needs an input gradient
                dxp = np.zeros((n, hh + 2, ww + 2, cin), dtype=np.float64)
                for di in range(3):
                    for dj in range(3):
                        piece = (dmat @ w[di, dj].T).reshape(n, hh, ww, cin)
                        target = dxp[:, di:di + hh, dj:dj + ww, :]
                        np.add(target, piece, out=target)
                delta = _fold_edge_pad1(dxp)
        return loss, grad


def _im2col3(x: np.ndarray) -> np.ndarray:
    """Gather 3x3 clamp-to-edge patches: (n, h, w, c) -> (n*h*w, 9*c)."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # win is (n, h, w, c, 3, 3); reorder to (.., 3, 3, c) to match the
    # (3, 3, cin, cout) weight layout after reshape
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def _fold_edge_pad1(dxp: np.ndarray) -> np.ndarray:
    # adjoint of np.pad(x, 1, mode="edge"): border gradients fold back inward
    dx = dxp[:, 1:-1, 1:-1, :].copy()
    dx[:, 0, :, :] += dxp[:, 0, 1:-1, :]
    dx[:, -1, :, :] += dxp[:, -1, 1:-1, :]
    dx[:, :, 0, :] += dxp[:, 1:-1, 0, :]
    dx[:, :, -1, :] += dxp[:, 1:-1, -1, :]
    dx[:, 0, 0, :] += dxp[:, 0, 0, :]
    dx[:, 0, -1, :] += dxp[:, 0, -1, :]
    dx[:, -1, 0, :] += dxp[:, -1, 0, :]
    dx[:, -1, -1, :] += dxp[:, -1, -1, :]
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    logp = z - np.log(se)
    loss = -float(logp[np.arange(n), labels].mean())
    delta = e / se
    delta[np.arange(n), labels] -= 1.0
    delta /= n
    return loss, delta


def default_layers(k: int) -> tuple[tuple, ...]:
    """The stock architecture: two conv/pool blocks and a small dense head."""
    return (
        ("conv", 8), ("relu",), ("pool",),
        ("conv", 16), ("relu",), ("pool",),
        ("flatten",), ("dense", 32), ("relu",), ("dense", k),
    )
