"""Feature maps phi with k(x, x') = phi(x) . phi(x'), plus exact input VJPs.

Random maps regenerate their frozen weights from ``(kind, shapes, seed)``;
no weight files are ever written. Uniform draws come from numpy's PCG64 bit
generator and Gaussians are produced from them with Box-Muller, so a seed
maps to the same weights on every platform.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

KINDS = ("linear", "random_fourier", "random_mlp", "random_conv")


@dataclass(frozen=True)
class FeatureSpec:
    """Serializable description of a feature map.

    ``out_dim`` is only read by ``random_fourier``; the network maps derive
    their output size from ``nets`` and ``widths`` / ``channels``.
    """

    kind: str = "linear"
    input_dim: int = 1
    seed: int = 0
    out_dim: int = 1024
    bandwidth: float = 1.0
    nets: int = 4
    widths: Tuple[int, ...] = (128, 128, 128)
    channels: int = 32
    conv_layers: int = 3
    sigma_w: float = 1.0
    image_shape: Optional[Tuple[int, int, int]] = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        d["image_shape"] = list(self.image_shape) if self.image_shape else None
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureSpec":
        d = dict(d)
        d["widths"] = tuple(d.get("widths", (128, 128, 128)))
        if d.get("image_shape"):
            d["image_shape"] = tuple(d["image_shape"])
        return cls(**d)


def gaussian(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard normals via Box-Muller on the generator's uniforms."""
    size = int(np.prod(shape))
    pairs = (size + 1) // 2
    u1 = 1.0 - rng.random(pairs)  # (0, 1]
    u2 = rng.random(pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)])
    return z[:size].reshape(shape)


class FeatureMap:
    """Base class. Subclasses implement ``_forward`` and ``_backward``."""

    def __init__(self, spec: FeatureSpec):
        if spec.input_dim < 1:
            raise ValueError("input_dim must be positive")
        self.spec = spec
        self.input_dim = spec.input_dim

    out_dim: int

    def _check(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.input_dim:
            raise ValueError(f"expected inputs with {self.input_dim} features, got shape {X.shape}")
        if not np.all(np.isfinite(X)):
            raise ValueError("non-finite input")
        return X

    def forward(self, X):
        """Features for a batch plus a cache for :meth:`backward`."""
        return self._forward(self._check(X))

    def backward(self, cache, U) -> np.ndarray:
        """Row-wise J(x_i)^T u_i for the batch in ``cache``."""
        U = np.asarray(U, dtype=np.float64)
        return self._backward(cache, U)

    def featurize_batch(self, X) -> np.ndarray:
        return self.forward(X)[0]

    def featurize(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("featurize expects a single input vector")
        return self.featurize_batch(x[None, :])[0]

    def kernel(self, x, x2) -> float:
        return float(self.featurize(x) @ self.featurize(x2))

    def gram(self, X, X2=None) -> np.ndarray:
        P = self.featurize_batch(X)
        return P @ (P if X2 is None else self.featurize_batch(X2)).T

    def vjp_batch(self, X, U) -> np.ndarray:
        _, cache = self.forward(X)
        U = np.asarray(U, dtype=np.float64)
        if U.shape != (np.asarray(X).shape[0], self.out_dim):
            raise ValueError(f"upstream must have shape (n, {self.out_dim})")
        return self.backward(cache, U)

    def input_vjp(self, x, upstream) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        u = np.asarray(upstream, dtype=np.float64)
        if x.ndim != 1 or u.shape != (self.out_dim,):
            raise ValueError("shape mismatch in input_vjp")
        return self.vjp_batch(x[None, :], u[None, :])[0]

    def __repr__(self):
        return f"{type(self).__name__}(input_dim={self.input_dim}, out_dim={self.out_dim})"


class LinearMap(FeatureMap):
    def __init__(self, spec):
        super().__init__(spec)
        self.out_dim = spec.input_dim

    def _forward(self, X):
        return X.copy(), None

    def _backward(self, cache, U):
        return U.copy()


class RandomFourierMap(FeatureMap):
    """sqrt(2/D) cos(Wx + b) approximating exp(-|x-x'|^2 / (2 bandwidth^2))."""

    def __init__(self, spec):
        super().__init__(spec)
        if spec.out_dim < 1 or spec.bandwidth <= 0:
            raise ValueError("random_fourier needs out_dim > 0 and bandwidth > 0")
        self.out_dim = spec.out_dim
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        self.W = gaussian(rng, (spec.input_dim, spec.out_dim)) / spec.bandwidth
        self.b = 2 * np.pi * rng.random(spec.out_dim)
        self.scale = math.sqrt(2.0 / spec.out_dim)

    def _forward(self, X):
        Z = X @ self.W + self.b
        return self.scale * np.cos(Z), Z

    def _backward(self, Z, U):
        return -self.scale * (U * np.sin(Z)) @ self.W.T


class RandomMLPMap(FeatureMap):
    """Concatenated last hidden layers of ``nets`` frozen ReLU networks.

    Weights are N(0, sigma_w^2 * 2 / fan_in), no biases. Output is scaled by
    1/sqrt(nets * width) so that k(x, x') averages over nets and units.
    """

    def __init__(self, spec):
        super().__init__(spec)
        if spec.nets < 1 or not spec.widths or min(spec.widths) < 1:
            raise ValueError("random_mlp needs nets >= 1 and positive widths")
        if spec.sigma_w <= 0:
            raise ValueError("sigma_w must be positive")
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        self.weights = []
        fan_in = spec.input_dim
        for w in spec.widths:
            std = spec.sigma_w * math.sqrt(2.0 / fan_in)
            self.weights.append(std * gaussian(rng, (spec.nets, fan_in, w)))
            fan_in = w
        self.nets = spec.nets
        self.width = spec.widths[-1]
        self.out_dim = self.nets * self.width
        self.scale = 1.0 / math.sqrt(self.out_dim)

    def _forward(self, X):
        H = np.broadcast_to(X, (self.nets,) + X.shape)
        masks = []
        for W in self.weights:
            A = H @ W  # (nets, B, width)
            mask = A > 0
            H = np.where(mask, A, 0.0)
            masks.append(mask)
        B = X.shape[0]
        feats = self.scale * H.transpose(1, 0, 2).reshape(B, self.out_dim)
        return feats, masks

    def _backward(self, masks, U):
        B = U.shape[0]
        G = self.scale * U.reshape(B, self.nets, self.width).transpose(1, 0, 2)
        for W, mask in zip(reversed(self.weights), reversed(masks)):
            G = np.where(mask, G, 0.0) @ W.transpose(0, 2, 1)
        return G.sum(axis=0)


def _conv_patches(H):
    """(B, h, w, C) -> (B, h, w, C*9) 3x3 patches with zero 'same' padding."""
    P = np.pad(H, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = sliding_window_view(P, (3, 3), axis=(1, 2))  # (B, h, w, C, 3, 3)
    B, h, w, C = H.shape
    return win.reshape(B, h, w, C * 9)


def _conv_patches_adjoint(dP, C):
    B, h, w, _ = dP.shape
    dP = dP.reshape(B, h, w, C, 3, 3)
    out = np.zeros((B, h + 2, w + 2, C))
    for di in range(3):
        for dj in range(3):
            out[:, di:di + h, dj:dj + w, :] += dP[..., di, dj]
    return out[:, 1:-1, 1:-1, :]


def _pool2(H):
    B, h, w, C = H.shape
    h2, w2 = h // 2, w // 2
    return H[:, :2 * h2, :2 * w2].reshape(B, h2, 2, w2, 2, C).mean(axis=(2, 4))


def _pool2_adjoint(G, shape):
    out = np.zeros(shape)
    B, h2, w2, C = G.shape
    up = np.repeat(np.repeat(G, 2, axis=1), 2, axis=2) / 4.0
    out[:, :2 * h2, :2 * w2] = up
    return out


class RandomConvMap(FeatureMap):
    """Frozen random ConvNets: 3x3 stride-1 convs with ReLU, 2x average
    pooling between layers, global average pooling at the end."""

    def __init__(self, spec):
        super().__init__(spec)
        if spec.image_shape is None:
            raise ValueError("random_conv needs image_shape (C, H, W)")
        C, Hh, Ww = spec.image_shape
        if C * Hh * Ww != spec.input_dim:
            raise ValueError("image_shape does not match input_dim")
        if spec.nets < 1 or spec.channels < 1 or spec.conv_layers < 1:
            raise ValueError("random_conv needs positive nets, channels and layers")
        self.image_shape = spec.image_shape
        rng = np.random.Generator(np.random.PCG64(spec.seed))
        self.weights = []
        for _ in range(spec.nets):
            layers, c_in = [], C
            for _ in range(spec.conv_layers):
                std = spec.sigma_w * math.sqrt(2.0 / (9 * c_in))
                layers.append(std * gaussian(rng, (9 * c_in, spec.channels)))
                c_in = spec.channels
            self.weights.append(layers)
        self.channels = spec.channels
        self.out_dim = spec.nets * spec.channels
        self.scale = 1.0 / math.sqrt(self.out_dim)

    def _net_forward(self, layers, H):
        cache = []
        for i, W in enumerate(layers):
            if i > 0:
                cache.append(("pool", H.shape))
                H = _pool2(H)
            c_in = H.shape[-1]
            A = _conv_patches(H) @ W
            mask = A > 0
            cache.append(("conv", c_in, mask))
            H = np.where(mask, A, 0.0)
        cache.append(("gap", H.shape))
        return H.mean(axis=(1, 2)), cache

    def _net_backward(self, layers, cache, g):
        kind, shape = cache[-1]
        B, h, w, C = shape
        G = np.broadcast_to(g[:, None, None, :] / (h * w), shape)
        li = len(layers) - 1
        for entry in reversed(cache[:-1]):
            if entry[0] == "conv":
                _, c_in, mask = entry
                dA = np.where(mask, G, 0.0)
                G = _conv_patches_adjoint(dA @ layers[li].T, c_in)
                li -= 1
            else:
                G = _pool2_adjoint(G, entry[1])
        return G

    def _forward(self, X):
        C, Hh, Ww = self.image_shape
        B = X.shape[0]
        img = X.reshape(B, C, Hh, Ww).transpose(0, 2, 3, 1)
        feats, caches = [], []
        for layers in self.weights:
            f, cache = self._net_forward(layers, img)
            feats.append(f)
            caches.append(cache)
        return self.scale * np.concatenate(feats, axis=1), caches

    def _backward(self, caches, U):
        C, Hh, Ww = self.image_shape
        B = U.shape[0]
        total = np.zeros((B, Hh, Ww, C))
        for m, (layers, cache) in enumerate(zip(self.weights, caches)):
            g = self.scale * U[:, m * self.channels:(m + 1) * self.channels]
            total += self._net_backward(layers, cache, g)
        return total.transpose(0, 3, 1, 2).reshape(B, -1)


_BUILDERS = {
    "linear": LinearMap,
    "random_fourier": RandomFourierMap,
    "random_mlp": RandomMLPMap,
    "random_conv": RandomConvMap,
}


def build_feature_map(config: FeatureSpec, seed: Optional[int] = None) -> FeatureMap:
    """Construct the map described by ``config`` (``seed`` overrides config.seed)."""
    if config.kind not in _BUILDERS:
        raise ValueError(f"unknown feature map kind {config.kind!r}; choose from {KINDS}")
    if seed is not None and seed != config.seed:
        config = FeatureSpec.from_dict({**config.to_dict(), "seed": seed})
    return _BUILDERS[config.kind](config)
