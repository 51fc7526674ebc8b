"""Network container: an ordered layer stack with cached activations.

``forward`` validates the input shape, checks every intermediate activation
for NaN/Inf, and caches per-layer outputs so the feature extractor and the
gradient checker can look inside. ``backward`` consumes those caches; calling
it twice without a fresh forward raises, because the caches would be stale.
"""

from __future__ import annotations

import numpy as np

from .layers import Layer, ShapeError


class NonFiniteError(FloatingPointError):
    """An activation or gradient went NaN/Inf; message names the layer."""


class StaleCacheError(RuntimeError):
    """Backward was requested but no matching forward pass is cached."""


class Network:
    """Feed-forward stack over NCHW float64 inputs.

    Parameters live inside the layers; ``parameters()`` iterates (name, param,
    grad) triples in a stable order. ``init_seed`` records the rng seed used
    to draw the initial weights (None for models restored from a file).
    """

    def __init__(self, layers: list[Layer], input_shape: tuple[int, int, int],
                 arch: str = "custom", seed: int | None = 0):
        if not layers:
            raise ValueError("network needs at least one layer")
        names = [l.name for l in layers]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate layer names: {sorted(names)}")
        self.layers = layers
        self.input_shape = tuple(int(d) for d in input_shape)
        self.arch = arch
        self.init_seed = seed
        # walk the static shape chain once so config mismatches fail at build time
        shape = self.input_shape
        self._shape_chain = [shape]
        for layer in layers:
            shape = layer.out_shape(shape)
            self._shape_chain.append(shape)
        if len(shape) != 1:
            raise ValueError(f"network output must be flat logits, got shape {shape}")
        self.num_classes = int(shape[0])
        self.activations: list[np.ndarray] = []
        self._forward_ready = False
        if seed is not None:
            self.initialize(seed)

    def initialize(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.initialize(rng)
        self.init_seed = seed
        self._forward_ready = False

    @property
    def num_params(self) -> int:
        return sum(l.num_params for l in self.layers)

    def parameters(self):
        for layer in self.layers:
            for pname in layer.params:
                yield f"{layer.name}.{pname}", layer.params[pname], layer.grads[pname]

    def zero_grads(self) -> None:
        for layer in self.layers:
            layer.zero_grads()

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4 or x.shape[1:] != self.input_shape:
            raise ShapeError(
                f"network expects (B, {', '.join(map(str, self.input_shape))}) input, "
                f"got shape {tuple(x.shape)}")
        if x.shape[0] < 1:
            raise ShapeError("batch must hold at least one sample")
        return x

    def _run(self, x, layers):
        acts = []
        for layer in layers:
            x = layer.forward(x)
            if not np.isfinite(x).all():
                raise NonFiniteError(f"non-finite activation leaving {layer.name}")
            acts.append(x)
        return x, acts

    def forward(self, x: np.ndarray) -> np.ndarray:
        """Run the full stack; returns (B, num_classes) logits."""
        x = self._check_input(x)
        out, self.activations = self._run(x, self.layers)
        self._forward_ready = True
        return out

    def features(self, x: np.ndarray) -> np.ndarray:
        """Activations entering the final layer, i.e. the deepest embedding."""
        x = self._check_input(x)
        out, _ = self._run(x, self.layers[:-1])
        return out

    def backward(self, dlogits: np.ndarray) -> None:
        """Accumulate parameter gradients for the cached forward pass."""
        if not self._forward_ready:
            raise StaleCacheError(
                "backward needs the activations of a preceding forward pass; "
                "run forward first")
        dy = np.asarray(dlogits, dtype=np.float64)
        expected = self.activations[-1].shape
        if dy.shape != expected:
            raise ShapeError(f"logit grad shape {dy.shape}, expected {expected}")
        for i in range(len(self.layers) - 1, -1, -1):
            dy = self.layers[i].backward(dy, need_input_grad=i > 0)
            if dy is not None and not np.isfinite(dy).all():
                raise NonFiniteError(f"non-finite gradient leaving {self.layers[i].name}")
        self._forward_ready = False

    def kink_signatures(self):
        """Tuple of routing arrays from the last forward (ReLU masks, pool argmaxes)."""
        return tuple(sig for l in self.layers if (sig := l.kink_signature()) is not None)

    def logits_batched(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Forward a large image array in fixed index-order batches.

        The batching is part of the result's identity: BLAS kernels vary with
        the row count, so the same images grouped differently can differ in
        the last bit. Anything that wants run-to-run reproducible outputs
        must go through here with the same batch_size.
        """
        images = np.asarray(images, dtype=np.float64)
        out = np.empty((images.shape[0], self.num_classes))
        for start in range(0, images.shape[0], batch_size):
            out[start:start + batch_size] = self.forward(images[start:start + batch_size])
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.copy() for name, p, _ in self.parameters()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p, _ in self.parameters()}
        if set(own) != set(state):
            missing = sorted(set(own) ^ set(state))
            raise ValueError(f"parameter name mismatch: {missing}")
        for name, p in own.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != p.shape:
                raise ShapeError(f"{name}: stored shape {src.shape}, model has {p.shape}")
            p[...] = src
