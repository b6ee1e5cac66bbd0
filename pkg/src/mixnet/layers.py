"""Layers with hand-written forward and backward passes.

Every layer works on a batch ``x`` of shape ``(n, in_dim)`` and sums its
parameter gradients over the batch; the loss head divides by ``n``.
``forward`` returns ``(out, cache)`` and ``backward(cache, grad_out)``
returns ``(grad_in, grads)`` where ``grads`` maps parameter names to arrays
shaped like the parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .linalg import BandedMatrix, LowRankMatrix, Matrix, ShapeError, band_mask, glorot_array

__all__ = [
    "GateError",
    "StaleCacheError",
    "softmax",
    "validate_gate",
    "Layer",
    "Affine",
    "ContextAffine",
    "Relu",
    "Softmax",
    "ContextualMoELayer",
    "GatedMoELayer",
    "EigenMoELayer",
    "SoftmaxCrossEntropy",
    "LayerStack",
    "softmax_ce",
    "contextual_moe_forward",
    "contextual_moe_backward",
    "gated_moe_forward",
    "gated_moe_backward",
    "eigen_moe_forward",
    "GradCheckReport",
    "grad_check",
]

GATE_TOL = 1e-6


class GateError(ValueError):
    """A gating vector is not a point on the probability simplex."""


class StaleCacheError(RuntimeError):
    """A cache was produced by another layer or before a parameter update."""


def softmax(s: np.ndarray) -> np.ndarray:
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    # shifting grad_p by a per-row constant is exact on the simplex and makes a
    # constant grad_p (identical experts) give exactly zero
    g = grad_p - grad_p[..., :1]
    return p * (g - (p * g).sum(axis=-1, keepdims=True))


def validate_gate(gate, n_experts: int, n_rows: int | None = None) -> np.ndarray:
    gate = np.asarray(gate, dtype=np.float64)
    if gate.ndim == 1:
        gate = gate[None, :]
    if gate.ndim != 2 or gate.shape[1] != n_experts:
        raise ShapeError(f"gate: expected {n_experts} weights per row, got shape {gate.shape}")
    if n_rows is not None and gate.shape[0] != n_rows:
        raise ShapeError(f"gate: expected {n_rows} rows, got {gate.shape[0]}")
    if np.any(gate < -GATE_TOL) or np.any(gate > 1 + GATE_TOL):
        raise GateError("gate weights must lie in [0, 1]")
    if np.any(np.abs(gate.sum(axis=1) - 1.0) > GATE_TOL):
        raise GateError("gate weights must sum to 1")
    return gate


def _as_batch(x, dim: int, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != dim:
        raise ShapeError(f"{what}: expected input of shape (n, {dim}), got {x.shape}")
    return x


@dataclass
class Cache:
    owner: "Layer"
    version: int
    data: dict = field(default_factory=dict)


class Layer:
    """Base class: parameter storage, freezing and cache bookkeeping."""

    kind = "layer"
    needs_gate = False

    def __init__(self, in_dim: int, out_dim: int):
        self.in_dim = int(in_dim)
        self.out_dim = int(out_dim)
        self.params: dict[str, np.ndarray] = {}
        self.masks: dict[str, np.ndarray] = {}
        self.frozen = False
        self._version = 0

    @property
    def param_count(self) -> int:
        total = 0
        for name, p in self.params.items():
            mask = self.masks.get(name)
            total += int(mask.sum()) if mask is not None else p.size
        return total

    def _cache(self, **data) -> Cache:
        return Cache(self, self._version, data)

    def _check(self, cache: Cache) -> dict:
        if not isinstance(cache, Cache) or cache.owner is not self:
            raise StaleCacheError(f"{self.kind}: cache belongs to another layer")
        if cache.version != self._version:
            raise StaleCacheError(f"{self.kind}: parameters changed since forward")
        return cache.data

    def touch(self):
        """Mark parameters as modified; invalidates outstanding caches."""
        self._version += 1

    def set_params(self, **values):
        for name, v in values.items():
            v = np.array(v, dtype=np.float64)
            if v.shape != self.params[name].shape:
                raise ShapeError(
                    f"{self.kind}.{name}: expected shape {self.params[name].shape}, got {v.shape}"
                )
            if name in self.masks:
                v = np.where(self.masks[name], v, 0.0)
            self.params[name] = v
        self.touch()

    def sgd_step(self, grads: dict, lr: float):
        if self.frozen:
            return
        for name, g in grads.items():
            if name in self.masks:
                g = np.where(self.masks[name], g, 0.0)
            self.params[name] -= lr * g
        self.touch()

    def forward(self, x, gate=None):
        raise NotImplementedError

    def backward(self, cache, grad_out):
        raise NotImplementedError

    def __repr__(self):
        return f"{type(self).__name__}({self.in_dim}->{self.out_dim})"


class Affine(Layer):
    kind = "affine"

    def __init__(self, in_dim, out_dim, rng=None, weight=None, bias=None):
        super().__init__(in_dim, out_dim)
        if weight is None:
            weight = glorot_array(out_dim, in_dim, rng) if rng is not None else np.zeros((out_dim, in_dim))
        self.params["W"] = np.array(weight, dtype=np.float64).reshape(out_dim, in_dim)
        self.params["b"] = np.zeros(out_dim) if bias is None else np.array(bias, dtype=np.float64)

    def forward(self, x, gate=None):
        x = _as_batch(x, self.in_dim, "affine")
        return x @ self.params["W"].T + self.params["b"], self._cache(x=x)

    def backward(self, cache, grad_out):
        x = self._check(cache)["x"]
        grads = {"W": grad_out.T @ x, "b": grad_out.sum(axis=0)}
        return grad_out @ self.params["W"], grads


class ContextAffine(Layer):
    """Sum of ``2K+1`` independent affine maps over a flattened context window.

    This is the single-expert limit of the contextual mixture layer and
    serves as its reference in collapse tests.
    """

    kind = "context_affine"

    def __init__(self, frame_dim, out_dim, context, rng=None):
        self.frame_dim = int(frame_dim)
        self.context = int(context)
        width = 2 * self.context + 1
        super().__init__(width * self.frame_dim, out_dim)
        self.params["W"] = np.stack(
            [glorot_array(out_dim, frame_dim, rng) if rng is not None else np.zeros((out_dim, frame_dim))
             for _ in range(width)]
        )
        self.params["b"] = np.zeros((width, out_dim))

    def forward(self, x, gate=None):
        x = _as_batch(x, self.in_dim, "context_affine")
        n, width = x.shape[0], 2 * self.context + 1
        xw = x.reshape(n, width, self.frame_dim)
        y = np.zeros((n, self.out_dim))
        for j in range(width):
            y += xw[:, j] @ self.params["W"][j].T + self.params["b"][j]
        return y, self._cache(x=xw)

    def backward(self, cache, grad_out):
        xw = self._check(cache)["x"]
        width = xw.shape[1]
        gW = np.stack([grad_out.T @ xw[:, j] for j in range(width)])
        gb = np.broadcast_to(grad_out.sum(axis=0), (width, self.out_dim)).copy()
        gx = np.stack([grad_out @ self.params["W"][j] for j in range(width)], axis=1)
        return gx.reshape(xw.shape[0], -1), {"W": gW, "b": gb}


class Relu(Layer):
    kind = "relu"

    def __init__(self, dim):
        super().__init__(dim, dim)

    def forward(self, x, gate=None):
        x = _as_batch(x, self.in_dim, "relu")
        return np.maximum(x, 0.0), self._cache(mask=x > 0)

    def backward(self, cache, grad_out):
        return grad_out * self._check(cache)["mask"], {}


class Softmax(Layer):
    """Plain softmax activation (used for gate outputs, not for the loss)."""

    kind = "softmax"

    def __init__(self, dim):
        super().__init__(dim, dim)

    def forward(self, x, gate=None):
        p = softmax(_as_batch(x, self.in_dim, "softmax"))
        return p, self._cache(p=p)

    def backward(self, cache, grad_out):
        return _softmax_backward(self._check(cache)["p"], grad_out), {}


class ContextualMoELayer(Layer):
    """Mixture of context-window affine experts weighted by an external gate.

    For gate weights ``alpha`` (one per expert) and a window
    ``x(t-K) .. x(t+K)``::

        y(t) = sum_i alpha_i * sum_j (A[i, j] @ x(t+j) + b[i, j])

    Inputs are flattened windows of shape ``(n, (2K+1) * frame_dim)``.

    Parameters
    ----------
    n_experts : int
        Number of experts (one per gate class).
    context : int
        Context radius ``K``.
    frame_dim, out_dim : int
        Per-frame input size and output size of every ``A[i, j]``.
    rng : numpy.random.Generator, optional
        Glorot initialization source; zeros when omitted.
    """

    kind = "contextual_moe"
    needs_gate = True

    def __init__(self, n_experts, context, frame_dim, out_dim, rng=None):
        self.n_experts = int(n_experts)
        self.context = int(context)
        self.frame_dim = int(frame_dim)
        width = 2 * self.context + 1
        super().__init__(width * self.frame_dim, out_dim)
        shape = (self.n_experts, width, out_dim, self.frame_dim)
        if rng is None:
            A = np.zeros(shape)
        else:
            A = np.stack([np.stack([glorot_array(out_dim, frame_dim, rng) for _ in range(width)])
                          for _ in range(self.n_experts)])
        self.params["A"] = A
        self.params["b"] = np.zeros((self.n_experts, width, out_dim))

    def _flat_weights(self):
        # rows: (expert, out); cols: (position, in)
        C, J, O, D = self.params["A"].shape
        return self.params["A"].transpose(0, 2, 1, 3).reshape(C * O, J * D)

    def forward(self, x, gate=None):
        x = _as_batch(x, self.in_dim, "contextual_moe")
        if gate is None:
            raise ShapeError("contextual_moe: a gate of shape (n, n_experts) is required")
        gate = validate_gate(gate, self.n_experts, x.shape[0])
        n = x.shape[0]
        E = (x @ self._flat_weights().T).reshape(n, self.n_experts, self.out_dim)
        E += self.params["b"].sum(axis=1)
        y = np.einsum("nc,nco->no", gate, E)
        return y, self._cache(x=x, gate=gate, E=E)

    def backward(self, cache, grad_out):
        d = self._check(cache)
        x, gate, E = d["x"], d["gate"], d["E"]
        n = x.shape[0]
        grad_gate = np.einsum("nco,no->nc", E, grad_out)
        gE = (gate[:, :, None] * grad_out[:, None, :]).reshape(n, -1)
        C, J, O, D = self.params["A"].shape
        gA = (gE.T @ x).reshape(C, O, J, D).transpose(0, 2, 1, 3)
        gb = np.repeat(gE.sum(axis=0).reshape(C, 1, O), J, axis=1)
        grad_in = gE @ self._flat_weights()
        cache.data["grad_gate"] = grad_gate
        return grad_in, {"A": gA, "b": gb}


def _expert_array(e, in_dim=None):
    if isinstance(e, BandedMatrix):
        return e.densify(), e.band
    if isinstance(e, Matrix):
        return e.densify(), None
    a = np.asarray(e, dtype=np.float64)
    return a, None


class GatedMoELayer(Layer):
    """Mixture of affine experts gated by a jointly trained softmax classifier.

    ``z = sum_i beta_i * (B_i @ y + b_i)`` with ``beta = softmax(G @ y + g)``.
    Experts are ``"full"`` (square dense), ``"lowrank"`` (rectangular,
    ``out_dim < in_dim``) or ``"banded"`` (square, nonzeros within
    ``band`` diagonals).  With a single expert no gate is built, since its
    output would be identically one.
    """

    kind = "gated_moe"

    def __init__(self, n_experts, in_dim, out_dim=None, structure="full", band=None, rng=None):
        self.n_experts = int(n_experts)
        self.structure = structure
        self.band = band
        out_dim = in_dim if out_dim is None else out_dim
        if structure == "lowrank" and not out_dim < in_dim:
            raise ShapeError(f"lowrank experts must reduce dimension, got {in_dim}->{out_dim}")
        if structure in ("full", "banded") and out_dim != in_dim:
            raise ShapeError(f"{structure} experts are square, got {in_dim}->{out_dim}")
        if structure not in ("full", "lowrank", "banded"):
            raise ValueError(f"unknown expert structure {structure!r}")
        super().__init__(in_dim, out_dim)
        C = self.n_experts
        if rng is None:
            B = np.zeros((C, out_dim, in_dim))
        else:
            B = np.stack([glorot_array(out_dim, in_dim, rng) for _ in range(C)])
        if structure == "banded":
            mask = np.broadcast_to(band_mask(in_dim, band), B.shape).copy()
            self.masks["B"] = mask
            B = np.where(mask, B, 0.0)
        self.params["B"] = B
        self.params["b"] = np.zeros((C, out_dim))
        if C > 1:
            self.params["G"] = glorot_array(C, in_dim, rng) if rng is not None else np.zeros((C, in_dim))
            self.params["g"] = np.zeros(C)

    @classmethod
    def from_experts(cls, experts, biases=None, gate_weight=None, gate_bias=None):
        """Build from a list of ``Matrix``/``LowRankMatrix``/``BandedMatrix`` experts."""
        arrays = [_expert_array(e) for e in experts]
        out_dim, in_dim = arrays[0][0].shape
        if any(a.shape != (out_dim, in_dim) for a, _ in arrays):
            raise ShapeError("all experts must share one shape")
        bands = {b for _, b in arrays}
        if bands != {None}:
            if len(bands) != 1:
                raise ShapeError("banded experts must share one band")
            structure, band = "banded", bands.pop()
        elif all(isinstance(e, LowRankMatrix) for e in experts) or out_dim < in_dim:
            structure, band = "lowrank", None
        else:
            structure, band = "full", None
        layer = cls(len(experts), in_dim, out_dim, structure, band)
        values = {"B": np.stack([a for a, _ in arrays])}
        if biases is not None:
            values["b"] = biases
        if layer.n_experts > 1:
            if gate_weight is not None:
                values["G"] = gate_weight
            if gate_bias is not None:
                values["g"] = gate_bias
        layer.set_params(**values)
        return layer

    def gate(self, x) -> np.ndarray:
        x = _as_batch(x, self.in_dim, "gated_moe")
        if self.n_experts == 1:
            return np.ones((x.shape[0], 1))
        return softmax(x @ self.params["G"].T + self.params["g"])

    def forward(self, x, gate=None):
        """``gate``, when given, overrides the internal classifier (tests only)."""
        x = _as_batch(x, self.in_dim, "gated_moe")
        n, C = x.shape[0], self.n_experts
        forced = gate is not None
        beta = validate_gate(gate, C, n) if forced else self.gate(x)
        E = (x @ self.params["B"].reshape(C * self.out_dim, self.in_dim).T).reshape(n, C, self.out_dim)
        E += self.params["b"]
        z = np.einsum("nc,nco->no", beta, E)
        return z, self._cache(x=x, beta=beta, E=E, forced=forced)

    def backward(self, cache, grad_out):
        d = self._check(cache)
        x, beta, E = d["x"], d["beta"], d["E"]
        n, C = x.shape[0], self.n_experts
        gE = (beta[:, :, None] * grad_out[:, None, :]).reshape(n, C * self.out_dim)
        gB = (gE.T @ x).reshape(C, self.out_dim, self.in_dim)
        if "B" in self.masks:
            gB *= self.masks["B"]
        grads = {"B": gB, "b": gE.reshape(n, C, self.out_dim).sum(axis=0)}
        grad_in = gE @ self.params["B"].reshape(C * self.out_dim, self.in_dim)
        if C > 1:
            if d["forced"]:
                grads["G"] = np.zeros_like(self.params["G"])
                grads["g"] = np.zeros(C)
            else:
                grad_beta = np.einsum("nco,no->nc", E, grad_out)
                ds = _softmax_backward(beta, grad_beta)
                grads["G"] = ds.T @ x
                grads["g"] = ds.sum(axis=0)
                grad_in = grad_in + ds @ self.params["G"]
        return grad_in, grads


class EigenMoELayer(Layer):
    """Mixture of ReLU experts with a softmax gate reading the same input.

    ``z = sum_i g_i(x) * relu(F_i @ x + f_i)``, ``g = softmax(G @ x + c)``.
    """

    kind = "eigen_moe"

    def __init__(self, n_experts, in_dim, out_dim, rng=None):
        super().__init__(in_dim, out_dim)
        self.n_experts = C = int(n_experts)
        if rng is None:
            self.params["F"] = np.zeros((C, out_dim, in_dim))
        else:
            self.params["F"] = np.stack([glorot_array(out_dim, in_dim, rng) for _ in range(C)])
        self.params["f"] = np.zeros((C, out_dim))
        if C > 1:
            self.params["G"] = glorot_array(C, in_dim, rng) if rng is not None else np.zeros((C, in_dim))
            self.params["g"] = np.zeros(C)

    def gate(self, x):
        if self.n_experts == 1:
            return np.ones((x.shape[0], 1))
        return softmax(x @ self.params["G"].T + self.params["g"])

    def forward(self, x, gate=None):
        x = _as_batch(x, self.in_dim, "eigen_moe")
        n, C = x.shape[0], self.n_experts
        forced = gate is not None
        g = validate_gate(gate, C, n) if forced else self.gate(x)
        P = (x @ self.params["F"].reshape(C * self.out_dim, self.in_dim).T).reshape(n, C, self.out_dim)
        P += self.params["f"]
        H = np.maximum(P, 0.0)
        z = np.einsum("nc,nco->no", g, H)
        return z, self._cache(x=x, g=g, P=P, H=H, forced=forced)

    def backward(self, cache, grad_out):
        d = self._check(cache)
        x, g, P, H = d["x"], d["g"], d["P"], d["H"]
        n, C = x.shape[0], self.n_experts
        dP = (g[:, :, None] * grad_out[:, None, :]) * (P > 0)
        dP_flat = dP.reshape(n, C * self.out_dim)
        grads = {
            "F": (dP_flat.T @ x).reshape(C, self.out_dim, self.in_dim),
            "f": dP.sum(axis=0),
        }
        grad_in = dP_flat @ self.params["F"].reshape(C * self.out_dim, self.in_dim)
        if C > 1:
            if d["forced"]:
                grads["G"] = np.zeros_like(self.params["G"])
                grads["g"] = np.zeros(C)
            else:
                ds = _softmax_backward(g, np.einsum("nco,no->nc", H, grad_out))
                grads["G"] = ds.T @ x
                grads["g"] = ds.sum(axis=0)
                grad_in = grad_in + ds @ self.params["G"]
        return grad_in, grads


class SoftmaxCrossEntropy:
    """Loss head: mean cross-entropy over the batch."""

    kind = "softmax_ce"

    def __init__(self, n_classes):
        self.n_classes = int(n_classes)
        self.in_dim = self.out_dim = self.n_classes

    def forward(self, logits, targets=None):
        logits = _as_batch(logits, self.n_classes, "softmax_ce")
        if not np.all(np.isfinite(logits)):
            raise FloatingPointError("softmax_ce: non-finite logits")
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        log_p = shifted - log_z
        post = np.exp(log_p)
        if targets is None:
            return None, post, None
        targets = np.asarray(targets, dtype=np.int64)
        if targets.shape != (logits.shape[0],):
            raise ShapeError(f"softmax_ce: expected {logits.shape[0]} targets, got {targets.shape}")
        if targets.min(initial=0) < 0 or targets.max(initial=0) >= self.n_classes:
            raise ValueError(f"softmax_ce: targets must lie in [0, {self.n_classes})")
        n = logits.shape[0]
        loss = -log_p[np.arange(n), targets].sum() / n
        grad = post.copy()
        grad[np.arange(n), targets] -= 1.0
        return loss, post, grad / n


def softmax_ce(logits, target: int):
    """Single-example cross-entropy: ``(loss, grad_logits, posteriors)``."""
    logits = np.asarray(logits, dtype=np.float64)
    head = SoftmaxCrossEntropy(logits.shape[0])
    loss, post, grad = head.forward(logits[None, :], [target])
    return loss, grad[0], post[0]


class LayerStack:
    """Ordered layers ending in a softmax cross-entropy head.

    Dimensions are checked at construction.  A stack whose first layer is a
    :class:`ContextualMoELayer` takes a gate matrix alongside its input.
    """

    def __init__(self, layers, n_classes, input_dim=None):
        self.layers = list(layers)
        self.head = SoftmaxCrossEntropy(n_classes)
        if not self.layers:
            raise ShapeError("a stack needs at least one layer")
        self.input_dim = self.layers[0].in_dim if input_dim is None else int(input_dim)
        prev = self.input_dim
        for i, layer in enumerate(self.layers):
            if layer.in_dim != prev:
                raise ShapeError(f"layer {i} ({layer.kind}) expects {layer.in_dim} inputs, gets {prev}")
            if layer.needs_gate and i != 0:
                raise ShapeError("a contextual MoE layer must come first")
            prev = layer.out_dim
        if prev != n_classes:
            raise ShapeError(f"final layer emits {prev} values for {n_classes} classes")

    @property
    def needs_gate(self) -> bool:
        return self.layers[0].needs_gate

    @property
    def param_count(self) -> int:
        return sum(layer.param_count for layer in self.layers)

    def named_params(self):
        for i, layer in enumerate(self.layers):
            for name in sorted(layer.params):
                yield f"{i}.{layer.kind}.{name}", layer, name

    def forward(self, x, targets=None, gate=None):
        """Return ``(loss, posteriors, caches)``; ``loss`` is None without targets."""
        if self.needs_gate and gate is None:
            raise ShapeError("this stack starts with a contextual MoE and needs a gate")
        caches = []
        h = x
        for layer in self.layers:
            h, cache = layer.forward(h, gate if layer.needs_gate else None)
            caches.append(cache)
        loss, post, grad = self.head.forward(h, targets)
        caches.append(grad)
        return loss, post, caches

    def activations(self, x, gate=None):
        """Inputs followed by each layer's output; index 0 is ``x`` itself."""
        outs = [np.asarray(x, dtype=np.float64)]
        h = outs[0]
        for layer in self.layers:
            h, _ = layer.forward(h, gate if layer.needs_gate else None)
            outs.append(h)
        return outs

    def backward(self, caches):
        """Return ``(per-layer grads, grad_input, grad_gate)``.

        Frozen layers still propagate ``grad_in``; their parameter grads are
        dropped.
        """
        if caches[-1] is None:
            raise ValueError("backward needs a forward pass with targets")
        return self.backward_from(caches, caches[-1])

    def backward_from(self, caches, grad_out):
        """Backpropagate ``grad_out`` (gradient wrt the final layer output)."""
        g = grad_out
        grads = [None] * len(self.layers)
        grad_gate = None
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            g, pg = layer.backward(caches[i], g)
            grads[i] = {} if layer.frozen else pg
            if layer.needs_gate:
                grad_gate = caches[i].data["grad_gate"]
        return grads, g, grad_gate

    def sgd_step(self, grads, lr):
        for layer, g in zip(self.layers, grads):
            if g:
                layer.sgd_step(g, lr)

    def predict_proba(self, x, gate=None):
        return self.forward(x, None, gate)[1]


# single-example entry points -------------------------------------------------

def contextual_moe_forward(layer: ContextualMoELayer, window, gate):
    """Apply to one ``(2K+1, frame_dim)`` window; returns ``(y, cache)``."""
    window = np.asarray(window, dtype=np.float64)
    width = 2 * layer.context + 1
    if window.shape != (width, layer.frame_dim):
        raise ShapeError(f"window: expected shape {(width, layer.frame_dim)}, got {window.shape}")
    y, cache = layer.forward(window.reshape(1, -1), np.asarray(gate, dtype=np.float64)[None, :])
    return y[0], cache


def contextual_moe_backward(layer: ContextualMoELayer, cache, grad_out):
    """Returns ``(grad_window, grad_gate, grads)`` for one example."""
    grad_in, grads = layer.backward(cache, np.asarray(grad_out, dtype=np.float64)[None, :])
    width = 2 * layer.context + 1
    return grad_in.reshape(width, layer.frame_dim), cache.data["grad_gate"][0], grads


def gated_moe_forward(layer: GatedMoELayer, y_prev, gate=None):
    z, cache = layer.forward(np.asarray(y_prev, dtype=np.float64)[None, :],
                             None if gate is None else np.asarray(gate)[None, :])
    return z[0], cache


def gated_moe_backward(layer: GatedMoELayer, cache, grad_out):
    grad_in, grads = layer.backward(cache, np.asarray(grad_out, dtype=np.float64)[None, :])
    return grad_in[0], grads


def eigen_moe_forward(layer: EigenMoELayer, x, gate=None):
    z, cache = layer.forward(np.asarray(x, dtype=np.float64)[None, :],
                             None if gate is None else np.asarray(gate)[None, :])
    return z[0], cache


# finite-difference checking -------------------------------------------------

@dataclass
class GradCheckReport:
    tolerance: float
    n_checked: int = 0
    worst_error: float = 0.0
    worst_name: str = ""
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def record(self, name, analytic, numeric):
        err = abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))
        self.n_checked += 1
        if err > self.worst_error or not self.worst_name:
            self.worst_error, self.worst_name = err, name
        if not err <= self.tolerance:
            self.failures.append((name, analytic, numeric, err))


def _random_gate(rng, n, c):
    return rng.dirichlet(np.ones(c), size=n)


def grad_check(target, rng, tolerance=1e-6, step=1e-5, n=3, backward=None) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``target`` is a :class:`Layer` (objective: a random linear functional of
    its output) or a :class:`LayerStack` (objective: its loss).  Every
    parameter entry, input coordinate and, for gated inputs, gate weight is
    checked.  ``backward`` substitutes the analytic gradient routine; it
    exists so that a broken gradient can be shown to be caught.
    """
    report = GradCheckReport(tolerance)
    is_stack = isinstance(target, LayerStack)
    in_dim = target.input_dim if is_stack else target.in_dim
    x = rng.standard_normal((n, in_dim))
    needs_gate = target.needs_gate
    n_gate = target.layers[0].n_experts if is_stack and needs_gate else getattr(target, "n_experts", 0)
    gate = _random_gate(rng, n, n_gate) if needs_gate else None

    if is_stack:
        y = rng.integers(0, target.head.n_classes, size=n)

        def objective(x_, gate_):
            return target.forward(x_, y, gate_)[0]

        _, _, caches = target.forward(x, y, gate)
        frozen = [layer.frozen for layer in target.layers]
        for layer in target.layers:
            layer.frozen = False
        try:
            if backward is not None:
                grads, gx, ggate = backward(target, caches)
            else:
                grads, gx, ggate = target.backward(caches)
        finally:
            for layer, f in zip(target.layers, frozen):
                layer.frozen = f
        entries = [(f"{i}.{layer.kind}.{name}", layer, name, grads[i][name])
                   for i, layer in enumerate(target.layers) for name in sorted(layer.params)]
    else:
        r = rng.standard_normal((n, target.out_dim))

        def objective(x_, gate_):
            return float((target.forward(x_, gate_)[0] * r).sum())

        _, cache = target.forward(x, gate)
        if backward is not None:
            gx, grads = backward(target, cache, r)
        else:
            gx, grads = target.backward(cache, r)
        ggate = cache.data["grad_gate"] if needs_gate else None
        entries = [(f"{target.kind}.{name}", target, name, grads[name]) for name in sorted(target.params)]

    def central(fn):
        return (fn(+step) - fn(-step)) / (2 * step)

    for label, layer, name, g in entries:
        p = layer.params[name]
        mask = layer.masks.get(name)
        for idx in np.ndindex(p.shape):
            if mask is not None and not mask[idx]:
                continue
            orig = p[idx]

            def bump(h):
                p[idx] = orig + h
                val = objective(x, gate)
                p[idx] = orig
                return val

            report.record(f"{label}{list(idx)}", g[idx], central(bump))

    for idx in np.ndindex(x.shape):
        orig = x[idx]

        def bump(h):
            x[idx] = orig + h
            val = objective(x, gate)
            x[idx] = orig
            return val

        report.record(f"input{list(idx)}", gx[idx], central(bump))

    if gate is not None:
        # coordinates move independently, so the step must stay inside the simplex tolerance
        gate_step = min(step, GATE_TOL / 10)
        for idx in np.ndindex(gate.shape):
            orig = gate[idx]

            def bump(h):
                gate[idx] = orig + h
                val = objective(x, gate)
                gate[idx] = orig
                return val

            numeric = (bump(gate_step) - bump(-gate_step)) / (2 * gate_step)
            report.record(f"gate{list(idx)}", ggate[idx], numeric)
    return report
