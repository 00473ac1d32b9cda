"""Feed-forward network substrate: forward/backward passes, Adam, losses.

Everything is plain float64 numpy. Networks are small MLPs described by an
:class:`MlpSpec`; parameters live in :class:`MlpParams` and are updated
functionally (operations return new containers rather than mutating).
Gradients are exact analytic backpropagation through the fixed MLP topology,
verified against central finite differences in the test suite.

Parameter snapshots serialize to a versioned JSON document holding the spec
plus one flat row-major array per weight matrix (row ``i`` of a weight matrix
holds the incoming coefficients of output unit ``i``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .base import NumericalError, check_same_shape

LEAKY_RELU_SLOPE = 0.01
ELU_ALPHA = 1.0
LAYER_NORM_EPS = 1e-6
LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0

ACTIVATIONS = ("leaky_relu", "elu", "identity")

SNAPSHOT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    """Architecture of a fully connected network.

    ``layer_sizes`` runs input width .. output width; ``activation`` is applied
    between hidden layers (the output layer is always linear). When
    ``layer_norm`` is set, each hidden pre-activation is normalized across its
    features (no learned scale/bias) before the activation.
    """

    layer_sizes: tuple[int, ...]
    activation: str = "leaky_relu"
    final_activation: str = "identity"
    layer_norm: bool = False

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise ValueError("layer_sizes needs at least input and output widths")
        if any(s < 1 for s in sizes):
            raise ValueError(f"all layer widths must be >= 1, got {sizes}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.final_activation != "identity":
            raise ValueError("only an identity output layer is supported")

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    @property
    def in_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def out_dim(self) -> int:
        return self.layer_sizes[-1]


@dataclass
class MlpParams:
    """Per-layer weight matrices (out x in) and bias vectors for a spec."""

    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self):
        if len(self.weights) != self.spec.n_layers or len(self.biases) != self.spec.n_layers:
            raise ValueError("parameter count does not match spec depth")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            want = (self.spec.layer_sizes[i + 1], self.spec.layer_sizes[i])
            if w.shape != want:
                raise ValueError(f"layer {i} weight shape {w.shape}, expected {want}")
            if b.shape != (want[0],):
                raise ValueError(f"layer {i} bias shape {b.shape}, expected ({want[0]},)")

    def arrays(self) -> list[np.ndarray]:
        """All parameter arrays in a fixed (w0, b0, w1, b1, ...) order."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def copy(self) -> "MlpParams":
        return MlpParams(self.spec, [w.copy() for w in self.weights],
                         [b.copy() for b in self.biases])

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays())


def _activation(name: str, z: np.ndarray) -> np.ndarray:
    if name == "leaky_relu":
        return np.where(z > 0, z, LEAKY_RELU_SLOPE * z)
    if name == "elu":
        return np.where(z > 0, z, ELU_ALPHA * (np.exp(np.minimum(z, 0.0)) - 1.0))
    return z


def _activation_grad(name: str, z: np.ndarray) -> np.ndarray:
    if name == "leaky_relu":
        return np.where(z > 0, 1.0, LEAKY_RELU_SLOPE)
    if name == "elu":
        return np.where(z > 0, 1.0, ELU_ALPHA * np.exp(np.minimum(z, 0.0)))
    return np.ones_like(z)


def init_params(spec: MlpSpec, rng: np.random.Generator,
                sparsity: float = 0.0) -> MlpParams:
    """Initialize weights uniformly in +-1/sqrt(fan_in); biases start at zero.

    With ``sparsity`` in (0, 1), each output unit keeps exactly
    ``ceil((1 - sparsity) * fan_in)`` nonzero incoming weights at positions
    chosen uniformly per unit; the rest are structural zeros.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ValueError(f"sparsity must be in [0, 1), got {sparsity}")
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_sizes[:-1], spec.layer_sizes[1:]):
        bound = 1.0 / math.sqrt(fan_in)
        w = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        if sparsity > 0.0:
            keep = math.ceil((1.0 - sparsity) * fan_in)
            mask = np.zeros((fan_out, fan_in))
            for row in range(fan_out):
                mask[row, rng.permutation(fan_in)[:keep]] = 1.0
            w *= mask
        weights.append(w)
        biases.append(np.zeros(fan_out))
    return MlpParams(spec, weights, biases)


def _layer_norm_forward(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + LAYER_NORM_EPS)
    return (z - mu) * inv_std, inv_std


def _layer_norm_backward(y: np.ndarray, inv_std: np.ndarray,
                         grad: np.ndarray) -> np.ndarray:
    g_mean = grad.mean(axis=-1, keepdims=True)
    gy_mean = (grad * y).mean(axis=-1, keepdims=True)
    return (grad - g_mean - y * gy_mean) * inv_std


def layer_norm(x: np.ndarray, eps: float = LAYER_NORM_EPS) -> np.ndarray:
    """Normalize across the last axis to zero mean / unit variance, no affine."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] < 2:
        raise ValueError("layer_norm needs at least 2 features")
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps)


def _check_input(params: MlpParams, x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    batch = x[None, :] if single else x
    if batch.ndim != 2 or batch.shape[1] != params.spec.in_dim:
        raise ValueError(
            f"input shape {x.shape} incompatible with network input width "
            f"{params.spec.in_dim}"
        )
    return batch, single


def _forward_trace(params: MlpParams, x: np.ndarray):
    """Run the network keeping the per-layer values backprop needs."""
    spec = params.spec
    inputs = [x]      # input to each affine layer
    pre_acts = []     # value fed to the activation (post layer-norm if any)
    ln_caches = []    # (y, inv_std) per hidden layer, or None
    h = x
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = h @ w.T + b
        if i == spec.n_layers - 1:
            h = z
            break
        if spec.layer_norm:
            y, inv_std = _layer_norm_forward(z)
            ln_caches.append((y, inv_std))
            z = y
        else:
            ln_caches.append(None)
        pre_acts.append(z)
        h = _activation(spec.activation, z)
        inputs.append(h)
    return inputs, pre_acts, ln_caches, h


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on a vector or a batch of row vectors."""
    batch, single = _check_input(params, x)
    *_, out = _forward_trace(params, batch)
    return out[0] if single else out


def mlp_backward(params: MlpParams, x, output_gradient) -> tuple[MlpParams, np.ndarray]:
    """Backpropagate ``output . output_gradient`` through the network.

    Returns the exact gradients with respect to every parameter (packed in an
    ``MlpParams``-shaped container) and with respect to the input. Batched
    inputs accumulate parameter gradients over rows.
    """
    batch, single = _check_input(params, x)
    g = np.asarray(output_gradient, dtype=np.float64)
    g = g[None, :] if single else g
    if g.shape != (batch.shape[0], params.spec.out_dim):
        raise ValueError(
            f"output_gradient shape {np.shape(output_gradient)} incompatible "
            f"with output width {params.spec.out_dim}"
        )
    inputs, pre_acts, ln_caches, _ = _forward_trace(params, batch)

    spec = params.spec
    grad_w = [None] * spec.n_layers
    grad_b = [None] * spec.n_layers
    for i in reversed(range(spec.n_layers)):
        if i < spec.n_layers - 1:
            g = g * _activation_grad(spec.activation, pre_acts[i])
            if spec.layer_norm:
                y, inv_std = ln_caches[i]
                g = _layer_norm_backward(y, inv_std, g)
        grad_w[i] = g.T @ inputs[i]
        grad_b[i] = g.sum(axis=0)
        g = g @ params.weights[i]
    grads = MlpParams(spec, grad_w, grad_b)
    return grads, (g[0] if single else g)


@dataclass
class AdamState:
    """Adam accumulators; shapes mirror the parameters they update."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v],
                         self.t, self.learning_rate, self.beta1, self.beta2,
                         self.epsilon)


def adam_init(params: MlpParams, learning_rate: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, epsilon: float = 1e-8) -> AdamState:
    zeros = [np.zeros_like(a) for a in params.arrays()]
    return AdamState([z.copy() for z in zeros], zeros, 0, learning_rate,
                     beta1, beta2, epsilon)


def adam_step(params: MlpParams, grads: MlpParams,
              state: AdamState) -> tuple[MlpParams, AdamState]:
    """One bias-corrected Adam update; rejects non-finite gradients."""
    p_arrays = params.arrays()
    g_arrays = grads.arrays()
    if len(state.m) != len(p_arrays):
        raise ValueError("optimizer state does not match parameter structure")
    for g, p in zip(g_arrays, p_arrays):
        check_same_shape(g, p, "gradient, parameter")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient; step rejected")

    t = state.t + 1
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(p_arrays, g_arrays, state.m, state.v):
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        step = state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        new_m.append(m)
        new_v.append(v)
        new_p.append(p - step)
    n = params.spec.n_layers
    updated = MlpParams(params.spec, new_p[0::2][:n], new_p[1::2][:n])
    new_state = AdamState(new_m, new_v, t, state.learning_rate, state.beta1,
                          state.beta2, state.epsilon)
    return updated, new_state


def gaussian_nll(mean, log_variance, target):
    """Heteroscedastic Gaussian negative log-likelihood and its gradients.

    Per sample the loss is ``sum_d (mean_d - target_d)^2 * exp(-lv_d) + lv_d``
    with the log-variance clamped to [LOGVAR_MIN, LOGVAR_MAX] before
    exponentiation (the clamp is part of the differentiated function). 2-D
    inputs are treated as batches of rows and the loss is averaged over rows.

    Returns ``(loss, grad_mean, grad_log_variance)``.
    """
    mean = np.asarray(mean, dtype=np.float64)
    lv_raw = np.asarray(log_variance, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    check_same_shape(mean, lv_raw, "mean, log_variance")
    check_same_shape(mean, target, "mean, target")

    lv = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
    inside = (lv_raw >= LOGVAR_MIN) & (lv_raw <= LOGVAR_MAX)
    inv_var = np.exp(-lv)
    resid = mean - target
    per_elem = resid * resid * inv_var + lv

    scale = 1.0 if mean.ndim == 1 else 1.0 / mean.shape[0]
    loss = float(per_elem.sum() * scale)
    grad_mean = 2.0 * resid * inv_var * scale
    grad_lv = (1.0 - resid * resid * inv_var) * inside * scale
    return loss, grad_mean, grad_lv


def mse(pred, target):
    """Mean squared error over all components, with its gradient."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    check_same_shape(pred, target, "pred, target")
    diff = pred - target
    loss = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size
    return loss, grad


class RunningMoments:
    """Streaming per-dimension mean/variance (Welford updates).

    ``variance`` is the population variance of everything seen so far, so n
    single-sample updates reproduce the batch statistics of those n samples.
    """

    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros(dim)

    def update(self, x) -> None:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != self.mean.shape:
            raise ValueError(f"sample shape {x.shape} != moments dim {self.mean.shape}")
        self.count += 1
        delta = x - self.mean
        self.mean = self.mean + delta / self.count
        self._m2 = self._m2 + delta * (x - self.mean)

    @property
    def variance(self) -> np.ndarray:
        if self.count == 0:
            return np.zeros_like(self._m2)
        return self._m2 / self.count

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)

    def copy(self) -> "RunningMoments":
        out = RunningMoments(self.mean.shape[0])
        out.count = self.count
        out.mean = self.mean.copy()
        out._m2 = self._m2.copy()
        return out


def spec_to_doc(spec: MlpSpec) -> dict:
    return {
        "layer_sizes": list(spec.layer_sizes),
        "activation": spec.activation,
        "final_activation": spec.final_activation,
        "layer_norm": spec.layer_norm,
    }


def spec_from_doc(doc: dict) -> MlpSpec:
    return MlpSpec(
        layer_sizes=tuple(doc["layer_sizes"]),
        activation=doc["activation"],
        final_activation=doc.get("final_activation", "identity"),
        layer_norm=doc.get("layer_norm", False),
    )


def params_to_doc(params: MlpParams) -> dict:
    """Serialize parameters to a versioned JSON-ready document.

    Weight matrices are flattened row-major: row i of a matrix (the incoming
    weights of output unit i) occupies positions [i * fan_in, (i+1) * fan_in).
    """
    return {
        "format": "mlp-params",
        "version": SNAPSHOT_VERSION,
        "spec": spec_to_doc(params.spec),
        "layers": [
            {"weight": w.ravel(order="C").tolist(), "bias": b.tolist()}
            for w, b in zip(params.weights, params.biases)
        ],
    }


def params_from_doc(doc: dict) -> MlpParams:
    if doc.get("format") != "mlp-params":
        raise ValueError(f"not an mlp-params document: format={doc.get('format')!r}")
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    spec = spec_from_doc(doc["spec"])
    weights, biases = [], []
    for i, layer in enumerate(doc["layers"]):
        shape = (spec.layer_sizes[i + 1], spec.layer_sizes[i])
        weights.append(np.asarray(layer["weight"], dtype=np.float64).reshape(shape))
        biases.append(np.asarray(layer["bias"], dtype=np.float64))
    return MlpParams(spec, weights, biases)
