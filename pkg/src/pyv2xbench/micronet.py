"""
Minimal dense networks with reverse-mode gradients and Adam.

Parameters of a network live in one flat float64 array; per-layer weight and
bias arrays are views into it, so optimizers, soft updates and checkpoints
operate on a single vector.
"""

from __future__ import annotations

import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .exceptions import ShapeMismatchError

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "pyv2xbench-ckpt"
HEADS = ("linear", "softmax")


@dataclass
class ForwardCache:
    """Activations recorded by :meth:`DenseNetwork.forward`."""

    inputs: list[np.ndarray] = field(default_factory=list)
    pre_activations: list[np.ndarray] = field(default_factory=list)
    output: np.ndarray | None = None
    batched: bool = True


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=-1, keepdims=True)


class DenseNetwork:
    """
    Fully connected network: ReLU hidden layers and a linear or softmax head.

    Inputs may be a single vector or a (batch, input) matrix.
    """

    def __init__(
        self,
        layer_sizes: Sequence[int],
        head: str = "linear",
        rng: np.random.Generator | int | None = None,
        theta: np.ndarray | None = None,
    ) -> None:
        """
        Initialize a network.

        Args:
            layer_sizes: Input, hidden and output widths, at least two entries
            head: ``linear`` or ``softmax``
            rng: Generator or seed for uniform fan-in initialization
            theta: Flat parameters to use instead of a random initialization

        Raises:
            ShapeMismatchError: If the layer sizes or ``theta`` are inconsistent
        """
        sizes = [int(s) for s in layer_sizes]
        if len(sizes) < 2 or min(sizes) < 1:
            raise ShapeMismatchError(f"invalid layer sizes {sizes}")
        if head not in HEADS:
            raise ShapeMismatchError(f"unknown head {head!r}, expected one of {HEADS}")
        self.layer_sizes = sizes
        self.head = head
        self._shapes = list(zip(sizes[:-1], sizes[1:], strict=True))
        n_params = sum(fan_in * fan_out + fan_out for fan_in, fan_out in self._shapes)

        if theta is not None:
            theta = np.asarray(theta, dtype=np.float64)
            if theta.shape != (n_params,):
                raise ShapeMismatchError(
                    f"parameter vector has shape {theta.shape}, expected ({n_params},)"
                )
            self.theta = theta.copy()
        else:
            gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
            self.theta = np.empty(n_params)
            offset = 0
            for fan_in, fan_out in self._shapes:
                size = fan_in * fan_out + fan_out
                bound = 1.0 / np.sqrt(fan_in)
                self.theta[offset : offset + size] = gen.uniform(-bound, bound, size)
                offset += size
        self._bind_views()

    def _bind_views(self) -> None:
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        offset = 0
        for fan_in, fan_out in self._shapes:
            w_end = offset + fan_in * fan_out
            self.weights.append(self.theta[offset:w_end].reshape(fan_in, fan_out))
            self.biases.append(self.theta[w_end : w_end + fan_out])
            offset = w_end + fan_out

    @property
    def n_params(self) -> int:
        return int(self.theta.size)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def output_dim(self) -> int:
        return self.layer_sizes[-1]

    def copy(self) -> DenseNetwork:
        return DenseNetwork(self.layer_sizes, self.head, theta=self.theta)

    def set_parameters(self, theta: np.ndarray) -> None:
        """Overwrite the parameters in place, keeping the layer views valid."""
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != self.theta.shape:
            raise ShapeMismatchError(
                f"parameter vector has shape {theta.shape}, expected {self.theta.shape}"
            )
        self.theta[:] = theta

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        """
        Evaluate the network and record the activations needed by backward.

        Raises:
            ShapeMismatchError: If the input width does not match
        """
        batch = np.asarray(x, dtype=np.float64)
        batched = batch.ndim == 2
        if not batched:
            batch = batch[None, :]
        if batch.ndim != 2 or batch.shape[1] != self.input_dim:
            raise ShapeMismatchError(
                f"input has shape {np.shape(x)}, expected (..., {self.input_dim})"
            )
        cache = ForwardCache(batched=batched)
        activation = batch
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases, strict=True)):
            cache.inputs.append(activation)
            z = activation @ w + b
            cache.pre_activations.append(z)
            activation = np.maximum(z, 0.0) if k < last else z
        if self.head == "softmax":
            activation = softmax(activation)
        cache.output = activation
        return (activation if batched else activation[0]), cache

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(
        self,
        cache: ForwardCache | None,
        grad_output: np.ndarray,
        pre_activation: bool = False,
    ) -> tuple[np.ndarray, np.ndarray]:
        """
        Reverse-mode gradients of a scalar loss.

        Args:
            cache: Cache from the matching forward call
            grad_output: dLoss/dOutput, same shape as the forward output
            pre_activation: ``grad_output`` is taken w.r.t. the head input
                (logits) rather than the softmax probabilities

        Returns:
            Tuple of the flat parameter gradient and the input gradient

        Raises:
            ShapeMismatchError: If the cache is missing or shapes disagree
        """
        if cache is None or cache.output is None:
            raise ShapeMismatchError("backward called without a forward cache")
        grad = np.asarray(grad_output, dtype=np.float64)
        if not cache.batched:
            grad = grad[None, :]
        if grad.shape != cache.output.shape:
            raise ShapeMismatchError(
                f"output gradient has shape {grad.shape}, expected {cache.output.shape}"
            )
        if self.head == "softmax" and not pre_activation:
            probs = cache.output
            grad = probs * (grad - np.sum(grad * probs, axis=-1, keepdims=True))

        grads = np.empty_like(self.theta)
        grad_w = []
        grad_b = []
        for k in range(len(self.weights) - 1, -1, -1):
            if k < len(self.weights) - 1:
                grad = grad * (cache.pre_activations[k] > 0)
            grad_w.append(cache.inputs[k].T @ grad)
            grad_b.append(grad.sum(axis=0))
            grad = grad @ self.weights[k].T
        offset = 0
        for dw, db in zip(reversed(grad_w), reversed(grad_b), strict=True):
            grads[offset : offset + dw.size] = dw.ravel()
            offset += dw.size
            grads[offset : offset + db.size] = db
            offset += db.size
        return grads, (grad if cache.batched else grad[0])


@dataclass
class OptimizerState:
    """Adam moments and step counter of one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    lr: float
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_network(cls, net: DenseNetwork, lr: float, **kwargs: Any) -> OptimizerState:
        return cls(m=np.zeros_like(net.theta), v=np.zeros_like(net.theta), lr=lr, **kwargs)


def adam_step(net: DenseNetwork, grads: np.ndarray, state: OptimizerState) -> DenseNetwork:
    """Bias-corrected Adam update of ``net`` in place."""
    if grads.shape != net.theta.shape or state.m.shape != net.theta.shape:
        raise ShapeMismatchError(
            f"gradient shape {grads.shape} does not match parameters {net.theta.shape}"
        )
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads**2
    m_hat = state.m / (1.0 - state.beta1**state.step)
    v_hat = state.v / (1.0 - state.beta2**state.step)
    net.theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return net


def soft_update(target: DenseNetwork, online: DenseNetwork, tau: float) -> DenseNetwork:
    """Polyak averaging target <- (1 - tau) target + tau online, in place."""
    if target.theta.shape != online.theta.shape:
        raise ShapeMismatchError(
            f"target {target.layer_sizes} and online {online.layer_sizes} differ"
        )
    target.theta[:] = (1.0 - tau) * target.theta + tau * online.theta
    return target


def clip_grad_norm(grads: np.ndarray, max_norm: float) -> tuple[np.ndarray, float]:
    """Rescale ``grads`` to at most ``max_norm`` in L2 norm; returns the original norm."""
    norm = float(np.linalg.norm(grads))
    if max_norm > 0 and norm > max_norm:
        return grads * (max_norm / norm), norm
    return grads, norm


def save_checkpoint(
    path: str | Path,
    networks: Mapping[str, DenseNetwork],
    metadata: Mapping[str, Any] | None = None,
) -> Path:
    """
    Write networks as one JSON header line followed by little-endian float64 parameters.

    Networks are stored in the mapping's order.
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "metadata": dict(metadata or {}),
        "networks": [
            {"name": name, "layer_sizes": net.layer_sizes, "head": net.head, "size": net.n_params}
            for name, net in networks.items()
        ],
    }
    body = b"".join(net.theta.astype("<f8").tobytes() for net in networks.values())
    target.write_bytes(json.dumps(header).encode("utf-8") + b"\n" + body)
    logger.debug(f"Saved {len(networks)} networks to {target}")
    return target


def load_checkpoint(path: str | Path) -> tuple[dict[str, DenseNetwork], dict[str, Any]]:
    """
    Read a checkpoint written by :func:`save_checkpoint`.

    Returns:
        Tuple of the networks by name and the stored metadata

    Raises:
        ShapeMismatchError: If the payload size disagrees with the header
    """
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline == -1:
        raise ShapeMismatchError(f"checkpoint {path} has no header line")
    header = json.loads(raw[:newline].decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ShapeMismatchError(f"unknown checkpoint format {header.get('format')!r}")
    payload = raw[newline + 1 :]
    if len(payload) % 8:
        raise ShapeMismatchError(f"checkpoint {path} is truncated mid-parameter")
    params = np.frombuffer(payload, dtype="<f8")
    expected = sum(entry["size"] for entry in header["networks"])
    if params.size != expected:
        raise ShapeMismatchError(
            f"checkpoint holds {params.size} parameters, header declares {expected}"
        )
    networks: dict[str, DenseNetwork] = {}
    offset = 0
    for entry in header["networks"]:
        theta = params[offset : offset + entry["size"]].astype(np.float64)
        networks[entry["name"]] = DenseNetwork(entry["layer_sizes"], entry["head"], theta=theta)
        offset += entry["size"]
    return networks, header.get("metadata", {})
