"""Per-stream encoder (small MLP + linear projection, unit-norm output)
and trainable prototype bank, with explicit forward/backward passes.

The backward pass is exact: it includes the Jacobian of the final l2
normalization, d(v/|v|)/dv = (I - z z^T)/|v| applied per column, so
analytic gradients can be checked against finite differences to 1e-4.
Prototype columns are kept unit-norm by renormalizing after each
optimizer step (the renormalization itself is outside the gradient).

This module also owns the checkpoint container: magic "VCC1",
version u16, then per tensor: name length (u32) + UTF-8 name,
rank (u32), dims (u32 each), float64 little-endian values.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import fileio
from .numerics import Matrix, l2_normalize_cols

CHECKPOINT_MAGIC = b"VCC1"
CHECKPOINT_VERSION = 1


@dataclass
class EncoderParams:
    """Stack of (weight, bias) layers; ReLU between layers, linear last.

    weights[i] has shape (out_i, in_i); an empty stack is the identity
    map.  Forward output is always l2-normalized per column.
    """

    weights: list = field(default_factory=list)
    biases: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.weights) != len(self.biases):
            raise ValueError("weights and biases must pair up")
        for i in range(1, len(self.weights)):
            if self.weights[i].shape[1] != self.weights[i - 1].shape[0]:
                raise ValueError(
                    f"layer {i} expects {self.weights[i].shape[1]} inputs but "
                    f"layer {i - 1} outputs {self.weights[i - 1].shape[0]}"
                )

    @property
    def num_layers(self) -> int:
        return len(self.weights)

    @property
    def input_dim(self):
        return self.weights[0].shape[1] if self.weights else None

    @property
    def output_dim(self):
        return self.weights[-1].shape[0] if self.weights else None

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
        )

    def checksum(self) -> float:
        """Cheap fingerprint used by freeze-contract tests."""
        return float(sum(np.abs(w).sum() + np.abs(b).sum()
                         for w, b in zip(self.weights, self.biases)))


def init_encoder(layer_dims, rng) -> EncoderParams:
    """He-normal init for a dim chain like [32, 64, 64, 128].

    Biases start slightly positive so no sample can reach the final
    normalization with an all-dead activation column.
    """
    weights, biases = [], []
    for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
        scale = np.sqrt(2.0 / fan_in)
        weights.append(rng.normal(0.0, scale, size=(fan_out, fan_in)))
        biases.append(np.full(fan_out, 0.01))
    return EncoderParams(weights=weights, biases=biases)


@dataclass
class ForwardTape:
    """Intermediates cached by forward() so backward() is exact."""

    inputs: list          # inputs[l] feeds layer l; inputs[0] is x
    pre_activations: list  # a_l = W_l @ inputs[l] + b_l
    v: Matrix             # pre-normalization output
    v_norms: np.ndarray   # per-column norms of v
    z: Matrix             # normalized output


def forward(enc: EncoderParams, x: Matrix):
    """Run the encoder; returns (z, tape) with unit-norm z columns."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"input must be 2-D, got shape {x.shape}")
    if enc.num_layers and x.shape[0] != enc.input_dim:
        raise ValueError(
            f"input has {x.shape[0]} rows but encoder expects {enc.input_dim}"
        )
    inputs = [x]
    pre = []
    h = x
    for l, (w, b) in enumerate(zip(enc.weights, enc.biases)):
        a = w @ h + b[:, None]
        pre.append(a)
        if l < enc.num_layers - 1:
            h = np.maximum(a, 0.0)
            inputs.append(h)
    v = pre[-1] if enc.num_layers else x
    norms = np.linalg.norm(v, axis=0)
    if np.any(norms == 0.0):
        raise ValueError("encoder produced a zero output column")
    z = v / norms
    return z, ForwardTape(inputs=inputs, pre_activations=pre, v=v,
                          v_norms=norms, z=z)


def backward(enc: EncoderParams, tape: ForwardTape, grad_z: Matrix):
    """Backpropagate d(loss)/dz to parameter gradients and grad wrt x.

    Returns (grads, grad_x) where grads is a list of (dW, db) aligned
    with enc layers.  The first step removes the radial component:
    grad_v = (grad_z - z (z . grad_z)) / |v| per column.
    """
    grad_z = np.asarray(grad_z, dtype=np.float64)
    if grad_z.shape != tape.z.shape:
        raise ValueError(
            f"grad_z shape {grad_z.shape} does not match output {tape.z.shape}"
        )
    radial = (tape.z * grad_z).sum(axis=0, keepdims=True)
    g = (grad_z - tape.z * radial) / tape.v_norms

    grads = [None] * enc.num_layers
    for l in range(enc.num_layers - 1, -1, -1):
        dw = g @ tape.inputs[l].T
        db = g.sum(axis=1)
        grads[l] = (dw, db)
        g = enc.weights[l].T @ g
        if l > 0:
            g = g * (tape.pre_activations[l - 1] > 0.0)
    return grads, g


def embed(enc: EncoderParams, x: Matrix, use_head: bool = True) -> Matrix:
    """Unit-norm features for evaluation.

    use_head=True gives the projection output z; use_head=False gives the
    normalized activation feeding the projection layer (the raw input if
    the encoder has fewer than two layers).
    """
    if use_head:
        return forward(enc, x)[0]
    if enc.num_layers <= 1:
        return l2_normalize_cols(np.asarray(x, dtype=np.float64))
    h = np.asarray(x, dtype=np.float64)
    for l in range(enc.num_layers - 1):
        h = np.maximum(enc.weights[l] @ h + enc.biases[l][:, None], 0.0)
    return l2_normalize_cols(h)


@dataclass
class PrototypeBank:
    """d x K matrix of unit-norm prototype columns.

    When frozen, gradients are still produced by the losses but the
    trainer discards them, leaving the bank untouched.
    """

    c: Matrix
    frozen: bool = False

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    @property
    def num_prototypes(self) -> int:
        return self.c.shape[1]

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(c=self.c.copy(), frozen=self.frozen)


def init_prototypes(dim: int, num_prototypes: int, rng) -> PrototypeBank:
    c = rng.normal(size=(dim, num_prototypes))
    return PrototypeBank(c=l2_normalize_cols(c))


def renormalize(bank: PrototypeBank) -> None:
    """Restore unit columns in place (run after every optimizer step)."""
    bank.c = l2_normalize_cols(bank.c)


def prototype_scores(z: Matrix, bank: PrototypeBank) -> Matrix:
    """Cosine similarities C^T z, shape K x B."""
    z = np.asarray(z, dtype=np.float64)
    if z.shape[0] != bank.dim:
        raise ValueError(
            f"features have {z.shape[0]} rows but prototypes have {bank.dim}"
        )
    return bank.c.T @ z


def save_tensors(path, tensors: dict) -> None:
    """Write named float64 tensors to the VCC1 container."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(fileio.pack_u16(CHECKPOINT_VERSION))
        for name, arr in tensors.items():
            a = np.asarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            f.write(fileio.pack_u32(len(nb)))
            f.write(nb)
            f.write(fileio.pack_u32(a.ndim))
            for d in a.shape:
                f.write(fileio.pack_u32(d))
            f.write(a.tobytes(order="C"))


def load_tensors(path) -> dict:
    """Read a VCC1 container back into {name: float64 array}."""
    with open(path, "rb") as f:
        rd = fileio.Reader(f.read(), name=str(path))
    rd.expect_magic(CHECKPOINT_MAGIC)
    version = rd.u16()
    if version != CHECKPOINT_VERSION:
        raise fileio.FileFormatError(
            f"{path}: unsupported checkpoint version {version}"
        )
    tensors = {}
    while rd.remaining():
        name = rd.take(rd.u32()).decode("utf-8")
        rank = rd.dim("tensor rank")
        shape = tuple(rd.dim("tensor dim") for _ in range(rank))
        count = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(rd.take(8 * count), dtype="<f8")
        tensors[name] = data.reshape(shape).astype(np.float64)
    return tensors
