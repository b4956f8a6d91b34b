"""Dense embedding network with hand-written reverse-mode gradients.

The network is a stack of affine layers with ReLU between them and an
optional L2 normalisation of the output.  Parameters live in one flat
float64 vector; each layer's weight and bias are views into it so the
optimiser can update everything with a single vector operation.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorruptFileError, ShapeError, StateError
from .seeding import substream

MAGIC = b"OCNNET\x00\x00"
FORMAT_VERSION = 1
HEADER = struct.Struct("<8sII")  # magic, version, stored param count -> 16 bytes
NORM_EPS = 1e-12


def param_count(dims):
    return sum((a + 1) * b for a, b in zip(dims[:-1], dims[1:]))


class EmbeddingNet:
    """f(x): R^{3P^2} -> R^K built from affine layers ``dims[i] -> dims[i+1]``."""

    def __init__(self, dims, output_norm=False, params=None):
        dims = [int(d) for d in dims]
        if len(dims) < 2 or min(dims) < 1:
            raise ConfigError(f"invalid layer dims {dims}")
        self.dims = dims
        self.output_norm = bool(output_norm)
        n = param_count(dims)
        if params is None:
            params = np.zeros(n)
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (n,):
            raise ShapeError(f"expected {n} parameters for dims {dims}, got {params.shape}")
        self.params = params.copy()
        self.grads = np.zeros(n)
        self.version = 0

    @property
    def embed_dim(self):
        return self.dims[-1]

    def layers(self, vector=None):
        """(W, b) views into ``vector`` (defaults to ``params``), W shaped (fan_in, fan_out)."""
        vector = self.params if vector is None else vector
        out, pos = [], 0
        for a, b in zip(self.dims[:-1], self.dims[1:]):
            w = vector[pos:pos + a * b].reshape(a, b)
            pos += a * b
            out.append((w, vector[pos:pos + b]))
            pos += b
        return out

    def copy(self):
        return EmbeddingNet(self.dims, self.output_norm, self.params)

    def touch(self):
        """Mark parameters as changed; outstanding activations become stale."""
        self.version += 1

    def descriptor(self):
        return {"dims": self.dims, "output_norm": self.output_norm, "activation": "relu"}

    def checksum(self):
        return hashlib.sha256(self.params.astype("<f8").tobytes()).hexdigest()[:16]

    def embed(self, x):
        return forward(self, x)[0]


@dataclass
class BatchActivations:
    inputs: list  # input to each affine layer
    pre: list  # affine output of each layer
    norms: np.ndarray | None
    output: np.ndarray
    net_id: int
    version: int
    consumed: bool = field(default=False)

    @property
    def batch_size(self):
        return self.output.shape[0]


def default_dims(patch_size=16, embed_dim=16, hidden=(256, 64)):
    return [3 * patch_size * patch_size, *hidden, embed_dim]


def init(seed, scheme="random", dims=None, output_norm=False, warmstart=None):
    """Create a network.

    ``random`` draws He-uniform weights, U(-sqrt(6/fan_in), sqrt(6/fan_in)),
    with zero biases.  ``warmstart`` loads parameters saved by :func:`save`
    from the path ``warmstart``.  Parameters are rounded to float32 so a
    saved network reloads bit for bit.
    """
    if scheme == "warmstart":
        if warmstart is None:
            raise ConfigError("warmstart scheme needs a checkpoint path")
        net = load(warmstart)
        if dims is not None and list(dims) != net.dims:
            raise ShapeError(f"warmstart checkpoint has dims {net.dims}, expected {list(dims)}")
        return net
    if scheme != "random":
        raise ConfigError(f"unknown init scheme {scheme!r}")
    dims = default_dims() if dims is None else dims
    net = EmbeddingNet(dims, output_norm)
    rng = substream(seed, "init")
    for w, _ in net.layers():
        bound = np.sqrt(6.0 / w.shape[0])
        w[...] = rng.uniform(-bound, bound, size=w.shape)
    net.params[:] = net.params.astype(np.float32)
    return net


def forward(net, x):
    """Embed the rows of ``x``; returns (b x K embeddings, activations)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.dims[0]:
        raise ShapeError(f"expected input of shape (b, {net.dims[0]}), got {x.shape}")
    if x.shape[0] < 1:
        raise ShapeError("empty batch")
    inputs, pre = [], []
    h = x
    layers = net.layers()
    for i, (w, b) in enumerate(layers):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < len(layers) - 1 else z
    norms = None
    if net.output_norm:
        norms = np.maximum(np.linalg.norm(h, axis=1, keepdims=True), NORM_EPS)
        h = h / norms
    acts = BatchActivations(inputs, pre, norms, h, id(net), net.version)
    return h, acts


def backward(net, acts, grad_embeddings):
    """Fill ``net.grads`` with dL/dparams given dL/d(embeddings); overwrites previous grads."""
    if acts.consumed or acts.net_id != id(net) or acts.version != net.version:
        raise StateError("activations are stale; run forward again before backward")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != acts.output.shape:
        raise ShapeError(f"grad shape {g.shape} does not match embeddings {acts.output.shape}")
    if net.output_norm:
        y = acts.output
        g = (g - y * np.sum(y * g, axis=1, keepdims=True)) / acts.norms
    grads = np.zeros_like(net.params)
    layers = net.layers()
    glayers = net.layers(grads)
    for i in range(len(layers) - 1, -1, -1):
        if i < len(layers) - 1:
            g = g * (acts.pre[i] > 0)
        gw, gb = glayers[i]
        gw[...] = acts.inputs[i].T @ g
        gb[...] = g.sum(axis=0)
        if i > 0:
            g = g @ layers[i][0].T
    net.grads = grads
    acts.consumed = True
    return grads


def save(net, path):
    desc = json.dumps(net.descriptor(), sort_keys=True).encode("utf-8")
    blob = b"".join(
        [
            HEADER.pack(MAGIC, FORMAT_VERSION, net.params.size),
            struct.pack("<I", len(desc)),
            desc,
            net.params.astype("<f4").tobytes(),
        ]
    )
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    tmp.replace(path)


def load(path):
    blob = Path(path).read_bytes()
    if len(blob) < HEADER.size + 4:
        raise CorruptFileError(f"{path}: file too short for a model header")
    magic, version, stored = HEADER.unpack_from(blob, 0)
    if magic != MAGIC or version != FORMAT_VERSION:
        raise CorruptFileError(f"{path}: not an ocnet model file (magic={magic!r}, version={version})")
    (desc_len,) = struct.unpack_from("<I", blob, HEADER.size)
    start = HEADER.size + 4
    if start + desc_len > len(blob):
        raise CorruptFileError(f"{path}: truncated descriptor")
    try:
        desc = json.loads(blob[start:start + desc_len])
        dims = [int(d) for d in desc["dims"]]
        output_norm = bool(desc["output_norm"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"{path}: unreadable descriptor: {exc}") from exc
    payload = blob[start + desc_len:]
    if len(payload) != 4 * stored:
        raise CorruptFileError(f"{path}: parameter block is {len(payload)} bytes, header declares {stored} floats")
    n = param_count(dims)
    if stored != n:
        raise ShapeError(f"{path}: file holds {stored} parameters but dims {dims} need {n}")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return EmbeddingNet(dims, output_norm, params)
