"""Tiny encoder / classifier / projection networks and their parameter containers.

The encoder is a 2-layer MLP (affine -> relu -> affine); classifier and
projection heads are single affine maps.  All forwards accept either a
:class:`ModelParams` or a plain name->Tensor mapping, so tape-tracked copies
of the parameters can be passed straight through.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .errors import ContractError, ParseError, ShapeError
from .tensor import GradTape, Tensor, add, matmul, relu

__all__ = [
    "EncoderConfig",
    "ModelParams",
    "init_params",
    "encoder_forward",
    "classifier_forward",
    "projection_forward",
    "sgd_step",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions of the shared model family; embeddings default to width 32."""

    input_dim: int
    hidden_dim: int = 32
    embed_dim: int = 32
    activation: str = "relu"

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ContractError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ContractError("input_dim and hidden_dim must be positive")
        if self.activation != "relu":
            raise ContractError(f"unsupported activation {self.activation!r}")


class ModelParams:
    """Named, ordered collection of parameter tensors.

    Two instances with equal layouts (same names, same order, same shapes) are
    element-wise combinable; serialization round-trips are bit-identical.
    """

    __slots__ = ("_tensors",)

    def __init__(self, tensors: Mapping[str, Tensor]):
        self._tensors = dict(tensors)

    @property
    def tensors(self) -> dict[str, Tensor]:
        return self._tensors

    def layout(self) -> tuple[tuple[str, tuple[int, ...]], ...]:
        return tuple((name, t.shape) for name, t in self._tensors.items())

    def names(self) -> list[str]:
        return list(self._tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __eq__(self, other) -> bool:
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.layout() == other.layout() and all(
            np.array_equal(self._tensors[n].data, other._tensors[n].data)
            for n in self._tensors)

    def map(self, fn) -> "ModelParams":
        """Apply ``fn(np.ndarray) -> np.ndarray`` to every tensor."""
        return ModelParams({n: Tensor(fn(t.data)) for n, t in self._tensors.items()})

    def track(self, tape: GradTape) -> dict[str, Tensor]:
        """Register every tensor on ``tape``; returns the tracked aliases."""
        return {n: tape.parameter(n, t) for n, t in self._tensors.items()}

    def subset(self, prefix: str) -> "ModelParams":
        return ModelParams({n: t for n, t in self._tensors.items() if n.startswith(prefix)})

    def __repr__(self):
        return f"ModelParams({[n for n in self._tensors]})"


def require_same_layout(a: ModelParams, b: ModelParams, op: str) -> None:
    if a.layout() != b.layout():
        raise ContractError(f"{op}: parameter layouts differ ({a.layout()} vs {b.layout()})")


def _tensors(params) -> Mapping[str, Tensor]:
    return params.tensors if isinstance(params, ModelParams) else params


def init_params(config: EncoderConfig, n_classes: int, seed: int) -> ModelParams:
    """Glorot-uniform weights (+/- sqrt(6/(fan_in+fan_out))), zero biases, per-seed deterministic."""
    if n_classes < 2:
        raise ContractError(f"need at least 2 classes, got {n_classes}")
    rng = np.random.default_rng(seed)

    def glorot(fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=(fan_in, fan_out))

    tensors = {
        "encoder.w1": Tensor(glorot(config.input_dim, config.hidden_dim)),
        "encoder.b1": Tensor.zeros((config.hidden_dim,)),
        "encoder.w2": Tensor(glorot(config.hidden_dim, config.embed_dim)),
        "encoder.b2": Tensor.zeros((config.embed_dim,)),
        "classifier.w": Tensor(glorot(config.embed_dim, n_classes)),
        "classifier.b": Tensor.zeros((n_classes,)),
        "projection.w": Tensor(glorot(config.embed_dim, n_classes)),
        "projection.b": Tensor.zeros((n_classes,)),
    }
    return ModelParams(tensors)


def _check_width(x: Tensor, expected: int, who: str) -> None:
    if x.data.ndim != 2 or x.shape[1] != expected:
        raise ShapeError(who, x.shape, ("B", expected))


def encoder_forward(params, x: Tensor) -> Tensor:
    """Embed a (B, input_dim) batch: affine -> relu -> affine."""
    p = _tensors(params)
    _check_width(x, p["encoder.w1"].shape[0], "encoder_forward")
    h = relu(add(matmul(x, p["encoder.w1"]), p["encoder.b1"]))
    return add(matmul(h, p["encoder.w2"]), p["encoder.b2"])


def classifier_forward(params, emb: Tensor) -> Tensor:
    """Map a (B, embed_dim) batch to class logits with one affine layer."""
    p = _tensors(params)
    _check_width(emb, p["classifier.w"].shape[0], "classifier_forward")
    return add(matmul(emb, p["classifier.w"]), p["classifier.b"])


def projection_forward(params, emb: Tensor) -> Tensor:
    """Affine map from embedding space to the label dimension (for the angular loss)."""
    p = _tensors(params)
    _check_width(emb, p["projection.w"].shape[0], "projection_forward")
    return add(matmul(emb, p["projection.w"]), p["projection.b"])


def sgd_step(params: ModelParams, grads: Mapping[str, Tensor], lr: float) -> ModelParams:
    """Pure gradient step: out = params - lr * grads, element-wise."""
    out = {}
    for name, t in params.tensors.items():
        g = grads.get(name)
        if g is None:
            out[name] = t
            continue
        if g.shape != t.shape:
            raise ShapeError("sgd_step", t.shape, g.shape)
        out[name] = Tensor._wrap(t.data - lr * g.data)
    return ModelParams(out)


# ---------------------------------------------------------------------------
# checkpoint format: magic, version, layout descriptor, little-endian float64
# ---------------------------------------------------------------------------

_MAGIC = b"FGCP"
_VERSION = 1


def save_checkpoint(params: ModelParams, path) -> None:
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(params.tensors)))
        for name, t in params.tensors.items():
            enc = name.encode("utf-8")
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<B", len(t.shape)))
            for d in t.shape:
                f.write(struct.pack("<I", d))
        for t in params.tensors.values():
            f.write(t.data.astype("<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != _MAGIC:
        raise ParseError(f"not a fedgeo checkpoint: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != _VERSION:
        raise ParseError(f"unsupported checkpoint version {version}")
    off = 12
    layout: list[tuple[str, tuple[int, ...]]] = []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{ndim}I", blob, off) if ndim else ()
        off += 4 * ndim
        layout.append((name, tuple(dims)))
    tensors = {}
    for name, shape in layout:
        n = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
        off += 8 * n
        tensors[name] = Tensor(arr)
    if off != len(blob):
        raise ParseError("trailing bytes in checkpoint")
    return ModelParams(tensors)
