"""MLP split into Encoder / Decoder+classifier at a hook layer."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .nn import ACTIVATIONS, ShapeError, Tensor, add, matmul

CHECKPOINT_MAGIC = b"FCFA1"
_ACT_CODES = {"linear": 0, "relu": 1, "tanh": 2}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"


def mlp_specs(widths, classes: int, activation: str = "relu") -> list[LayerSpec]:
    """Chain ``widths[0] -> ... -> widths[-1] -> classes``; the last layer is linear."""
    dims = list(widths) + [classes]
    specs = [LayerSpec(a, b, activation) for a, b in zip(dims[:-2], dims[1:-1])]
    specs.append(LayerSpec(dims[-2], dims[-1], "linear"))
    return specs


class SplitModel:
    """Parameterised MLP whose first ``hook`` layers form the Encoder.

    The Encoder output (post-activation of layer ``hook``) is the factor
    vector; the remaining layers are the Decoder and the final linear layer
    produces class logits.
    """

    def __init__(self, layer_specs, hook: int, seed: int | None = 0):
        specs = [s if isinstance(s, LayerSpec) else LayerSpec(*s) for s in layer_specs]
        if not specs:
            raise ValueError("model needs at least one layer")
        for s in specs:
            if s.activation not in ACTIVATIONS:
                raise ValueError(f"unknown activation {s.activation!r}")
            if s.in_dim < 1 or s.out_dim < 1:
                raise ValueError(f"layer dims must be positive, got {s}")
        for s, t in zip(specs[:-1], specs[1:]):
            if s.out_dim != t.in_dim:
                raise ValueError(f"layer dims do not chain: {s.out_dim} -> {t.in_dim}")
        if not 1 <= hook <= len(specs) - 1:
            raise ValueError(f"hook must lie in [1, {len(specs) - 1}], got {hook}")
        self.layer_specs: list[LayerSpec] = specs
        self.hook = hook
        self.params: list[Tensor] = []
        rng = np.random.default_rng(seed)
        for s in specs:
            a = np.sqrt(6.0 / (s.in_dim + s.out_dim))
            self.params.append(Tensor(rng.uniform(-a, a, size=(s.in_dim, s.out_dim)), requires_grad=True))
            self.params.append(Tensor(np.zeros(s.out_dim), requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.layer_specs[0].in_dim

    @property
    def factor_dim(self) -> int:
        return self.layer_specs[self.hook - 1].out_dim

    @property
    def num_classes(self) -> int:
        return self.layer_specs[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    def _layer(self, i: int, x: Tensor) -> Tensor:
        W, b = self.params[2 * i], self.params[2 * i + 1]
        return ACTIVATIONS[self.layer_specs[i].activation](add(matmul(x, W), b))

    def encode(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"encode: expected width {self.in_dim}, got shape {x.shape}")
        for i in range(self.hook):
            x = self._layer(i, x)
        return x

    def decode_classify(self, f) -> Tensor:
        f = f if isinstance(f, Tensor) else Tensor(f)
        if f.data.ndim != 2 or f.shape[1] != self.factor_dim:
            raise ShapeError(f"decode_classify: expected width {self.factor_dim}, got shape {f.shape}")
        for i in range(self.hook, len(self.layer_specs)):
            f = self._layer(i, f)
        return f

    def forward(self, x) -> Tensor:
        return self.decode_classify(self.encode(x))

    __call__ = forward

    def predict_logits(self, x: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """Gradient-free forward in chunks."""
        out = []
        for start in range(0, len(x), chunk):
            h = np.asarray(x[start:start + chunk], dtype=np.float64)
            for i, s in enumerate(self.layer_specs):
                h = h @ self.params[2 * i].data + self.params[2 * i + 1].data
                if s.activation == "relu":
                    h = np.where(h > 0.0, h, 0.0)
                elif s.activation == "tanh":
                    h = np.tanh(h)
            out.append(h)
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.num_classes))

    def flatten_params(self) -> np.ndarray:
        """Layer-major, weight (row-major) before bias."""
        return np.concatenate([p.data.reshape(-1) for p in self.params])

    def unflatten_params(self, v) -> None:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.size != self.num_params:
            raise ShapeError(f"unflatten: expected {self.num_params} values, got {v.size}")
        pos = 0
        for p in self.params:
            p.data = v[pos:pos + p.size].reshape(p.shape).copy()
            p.grad = None
            pos += p.size

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def same_architecture(self, other: "SplitModel") -> bool:
        return self.layer_specs == other.layer_specs and self.hook == other.hook

    def clone(self) -> "SplitModel":
        twin = SplitModel.__new__(SplitModel)
        twin.layer_specs = list(self.layer_specs)
        twin.hook = self.hook
        twin.params = [Tensor(p.data, requires_grad=True) for p in self.params]
        return twin

    # checkpoint: magic, u32 layers, (u32 in, u32 out, u8 act) per layer,
    # u32 hook, u64 count, then count little-endian float64 values.
    def to_bytes(self) -> bytes:
        parts = [CHECKPOINT_MAGIC, struct.pack("<I", len(self.layer_specs))]
        for s in self.layer_specs:
            parts.append(struct.pack("<IIB", s.in_dim, s.out_dim, _ACT_CODES[s.activation]))
        flat = self.flatten_params()
        parts.append(struct.pack("<IQ", self.hook, flat.size))
        parts.append(flat.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "SplitModel":
        if blob[:5] != CHECKPOINT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        try:
            pos = 5
            (n_layers,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            specs = []
            for _ in range(n_layers):
                i, o, code = struct.unpack_from("<IIB", blob, pos)
                pos += 9
                specs.append(LayerSpec(i, o, _ACT_NAMES[code]))
            hook, count = struct.unpack_from("<IQ", blob, pos)
            pos += 12
        except (struct.error, KeyError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        if len(blob) - pos != 8 * count:
            raise CheckpointError("checkpoint payload length does not match header")
        model = cls(specs, hook, seed=0)
        model.unflatten_params(np.frombuffer(blob, dtype="<f8", count=count, offset=pos))
        return model

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "SplitModel":
        return cls.from_bytes(Path(path).read_bytes())


def default_model(in_dim: int, classes: int, seed: int = 0, hook: int = 2, widths=(256, 64, 128), activation: str = "relu") -> SplitModel:
    return SplitModel(mlp_specs([in_dim, *widths], classes, activation), hook=hook, seed=seed)
