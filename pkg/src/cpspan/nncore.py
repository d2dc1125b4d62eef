"""Small dense-network engine: layers, reverse-mode gradients, Adam, autoencoders.

Only what the clustering losses need.  A :class:`Tape` records the inputs and
pre-activations of a forward pass; :func:`backward` replays it in reverse.
"""

from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .exceptions import InvalidArgumentError, TrainingDivergenceError

ACTIVATIONS = ("relu", "identity")
DEFAULT_HIDDEN = (500, 500, 2000)


@dataclass(eq=False)
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise InvalidArgumentError(f"unknown activation {self.activation!r}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise InvalidArgumentError(
                f"inconsistent layer shapes {self.weight.shape} / {self.bias.shape}")

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]


def glorot_layer(n_in, n_out, activation, rng, dtype=np.float64) -> DenseLayer:
    limit = np.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)
    return DenseLayer(w, np.zeros(n_out, dtype=dtype), activation)


class Tape:
    """Forward record: one ``(name, layer, input, pre_activation)`` per layer."""

    def __init__(self):
        self.records = []

    def __len__(self):
        return len(self.records)


def forward(layers: Sequence[DenseLayer], x: np.ndarray, tape: Optional[Tape] = None,
            prefix: str = "") -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != layers[0].n_in:
        raise InvalidArgumentError(
            f"expected input of width {layers[0].n_in}, got shape {x.shape}")
    h = x
    for i, layer in enumerate(layers):
        z = h @ layer.weight.T + layer.bias
        if tape is not None:
            tape.records.append((f"{prefix}{i}", layer, h, z))
        h = np.maximum(z, 0) if layer.activation == "relu" else z
    return h


def backward(tape: Tape, grad_out: np.ndarray):
    """Reverse pass over ``tape``.

    Returns ``(param_grads, grad_input)`` where ``param_grads`` maps
    ``"<name>.weight"`` / ``"<name>.bias"`` to arrays.  ReLU's derivative at 0
    is taken as 0.
    """
    if not tape.records:
        raise InvalidArgumentError("empty tape")
    grads = {}
    g = grad_out
    for name, layer, h, z in reversed(tape.records):
        if g.shape != z.shape:
            raise InvalidArgumentError(
                f"gradient shape {g.shape} does not match layer {name} output {z.shape}")
        if layer.activation == "relu":
            g = g * (z > 0)
        grads[f"{name}.weight"] = g.T @ h
        grads[f"{name}.bias"] = g.sum(axis=0)
        g = g @ layer.weight
    return grads, g


@dataclass(eq=False)
class ViewAutoencoder:
    """Encoder/decoder pair for one view."""

    encoder: list
    decoder: list
    view_id: int = 0

    def __post_init__(self):
        if self.encoder[-1].n_out != self.decoder[0].n_in:
            raise InvalidArgumentError("encoder output width must equal decoder input width")
        if self.encoder[0].n_in != self.decoder[-1].n_out:
            raise InvalidArgumentError("decoder must map back to the input width")

    @classmethod
    def build(cls, n_input: int, n_embed: int, hidden: Sequence[int] = DEFAULT_HIDDEN,
              rng=None, view_id: int = 0, dtype=np.float64) -> "ViewAutoencoder":
        """n_input -> hidden... -> n_embed, mirrored back; ReLU on hidden layers only."""
        rng = np.random.default_rng(rng)
        widths = [n_input, *hidden, n_embed]
        enc = [glorot_layer(a, b, "relu" if i < len(widths) - 2 else "identity", rng, dtype)
               for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))]
        back = widths[::-1]
        dec = [glorot_layer(a, b, "relu" if i < len(back) - 2 else "identity", rng, dtype)
               for i, (a, b) in enumerate(zip(back[:-1], back[1:]))]
        return cls(enc, dec, view_id)

    @property
    def n_input(self) -> int:
        return self.encoder[0].n_in

    @property
    def n_embed(self) -> int:
        return self.encoder[-1].n_out

    @property
    def dtype(self):
        return self.encoder[0].weight.dtype

    def parameters(self) -> dict:
        """Name -> array (live references, updated in place by Adam)."""
        out = {}
        for part, layers in (("encoder", self.encoder), ("decoder", self.decoder)):
            for i, layer in enumerate(layers):
                out[f"{part}.{i}.weight"] = layer.weight
                out[f"{part}.{i}.bias"] = layer.bias
        return out

    def n_parameters(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def copy(self) -> "ViewAutoencoder":
        cp = lambda ls: [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in ls]
        return ViewAutoencoder(cp(self.encoder), cp(self.decoder), self.view_id)

    def equals(self, other: "ViewAutoencoder") -> bool:
        a, b = self.parameters(), other.parameters()
        return (self.view_id == other.view_id and a.keys() == b.keys()
                and all(a[k].dtype == b[k].dtype and np.array_equal(a[k], b[k]) for k in a)
                and [l.activation for l in self.encoder + self.decoder]
                == [l.activation for l in other.encoder + other.decoder])


def encode(ae: ViewAutoencoder, batch: np.ndarray, tape: Optional[Tape] = None) -> np.ndarray:
    return forward(ae.encoder, np.asarray(batch, dtype=ae.dtype), tape, "encoder.")


def decode(ae: ViewAutoencoder, h: np.ndarray, tape: Optional[Tape] = None) -> np.ndarray:
    return forward(ae.decoder, np.asarray(h, dtype=ae.dtype), tape, "decoder.")


def reconstruction_loss(batch: np.ndarray, recon: np.ndarray, return_grad: bool = False):
    """Squared error summed over elements, divided by the batch size."""
    batch = np.asarray(batch)
    recon = np.asarray(recon)
    if batch.shape != recon.shape:
        raise InvalidArgumentError(f"shape mismatch {batch.shape} vs {recon.shape}")
    diff = recon - batch
    b = max(batch.shape[0], 1)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / b)
    if return_grad:
        return loss, (2.0 / b) * diff
    return loss


@dataclass(eq=False)
class AdamState:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, lr: float, **kw) -> "AdamState":
        return cls(lr=lr,
                   m={k: np.zeros_like(p) for k, p in params.items()},
                   v={k: np.zeros_like(p) for k, p in params.items()}, **kw)


def adam_step(params: dict, grads: dict, state: AdamState):
    """One bias-corrected Adam update, in place.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient (their moments still decay).
    """
    for name, g in grads.items():
        if name not in params:
            raise InvalidArgumentError(f"gradient for unknown parameter {name!r}")
        if g.shape != params[name].shape:
            raise InvalidArgumentError(
                f"gradient {name} has shape {g.shape}, parameter has {params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient in {name}", tensor=name)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        g = grads.get(name)
        m *= state.beta1
        v *= state.beta2
        if g is not None:
            m += (1.0 - state.beta1) * g
            v += (1.0 - state.beta2) * (g * g)
        if state.lr != 0.0:
            p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
        if not np.all(np.isfinite(p)):
            raise TrainingDivergenceError(f"non-finite parameter {name} after step {t}",
                                          tensor=name)
    return params, state


# --------------------------------------------------------------------------
# checkpoints
#
# Layout of a checkpoint file:
#   line 1   b"CPSPAN-AE 1\n"                       (magic + format version)
#   line 2   one-line JSON header + b"\n":
#            {"view_id": int, "dtype": "float32"|"float64",
#             "layers": [{"name": "encoder.0", "out": int, "in": int,
#                         "activation": "relu"|"identity"}, ...]}
#   then, for each layer in header order, the weight (out*in values,
#   row-major) followed by the bias (out values), little-endian, in dtype.

MAGIC = b"CPSPAN-AE 1\n"


def save_checkpoint(ae: ViewAutoencoder, path) -> None:
    dtype = np.dtype(ae.dtype)
    layers = [("encoder", i, l) for i, l in enumerate(ae.encoder)]
    layers += [("decoder", i, l) for i, l in enumerate(ae.decoder)]
    header = {
        "view_id": int(ae.view_id),
        "dtype": dtype.name,
        "layers": [{"name": f"{part}.{i}", "out": l.n_out, "in": l.n_in,
                    "activation": l.activation} for part, i, l in layers],
    }
    le = dtype.newbyteorder("<")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(json.dumps(header, sort_keys=True).encode() + b"\n")
    for _, _, l in layers:
        buf.write(np.ascontiguousarray(l.weight, dtype=le).tobytes())
        buf.write(np.ascontiguousarray(l.bias, dtype=le).tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> ViewAutoencoder:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise InvalidArgumentError(f"{path}: not a CPSPAN autoencoder checkpoint")
    end = raw.index(b"\n", len(MAGIC))
    header = json.loads(raw[len(MAGIC):end])
    dtype = np.dtype(header["dtype"])
    le = dtype.newbyteorder("<")
    offset = end + 1
    enc, dec = [], []
    for spec in header["layers"]:
        n_out, n_in = spec["out"], spec["in"]
        w = np.frombuffer(raw, dtype=le, count=n_out * n_in, offset=offset)
        offset += w.nbytes
        b = np.frombuffer(raw, dtype=le, count=n_out, offset=offset)
        offset += b.nbytes
        layer = DenseLayer(w.reshape(n_out, n_in).astype(dtype), b.astype(dtype),
                           spec["activation"])
        (enc if spec["name"].startswith("encoder") else dec).append(layer)
    if offset != len(raw):
        raise InvalidArgumentError(f"{path}: {len(raw) - offset} trailing bytes")
    return ViewAutoencoder(enc, dec, header["view_id"])
