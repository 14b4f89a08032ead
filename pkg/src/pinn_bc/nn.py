"""Fully connected tanh networks over a flat weight vector.

Weights are packed layer-major, ``A`` before ``b`` within a layer, ``A``
row-major with shape ``(n_out, n_in)``. Everything runs in float64 torch so
that weight gradients of input-derivative programs come from one reverse pass.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from .errors import ConfigurationError

DTYPE = torch.float64
PACKING_VERSION = 1
_MAGIC = b"PINNBC-CKPT"

_SMOOTH = {"tanh": True, "identity": True, "relu": False}


@dataclass(frozen=True)
class MlpArchitecture:
    layer_widths: tuple
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(n) for n in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ConfigurationError(f"invalid layer widths {widths}")
        if self.activation not in _SMOOTH:
            raise ConfigurationError(f"unknown activation {self.activation!r}")

    @classmethod
    def hidden(cls, n_in, depth, width, n_out=1, activation="tanh"):
        return cls((n_in,) + (width,) * depth + (n_out,), activation)

    @property
    def n_in(self):
        return self.layer_widths[0]

    @property
    def n_out(self):
        return self.layer_widths[-1]

    @property
    def shapes(self):
        w = self.layer_widths
        return [(w[i + 1], w[i]) for i in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.shapes)


def init_weights(arch: MlpArchitecture, seed: int) -> np.ndarray:
    """Glorot-uniform matrices and zero biases, fully determined by ``seed``."""
    rng = np.random.default_rng(seed)
    parts = []
    for n_out, n_in in arch.shapes:
        bound = np.sqrt(6.0 / (n_in + n_out))
        parts.append(rng.uniform(-bound, bound, size=n_out * n_in))
        parts.append(np.zeros(n_out))
    return np.concatenate(parts)


def as_tensor(a) -> torch.Tensor:
    if isinstance(a, torch.Tensor):
        return a if a.dtype == DTYPE else a.to(DTYPE)
    return torch.as_tensor(np.asarray(a, dtype=float), dtype=DTYPE)


def unpack(arch: MlpArchitecture, w):
    w = as_tensor(w)
    if w.shape != (arch.n_params,):
        raise ValueError(f"weight vector has shape {tuple(w.shape)}, expected ({arch.n_params},)")
    layers, k = [], 0
    for n_out, n_in in arch.shapes:
        A = w[k : k + n_out * n_in].reshape(n_out, n_in)
        k += n_out * n_in
        b = w[k : k + n_out]
        k += n_out
        layers.append((A, b))
    return layers


def _check_input(arch, x):
    x = as_tensor(x)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[-1] != arch.n_in:
        raise ValueError(f"input dimension {x.shape[-1]} does not match network input {arch.n_in}")
    return x


def _act(name, z):
    if name == "tanh":
        return torch.tanh(z)
    if name == "relu":
        return torch.relu(z)
    return z


def forward(arch: MlpArchitecture, w, x) -> torch.Tensor:
    """Network output ``(n, n_out)``; identity on the last layer."""
    x = _check_input(arch, x)
    layers = unpack(arch, w)
    for i, (A, b) in enumerate(layers):
        x = x @ A.T + b
        if i < len(layers) - 1:
            x = _act(arch.activation, x)
    return x


@dataclass
class NetworkJet:
    value: torch.Tensor  # (n, n_out)
    jacobian: torch.Tensor  # (n, n_out, n_in)
    hessian: Optional[torch.Tensor] = None  # (n, n_out, n_in, n_in)

    def numpy(self):
        h = None if self.hessian is None else self.hessian.detach().numpy()
        return NetworkJet(self.value.detach().numpy(), self.jacobian.detach().numpy(), h)


def input_jet(arch: MlpArchitecture, w, x, order: int = 1) -> NetworkJet:
    """Exact input derivatives by layerwise forward propagation of jets."""
    if order not in (1, 2):
        raise ValueError("order must be 1 or 2")
    if order == 2 and not _SMOOTH[arch.activation]:
        raise ConfigurationError(f"second input derivatives need a smooth activation, not {arch.activation!r}")
    x = _check_input(arch, x)
    n, d = x.shape
    layers = unpack(arch, w)
    z = x
    J = torch.eye(d, dtype=DTYPE).expand(n, d, d)
    H = torch.zeros(n, d, d, d, dtype=DTYPE) if order == 2 else None
    for i, (A, b) in enumerate(layers):
        z = z @ A.T + b
        J = torch.einsum("oi,nid->nod", A, J)
        if H is not None:
            H = torch.einsum("oi,nide->node", A, H)
        if i == len(layers) - 1 or arch.activation == "identity":
            continue
        if arch.activation == "tanh":
            a = torch.tanh(z)
            s1 = 1.0 - a * a
            if H is not None:
                s2 = -2.0 * a * s1
                H = s1[..., None, None] * H + s2[..., None, None] * (J[..., :, None] * J[..., None, :])
            J = s1[..., None] * J
            z = a
        else:  # relu, first order only
            mask = (z > 0).to(DTYPE)
            J = mask[..., None] * J
            z = z * mask
    return NetworkJet(z, J, H)


def weight_gradient(loss: Callable[[torch.Tensor], torch.Tensor], w) -> tuple:
    """Loss value and its exact reverse-mode gradient with respect to the flat weights."""
    wt = as_tensor(np.array(w, dtype=float, copy=True)).requires_grad_(True)
    val = loss(wt)
    (g,) = torch.autograd.grad(val, wt)
    return float(val.detach()), g.detach().numpy().copy()


def l2_penalty(w, lam_reg: float):
    if lam_reg < 0:
        raise ValueError("regularization weight must be non-negative")
    if isinstance(w, torch.Tensor):
        return lam_reg * torch.sum(w * w)
    w = np.asarray(w, dtype=float)
    return lam_reg * float(w @ w)


def save_checkpoint(path, arch: MlpArchitecture, w, seed: Optional[int] = None):
    """Header line (JSON) followed by the weights as little-endian float64."""
    header = {
        "layer_widths": list(arch.layer_widths),
        "activation": arch.activation,
        "seed": seed,
        "packing_version": PACKING_VERSION,
        "n_params": arch.n_params,
    }
    w = np.asarray(w, dtype="<f8")
    if w.shape != (arch.n_params,):
        raise ValueError("weight vector does not match the architecture")
    with open(path, "wb") as fh:
        fh.write(_MAGIC + b" " + json.dumps(header).encode() + b"\n")
        fh.write(w.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        line = fh.readline()
        if not line.startswith(_MAGIC):
            raise ValueError(f"{path} is not a checkpoint file")
        header = json.loads(line[len(_MAGIC) :].decode())
        w = np.frombuffer(fh.read(), dtype="<f8").astype(float)
    if header.get("packing_version") != PACKING_VERSION:
        raise ValueError(f"unsupported packing version {header.get('packing_version')}")
    arch = MlpArchitecture(tuple(header["layer_widths"]), header["activation"])
    if w.shape != (arch.n_params,):
        raise ValueError("checkpoint weight count does not match its header")
    return arch, w, header
