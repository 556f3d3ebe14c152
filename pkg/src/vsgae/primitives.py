"""Differentiable building blocks shared by the encoder, decoder and predictor.

Tensors are plain ``torch.Tensor`` values in float64 on the CPU; autograd
records the gradients.  Randomness always comes from an explicit
``numpy.random.Generator`` so the whole pipeline is reproducible from seeds
alone.  A finite-difference gradient checker provides an independent route
for verifying every recorded gradient.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

DTYPE = torch.float64

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE).requires_grad_(requires_grad)


class ParamStore:
    """Named trainable parameters with their Adam state.

    Registration order is stable and drives both the optimizer sweep and the
    checkpoint layout.  A store has a single owner during training;
    evaluation-only copies can be shared freely.
    """

    def __init__(self) -> None:
        self._params: dict[str, torch.Tensor] = {}
        self._adam_m: dict[str, torch.Tensor] = {}
        self._adam_v: dict[str, torch.Tensor] = {}
        self._adam_step: dict[str, int] = {}

    def register(self, name: str, values) -> torch.Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already registered")
        p = torch.as_tensor(values, dtype=DTYPE).clone().requires_grad_(True)
        self._params[name] = p
        self._adam_m[name] = torch.zeros_like(p, requires_grad=False)
        self._adam_v[name] = torch.zeros_like(p, requires_grad=False)
        self._adam_step[name] = 0
        return p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self) -> Iterable[tuple[str, torch.Tensor]]:
        return self._params.items()

    def parameters(self) -> list[torch.Tensor]:
        return list(self._params.values())

    def adam_state(self, name: str) -> tuple[torch.Tensor, torch.Tensor, int]:
        return self._adam_m[name], self._adam_v[name], self._adam_step[name]

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad = None

    def fill_missing_grads(self) -> None:
        """Zero-fill gradients of parameters a batch did not touch (e.g. the
        propagation weights when every partial graph was edge-free)."""
        for p in self._params.values():
            if p.grad is None:
                p.grad = torch.zeros_like(p)

    def num_elements(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def clone_values(self) -> dict[str, torch.Tensor]:
        return {name: p.detach().clone() for name, p in self._params.items()}

    def load_values(self, values: dict[str, torch.Tensor]) -> None:
        for name, v in values.items():
            with torch.no_grad():
                self._params[name].copy_(v)


@dataclass(frozen=True)
class OptimConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    plateau_patience: int = 10
    plateau_factor: float = 0.1

    def __post_init__(self) -> None:
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("betas must lie in (0, 1)")


def adam_step(store: ParamStore, cfg: OptimConfig, lr: float | None = None) -> None:
    """Bias-corrected Adam update, in place; gradients are cleared after.

    ``lr`` overrides ``cfg.lr`` so a plateau schedule can decay it without
    rebuilding the config.
    """
    rate = cfg.lr if lr is None else lr
    with torch.no_grad():
        for name, p in store.items():
            if p.grad is None:
                raise ValueError(f"parameter {name!r} has no gradient")
            g = p.grad
            store._adam_step[name] += 1
            t = store._adam_step[name]
            m = store._adam_m[name]
            v = store._adam_v[name]
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            m_hat = m / (1 - cfg.beta1**t)
            v_hat = v / (1 - cfg.beta2**t)
            p.sub_(rate * m_hat / (v_hat.sqrt() + cfg.epsilon))
    store.zero_grad()


class PlateauSchedule:
    """Decays the learning rate when the tracked loss stops improving."""

    def __init__(self, cfg: OptimConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.best = float("inf")
        self.stale = 0

    def update(self, loss: float) -> float:
        if loss < self.best:
            self.best = loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.cfg.plateau_patience:
                self.lr *= self.cfg.plateau_factor
                self.stale = 0
        return self.lr


# ---------------------------------------------------------------------------
# layer primitives


def linear(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """x @ weight + bias with weight of shape [in, out]."""
    return x @ weight + bias


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(x)


def softmax(x: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis, stabilized by max subtraction."""
    shifted = x - x.max(dim=-1, keepdim=True).values
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def relu(x: torch.Tensor) -> torch.Tensor:
    return torch.relu(x)


@dataclass
class LinearParams:
    weight: torch.Tensor  # [fan_in, fan_out]
    bias: torch.Tensor  # [fan_out]

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return linear(x, self.weight, self.bias)


@dataclass
class GruParams:
    """Gate parameters of a single GRU cell, packed as [.., 3*hidden] with
    reset/update/candidate slices in that order."""

    w_x: torch.Tensor  # [input, 3*hidden]
    w_h: torch.Tensor  # [hidden, 3*hidden]
    b_x: torch.Tensor  # [3*hidden]
    b_h: torch.Tensor  # [3*hidden]


def gru_cell(x: torch.Tensor, h: torch.Tensor, params: GruParams) -> torch.Tensor:
    """Gated recurrent update.

    r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
    z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
    n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
    h' = (1 - z) * n + z * h
    """
    hid = h.shape[-1]
    gx = x @ params.w_x + params.b_x
    gh = h @ params.w_h + params.b_h
    r = torch.sigmoid(gx[..., :hid] + gh[..., :hid])
    z = torch.sigmoid(gx[..., hid : 2 * hid] + gh[..., hid : 2 * hid])
    n = torch.tanh(gx[..., 2 * hid :] + r * gh[..., 2 * hid :])
    return (1 - z) * n + z * h


@dataclass
class MlpParams:
    layers: tuple[LinearParams, ...]


def mlp(x: torch.Tensor, params: MlpParams) -> torch.Tensor:
    """Alternating linear/ReLU stack with a linear last layer."""
    for lp in params.layers[:-1]:
        x = relu(lp(x))
    return params.layers[-1](x)


# ---------------------------------------------------------------------------
# parameter construction
#
# Each builder either creates fresh parameters (rng given; weights uniform in
# +-1/sqrt(fan_in), biases zero, lookups standard normal) or binds to tensors
# already present in the store, e.g. after loading a checkpoint (rng=None).


def _grab(store: ParamStore, name: str, shape: tuple[int, ...]) -> torch.Tensor:
    p = store[name]
    if tuple(p.shape) != shape:
        raise ValueError(f"parameter {name!r} has shape {tuple(p.shape)}, expected {shape}")
    return p


def linear_params(
    store: ParamStore,
    name: str,
    fan_in: int,
    fan_out: int,
    rng: np.random.Generator | None,
) -> LinearParams:
    if rng is not None:
        bound = 1.0 / np.sqrt(fan_in)
        store.register(f"{name}.weight", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        store.register(f"{name}.bias", np.zeros(fan_out))
    return LinearParams(
        weight=_grab(store, f"{name}.weight", (fan_in, fan_out)),
        bias=_grab(store, f"{name}.bias", (fan_out,)),
    )


def gru_params(
    store: ParamStore,
    name: str,
    d_in: int,
    d_hidden: int,
    rng: np.random.Generator | None,
) -> GruParams:
    if rng is not None:
        bx = 1.0 / np.sqrt(d_in)
        bh = 1.0 / np.sqrt(d_hidden)
        store.register(f"{name}.w_x", rng.uniform(-bx, bx, size=(d_in, 3 * d_hidden)))
        store.register(f"{name}.w_h", rng.uniform(-bh, bh, size=(d_hidden, 3 * d_hidden)))
        store.register(f"{name}.b_x", np.zeros(3 * d_hidden))
        store.register(f"{name}.b_h", np.zeros(3 * d_hidden))
    return GruParams(
        w_x=_grab(store, f"{name}.w_x", (d_in, 3 * d_hidden)),
        w_h=_grab(store, f"{name}.w_h", (d_hidden, 3 * d_hidden)),
        b_x=_grab(store, f"{name}.b_x", (3 * d_hidden,)),
        b_h=_grab(store, f"{name}.b_h", (3 * d_hidden,)),
    )


def mlp_params(
    store: ParamStore,
    name: str,
    sizes: Sequence[int],
    rng: np.random.Generator | None,
) -> MlpParams:
    layers = tuple(
        linear_params(store, f"{name}.l{i}", sizes[i], sizes[i + 1], rng)
        for i in range(len(sizes) - 1)
    )
    return MlpParams(layers)


def lookup_params(
    store: ParamStore,
    name: str,
    num_rows: int,
    dim: int,
    rng: np.random.Generator | None,
) -> torch.Tensor:
    if rng is not None:
        store.register(name, rng.standard_normal((num_rows, dim)))
    return _grab(store, name, (num_rows, dim))


# ---------------------------------------------------------------------------
# variational pieces


def reparameterize(
    mu: torch.Tensor, logvar: torch.Tensor, rng: np.random.Generator
) -> torch.Tensor:
    """z = mu + exp(logvar / 2) * eps with eps drawn from the generator.

    Gradients flow into mu and logvar only; logvar is clamped to keep the
    scale finite.
    """
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch: {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    eps = torch.as_tensor(rng.standard_normal(tuple(mu.shape)), dtype=DTYPE)
    return reparameterize_with_eps(mu, logvar, eps)


def reparameterize_with_eps(
    mu: torch.Tensor, logvar: torch.Tensor, eps: torch.Tensor
) -> torch.Tensor:
    logvar = torch.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)
    return mu + torch.exp(0.5 * logvar) * eps


def kl_divergence(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """Closed-form KL against the standard normal, summed over the last axis:
    -1/2 * sum_j (1 + log sigma_j^2 - mu_j^2 - sigma_j^2)."""
    if mu.shape != logvar.shape:
        raise ValueError(f"shape mismatch: {tuple(mu.shape)} vs {tuple(logvar.shape)}")
    return -0.5 * torch.sum(1 + logvar - mu * mu - torch.exp(logvar), dim=-1)


# ---------------------------------------------------------------------------
# losses in logit space


def cross_entropy_logits(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Per-row categorical cross-entropy, log-sum-exp form."""
    lse = torch.logsumexp(logits, dim=-1)
    picked = logits.gather(-1, target.unsqueeze(-1)).squeeze(-1)
    return lse - picked


def binary_cross_entropy_logits(scores: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Elementwise BCE on raw scores; finite for all finite inputs."""
    return torch.clamp(scores, min=0) - scores * targets + torch.log1p(torch.exp(-scores.abs()))


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    num_elements: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tolerance


def gradcheck(
    f: Callable[[], torch.Tensor],
    inputs: Sequence[torch.Tensor],
    step: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Compare recorded gradients of the scalar ``f()`` against central
    finite differences on ``inputs``.

    ``f`` must close over ``inputs`` and be re-evaluable; discontinuous
    points (ReLU kinks) are the caller's job to avoid by perturbing inputs
    off the kink first.
    """
    for x in inputs:
        if not x.requires_grad:
            raise ValueError("all checked inputs must require grad")
    out = f()
    if out.numel() != 1:
        raise ValueError("gradcheck needs a scalar function")
    if not torch.isfinite(out):
        raise ValueError("function value is not finite")
    grads = torch.autograd.grad(out, inputs, allow_unused=True)
    max_rel = 0.0
    count = 0
    with torch.no_grad():
        for x, g in zip(inputs, grads):
            analytic = torch.zeros_like(x) if g is None else g
            flat = x.view(-1)
            gflat = analytic.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + step
                hi = float(f())
                flat[i] = orig - step
                lo = float(f())
                flat[i] = orig
                numeric = (hi - lo) / (2 * step)
                a = float(gflat[i])
                if not (np.isfinite(numeric) and np.isfinite(a)):
                    raise ValueError("non-finite value during finite differences")
                denom = max(abs(a), abs(numeric), 1e-8)
                max_rel = max(max_rel, abs(a - numeric) / denom)
                count += 1
    return GradCheckReport(max_rel_error=max_rel, tolerance=tolerance, num_elements=count)


# ---------------------------------------------------------------------------
# checkpoints: json manifest + packed little-endian float32 payload

_MAGIC = b"VGC1"


def save_checkpoint(store: ParamStore, path, extra: dict | None = None) -> None:
    """Write all parameters and their Adam state to a single file."""
    entries = []
    payload = bytearray()

    def put(name: str, t: torch.Tensor) -> None:
        arr = np.ascontiguousarray(t.detach().numpy(), dtype="<f4")
        entries.append({"name": name, "shape": list(t.shape), "offset": len(payload)})
        payload.extend(arr.tobytes())

    for name, p in store.items():
        put(name, p)
    for name in store.names():
        m, v, _ = store.adam_state(name)
        put(f"adam.m:{name}", m)
        put(f"adam.v:{name}", v)
    manifest = {
        "tensors": entries,
        "adam_step": {name: store.adam_state(name)[2] for name in store.names()},
        "extra": extra or {},
    }
    blob = json.dumps(manifest).encode("utf-8")
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(bytes(payload))
    import os

    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    """Rebuild a ParamStore (with Adam state) from a checkpoint file."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (blob_len,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(blob_len).decode("utf-8"))
        payload = fh.read()

    def take(entry: dict) -> np.ndarray:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=start)
        return arr.reshape(shape).astype(np.float64)

    by_name = {e["name"]: e for e in manifest["tensors"]}
    store = ParamStore()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name.startswith("adam.m:") or name.startswith("adam.v:"):
            continue
        store.register(name, take(entry))
        store._adam_m[name] = torch.as_tensor(take(by_name[f"adam.m:{name}"]), dtype=DTYPE)
        store._adam_v[name] = torch.as_tensor(take(by_name[f"adam.v:{name}"]), dtype=DTYPE)
        store._adam_step[name] = int(manifest["adam_step"][name])
    return store, manifest.get("extra", {})
