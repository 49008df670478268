"""Differentiable-network substrate on float64 torch tensors.

Parameters live in a :class:`ParamStore`; gradients accumulate additively in
each tensor's ``.grad`` until :meth:`ParamStore.zero_grad`. ``fd_check`` is the
independent central-difference oracle used throughout the test suite.
"""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

DTYPE = torch.float64
CKPT_MAGIC = b"PCKP"
CKPT_VERSION = 1

_ACTIVATIONS = {"tanh": torch.tanh, "identity": lambda x: x}


class ParamStore:
    """Named float64 leaf tensors plus AdamW moments."""

    def __init__(self):
        self.params: OrderedDict[str, torch.Tensor] = OrderedDict()
        self.moments: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        self.step_count = 0

    def add(self, name, value):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = torch.as_tensor(np.asarray(value, dtype=np.float64)).clone().requires_grad_(True)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self, prefix=""):
        return [n for n in self.params if n.startswith(prefix)]

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def numpy(self):
        return OrderedDict((n, p.detach().numpy().copy()) for n, p in self.params.items())

    def load_state(self, arrays):
        """Copy ``arrays`` into existing tensors, checking names and shapes."""
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise ValueError(f"parameter name mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for n, arr in arrays.items():
            p = self.params[n]
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {n!r}: checkpoint {tuple(arr.shape)} vs model {tuple(p.shape)}")
            with torch.no_grad():
                p.copy_(torch.as_tensor(arr, dtype=DTYPE))
        self.moments.clear()
        self.step_count = 0


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activation: str = "tanh"
    out_activation: str = "identity"

    def __post_init__(self):
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive: {self.widths}")


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator,
             zero_last=False):
    """Uniform fan-in init, ``U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
    n_layers = len(spec.widths) - 1
    for i, (a, b) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        bound = 1.0 / np.sqrt(a)
        if zero_last and i == n_layers - 1:
            W, bias = np.zeros((a, b)), np.zeros(b)
        else:
            W = rng.uniform(-bound, bound, size=(a, b))
            bias = rng.uniform(-bound, bound, size=b)
        store.add(f"{prefix}.W{i}", W)
        store.add(f"{prefix}.b{i}", bias)


class Tape:
    """Handle on a recorded forward pass; single use for ``backward``."""

    def __init__(self, output: torch.Tensor):
        self.output = output
        self.cleared = False

    def clear(self):
        self.output = None
        self.cleared = True


def mlp_apply(spec: MlpSpec, store: ParamStore, prefix: str, x: torch.Tensor) -> torch.Tensor:
    n_layers = len(spec.widths) - 1
    if x.shape[-1] != spec.widths[0]:
        raise ValueError(f"{prefix}.layer0: input width {x.shape[-1]} != expected {spec.widths[0]}")
    act, out_act = _ACTIVATIONS[spec.activation], _ACTIVATIONS[spec.out_activation]
    for i in range(n_layers):
        W, b = store[f"{prefix}.W{i}"], store[f"{prefix}.b{i}"]
        if W.shape[0] != x.shape[-1]:
            raise ValueError(f"{prefix}.layer{i}: input width {x.shape[-1]} != weight rows {W.shape[0]}")
        x = x @ W + b
        x = act(x) if i < n_layers - 1 else out_act(x)
    return x


def mlp_forward(spec: MlpSpec, store: ParamStore, prefix: str, x):
    """Forward pass returning ``(output, tape)``; pass the tape to :func:`backward`."""
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x, dtype=np.float64))
    out = mlp_apply(spec, store, prefix, x)
    return out, Tape(out)


def backward(tape: Tape, upstream=None):
    """Accumulate gradients of ``<upstream, output>`` into all leaves (``+=``)."""
    if tape.cleared:
        raise RuntimeError("tape already consumed; rerun the forward pass")
    out = tape.output
    if upstream is None:
        upstream = torch.ones_like(out)
    elif not isinstance(upstream, torch.Tensor):
        upstream = torch.as_tensor(np.asarray(upstream, dtype=np.float64))
    out.backward(upstream)
    tape.clear()


@dataclass
class FdReport:
    max_rel_err: float
    worst_param: str
    worst_index: tuple
    analytic: float
    numeric: float
    n_checked: int
    tol: float
    errors: list = field(default_factory=list, repr=False)

    @property
    def ok(self):
        return self.max_rel_err < self.tol


def fd_check(loss_fn, params, epsilon=1e-5, tol=1e-4, n_coords=200, rng=None,
             analytic=None, floor=1e-6) -> FdReport:
    """Compare autograd gradients with central differences on sampled coordinates.

    ``params`` maps names to leaf tensors that ``loss_fn()`` reads. ``analytic``
    optionally overrides the gradients to check (negative controls). Relative
    error is ``|g - fd| / max(|g|, |fd|, floor)``.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    params = OrderedDict(params)
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    if not torch.isfinite(loss).all():
        raise FloatingPointError("fd_check: loss is not finite")
    if analytic is None:
        loss.backward()
        analytic = {n: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
                    for n, p in params.items()}

    coords = [(n, j) for n, p in params.items() for j in range(p.numel())]
    if len(coords) > n_coords:
        pick = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(pick)]

    worst = (-1.0, "", (), 0.0, 0.0)
    errors = []
    with torch.no_grad():
        for name, j in coords:
            flat = params[name].view(-1)
            orig = flat[j].item()
            flat[j] = orig + epsilon
            f_plus = loss_fn().item()
            flat[j] = orig - epsilon
            f_minus = loss_fn().item()
            flat[j] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise FloatingPointError(f"fd_check: non-finite loss at {name}[{j}]")
            num = (f_plus - f_minus) / (2 * epsilon)
            ana = analytic[name].reshape(-1)[j].item()
            rel = abs(ana - num) / max(abs(ana), abs(num), floor)
            idx = tuple(int(i) for i in np.unravel_index(j, tuple(params[name].shape)))
            errors.append((name, idx, rel))
            if rel > worst[0]:
                worst = (rel, name, idx, ana, num)
    for p in params.values():
        p.grad = None
    return FdReport(worst[0], worst[1], worst[2], worst[3], worst[4], len(coords), tol, errors)


def adamw_step(store: ParamStore, lr=1e-3, betas=(0.9, 0.999), eps=1e-8,
               weight_decay=1e-4, names=None):
    """One decoupled-weight-decay Adam update over ``names`` (default: all with grads)."""
    names = [n for n in (store.names() if names is None else names) if store[n].grad is not None]
    for n in names:
        if not torch.isfinite(store[n].grad).all():
            raise FloatingPointError(f"non-finite gradient for parameter {n!r}")
    store.step_count += 1
    t = store.step_count
    b1, b2 = betas
    with torch.no_grad():
        for n in names:
            p, g = store[n], store[n].grad
            if n not in store.moments:
                store.moments[n] = (torch.zeros_like(p), torch.zeros_like(p))
            m, v = store.moments[n]
            m.mul_(b1).add_(g, alpha=1 - b1)
            v.mul_(b2).addcmul_(g, g, value=1 - b2)
            m_hat = m / (1 - b1 ** t)
            v_hat = v / (1 - b2 ** t)
            p.mul_(1 - lr * weight_decay)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


# --- checkpoint io -------------------------------------------------------------

def params_to_bytes(arrays) -> bytes:
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def params_from_bytes(buf: bytes):
    def take(pos, n, what):
        if pos + n > len(buf):
            raise ValueError(f"truncated checkpoint while reading {what} at offset {pos}")
        return buf[pos:pos + n], pos + n

    if buf[:4] != CKPT_MAGIC:
        raise ValueError("not a parameter checkpoint (bad magic)")
    head, pos = take(4, 8, "header")
    version, count = struct.unpack("<II", head)
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    out = OrderedDict()
    for _ in range(count):
        raw, pos = take(pos, 4, "name length")
        name_b, pos = take(pos, struct.unpack("<I", raw)[0], "name")
        raw, pos = take(pos, 4, "ndim")
        ndim = struct.unpack("<I", raw)[0]
        raw, pos = take(pos, 4 * ndim, "dims")
        dims = struct.unpack(f"<{ndim}I", raw)
        data, pos = take(pos, 8 * int(np.prod(dims, dtype=np.int64)), "data")
        out[name_b.decode("utf-8")] = np.frombuffer(data, dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(buf):
        raise ValueError(f"trailing bytes in checkpoint at offset {pos}")
    return out


def save_params(path, store: ParamStore):
    Path(path).write_bytes(params_to_bytes(store.numpy()))


def load_params(path, store: ParamStore | None = None):
    """Load a checkpoint; into ``store`` (shape-checked) when given, else a fresh store."""
    arrays = params_from_bytes(Path(path).read_bytes())
    if store is None:
        store = ParamStore()
        for n, a in arrays.items():
            store.add(n, a)
        return store
    store.load_state(arrays)
    return store
