"""Differentiable-computation layer: the primitive op set used by the networks
and losses, finite-difference gradient checking, the Adam update, and the
checkpoint file format.

Backed by torch's CPU autograd; every primitive below is what the models are
composed from and is covered by gradient_check in the test suite.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np
import torch
import torch.nn.functional as F


class ContractError(ValueError):
    """A substrate contract precondition was violated."""


def configure_threads(default: int | None = None) -> int:
    """Cap intra-op parallelism from REFSR_THREADS (or the given default).

    Without either, fall back to the process CPU affinity; oversubscribing a
    small container with torch's host-wide default slows CPU training badly.
    """
    n = os.environ.get("REFSR_THREADS")
    if n is not None:
        torch.set_num_threads(int(n))
    elif default is not None:
        torch.set_num_threads(default)
    else:
        try:
            avail = len(os.sched_getaffinity(0))
        except AttributeError:
            avail = os.cpu_count() or 1
        torch.set_num_threads(min(avail, torch.get_num_threads()))
    return torch.get_num_threads()


# --- primitive op set --------------------------------------------------------

def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    if x.ndim != 4 or weight.ndim != 4:
        raise ContractError(f"conv2d expects NCHW input and OIHW weight, got {tuple(x.shape)}, {tuple(weight.shape)}")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding)


def upsample_nearest2x(x):
    return F.interpolate(x, scale_factor=2, mode="nearest")


def matmul(a, b):
    return a @ b


def softmax_lastdim(x):
    return torch.softmax(x, dim=-1)


def group_norm(x, num_groups, weight=None, bias=None, eps: float = 1e-5):
    return F.group_norm(x, num_groups, weight, bias, eps)


def leaky_relu(x, slope: float = 0.2):
    return F.leaky_relu(x, slope)


def silu(x):
    return F.silu(x)


def sigmoid(x):
    return torch.sigmoid(x)


def softplus(x):
    return F.softplus(x)


def mean_all(x):
    return x.mean()


def concat_channels(tensors):
    return torch.cat(tensors, dim=1)


def dft2(x, norm: str | None = None):
    """2D DFT of real input over the last two axes, complex spectrum out.

    norm=None is the unnormalized convention; "ortho" scales by 1/sqrt(N*M),
    which is what makes the frequency loss Parseval-equal to the pixel loss.
    """
    if x.shape[-1] < 1 or x.shape[-2] < 1:
        raise ContractError(f"dft2 needs >= 2 spatial dims, got shape {tuple(x.shape)}")
    return torch.fft.fft2(x, norm=norm)


# --- gradient checking -------------------------------------------------------

def gradient_check(fn, inputs, eps: float = 1e-5) -> dict:
    """Compare reverse-mode gradients against central finite differences.

    fn maps the given tensors to a scalar; inputs are float64 tensors.  Returns
    {"max_rel_error": float} with the relative error denominated by
    max(|analytic|, |numeric|, 1e-8).
    """
    inputs = [t.detach().double().clone().requires_grad_(True) for t in inputs]
    out = fn(*inputs)
    if out.numel() != 1:
        raise ContractError(f"gradient_check needs a scalar output, got shape {tuple(out.shape)}")
    grads = torch.autograd.grad(out, inputs, allow_unused=True)

    max_rel = 0.0
    for t, g in zip(inputs, grads):
        analytic = torch.zeros_like(t) if g is None else g
        flat = t.detach().reshape(-1)
        num = torch.zeros_like(flat)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = fn(*inputs).item()
            flat[i] = orig - eps
            fm = fn(*inputs).item()
            flat[i] = orig
            num[i] = (fp - fm) / (2 * eps)
        num = num.reshape(t.shape)
        denom = torch.clamp(torch.maximum(analytic.abs(), num.abs()), min=1e-8)
        max_rel = max(max_rel, float(((analytic - num).abs() / denom).max()))
    return {"max_rel_error": max_rel}


# --- optimizer ----------------------------------------------------------------

class AdamState:
    """First/second moment buffers plus the shared step counter."""

    def __init__(self, params):
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.step = 0


@torch.no_grad()
def adam_step(params, grads, state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """Bias-corrected adaptive moment update, in place on the parameters."""
    if lr <= 0:
        raise ContractError(f"lr must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p.add_(m_hat / (v_hat.sqrt() + eps), alpha=-lr)
    return state


# --- checkpoint format ---------------------------------------------------------

_CKPT_MAGIC = b"RCKP1\x00"


def save_checkpoint(path, named_params: dict, header: dict) -> None:
    """Flat ordered (name, shape, float32 LE values) records after a JSON header."""
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        f.write(struct.pack("<I", len(named_params)))
        for name, tensor in named_params.items():
            arr = np.ascontiguousarray(
                tensor.detach().cpu().numpy() if isinstance(tensor, torch.Tensor) else tensor,
                dtype="<f4",
            )
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> tuple[dict, dict]:
    """Returns (header, {name: float32 ndarray})."""
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:6] != _CKPT_MAGIC:
        raise ContractError(f"{path}: not a checkpoint file")
    off = 6
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    params = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
    return header, params
