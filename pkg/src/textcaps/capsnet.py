"""Capsule classifier: primary capsules, routing by agreement, margin loss.

The classifier maps a batch of 28x28x1 images to an instantiation tensor
``C`` of shape (batch, classes, 16):

    conv 3x3x64 s1 + relu  -> 28x28x64
    conv 3x3x128 s1 + relu -> 28x28x128
    conv 3x3x256 s2 + relu -> 14x14x256
    conv 9x9x256 s2        -> 7x7x256, read as 7*7*32 = 1568 capsules of dim 8
    squash per capsule
    votes u_hat = W_ij u_i -> (1568, classes, 16)
    routing by agreement (3 iterations) -> one 16-d capsule per class

All ops keep a forward/backward pair; the routing backward replays the
iteration cache in reverse, so gradients flow through every coupling update
rather than just the last iteration.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .tensor import ParamStore, glorot_uniform, make_rng, maybe_check

CAPSULE_DIM = 8
CLASS_CAPSULE_DIM = 16


@dataclass(frozen=True)
class ClassifierConfig:
    """Geometry of the capsule classifier.

    Defaults give the 28x28 text-recognition network; tests shrink the channel
    counts and image size to keep finite-difference sweeps fast while running
    the identical code path.  The capsule dimensions (8 primary, 16 class) are
    fixed characteristics of the architecture, not tunables.
    """

    num_classes: int
    image_size: int = 28
    conv_channels: tuple = (64, 128, 256)
    conv_kernels: tuple = (3, 3, 3)
    conv_strides: tuple = (1, 1, 2)
    primary_channels: int = 32
    primary_kernel: int = 9
    primary_stride: int = 2
    routing_iterations: int = 3

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        if self.routing_iterations < 1:
            raise ValueError("routing_iterations must be >= 1")
        if not (len(self.conv_channels) == len(self.conv_kernels) == len(self.conv_strides)):
            raise ValueError("conv layer tuples must have equal length")

    @property
    def grid_size(self):
        n = self.image_size
        for s in self.conv_strides:
            n = -(-n // s)
        return -(-n // self.primary_stride)

    @property
    def num_primary_capsules(self):
        return self.grid_size * self.grid_size * self.primary_channels


def init_classifier_params(cfg, rng, dtype=np.float64, store=None, prefix=""):
    """Create classifier parameters in a fixed order (seed-reproducible)."""
    params = store if store is not None else ParamStore()
    cin = 1
    for i, (ch, k, _s) in enumerate(
        zip(cfg.conv_channels, cfg.conv_kernels, cfg.conv_strides), start=1
    ):
        fan_in, fan_out = k * k * cin, k * k * ch
        params.add(f"{prefix}conv{i}/w", glorot_uniform(rng, (k, k, cin, ch), fan_in, fan_out, dtype))
        params.add(f"{prefix}conv{i}/b", np.zeros(ch, dtype=dtype))
        cin = ch
    k = cfg.primary_kernel
    pc = cfg.primary_channels * CAPSULE_DIM
    params.add(
        f"{prefix}primary/w",
        glorot_uniform(rng, (k, k, cin, pc), k * k * cin, k * k * pc, dtype),
    )
    params.add(f"{prefix}primary/b", np.zeros(pc, dtype=dtype))
    params.add(
        f"{prefix}transform/w",
        glorot_uniform(
            rng,
            (cfg.num_primary_capsules, cfg.num_classes, CLASS_CAPSULE_DIM, CAPSULE_DIM),
            CAPSULE_DIM,
            CLASS_CAPSULE_DIM,
            dtype,
        ),
    )
    return params


def squash(s, axis=-1):
    """v = (|s|^2 / (1 + |s|^2)) * s / |s|, applied along *axis*.

    Shrinks short vectors toward 0 and long ones toward unit length without
    changing direction.  squash(0) = 0 exactly.
    """
    sq = np.sum(np.square(s), axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    scale = np.where(norm > 0, sq / ((1.0 + sq) * np.where(norm > 0, norm, 1.0)), 0.0)
    return maybe_check(s * scale, "squash output")


def squash_backward(dv, s, axis=-1):
    """Jacobian-vector product of squash at s (axis = capsule axis).

    With n = |s|: J = n/(1+n^2) I + (1-n^2)/((1+n^2)^2 n) s s^T; at s = 0 the
    map is smoothly 0, so the gradient is 0 there.
    """
    sq = np.sum(np.square(s), axis=axis, keepdims=True)
    norm = np.sqrt(sq)
    safe = np.where(norm > 0, norm, 1.0)
    a = norm / (1.0 + sq)
    b = (1.0 - sq) / (np.square(1.0 + sq) * safe)
    dot = np.sum(dv * s, axis=axis, keepdims=True)
    ds = a * dv + b * dot * s
    return np.where(norm > 0, ds, 0.0)


def votes(u, w):
    """Prediction vectors u_hat[j, i, m] = W[i, m] @ u[j, i].

    u: (batch, num_in, 8); w: (num_in, classes, 16, 8) -> (batch, num_in, classes, 16).
    """
    j, n, d = u.shape
    n_w, m, out_d, in_d = w.shape
    if n != n_w or d != in_d:
        raise ValueError(f"votes: u {u.shape} does not match w {w.shape}")
    # (n, m*16, 8) @ (j, n, 8, 1) -> batched matmul over (j, n)
    w_mat = w.reshape(n, m * out_d, in_d)
    out = np.matmul(w_mat, u[..., None]).reshape(j, n, m, out_d)
    return maybe_check(out, "votes output")


def votes_backward(du_hat, u, w):
    j, n, d = u.shape
    m, out_d = w.shape[1], w.shape[2]
    dmat = du_hat.reshape(j, n, m * out_d)
    w_mat = w.reshape(n, m * out_d, d)
    du = np.matmul(dmat[:, :, None, :], w_mat).reshape(j, n, d)
    # dW[n] = sum_j du_hat[j,n] u[j,n]^T -> (n, m*16, j) @ (n, j, 8)
    dw = np.matmul(dmat.transpose(1, 2, 0), u.transpose(1, 0, 2)).reshape(w.shape)
    return du, dw


def _softmax(z, axis):
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass
class RoutingState:
    """Per-iteration snapshots kept by the routing forward for its backward."""

    u_hat: np.ndarray
    couplings: list = field(default_factory=list)  # c_t, (batch, num_in, classes)
    pre_squash: list = field(default_factory=list)  # s_t, (batch, classes, 16)
    outputs: list = field(default_factory=list)  # v_t, (batch, classes, 16)


def route_batch(u_hat, iterations=3):
    """Dynamic routing by agreement over a batch of vote tensors.

    u_hat: (batch, num_in, classes, 16).  Logits start at zero, couplings are a
    softmax over the class axis (each input capsule distributes a unit budget),
    and agreement u_hat . v is added to the logits after every iteration except
    the last.  Returns (v, c, state): v (batch, classes, 16), c the final
    couplings (batch, num_in, classes).
    """
    if iterations < 1:
        raise ValueError("routing needs at least one iteration")
    jb, n, m, d = u_hat.shape
    b = np.zeros((jb, n, m), dtype=u_hat.dtype)
    state = RoutingState(u_hat=u_hat)
    c = v = None
    for t in range(iterations):
        c = _softmax(b, axis=2)
        s = np.einsum("jnm,jnmd->jmd", c, u_hat)
        v = squash(s, axis=-1)
        state.couplings.append(c)
        state.pre_squash.append(s)
        state.outputs.append(v)
        if t < iterations - 1:
            b = b + np.einsum("jnmd,jmd->jnm", u_hat, v)
    return maybe_check(v, "routing output"), c, state


def route(u_hat, iterations=3):
    """Single-sample routing: u_hat (num_in, classes, 16) -> (v, c)."""
    v, c, _ = route_batch(u_hat[None], iterations)
    return v[0], c[0]


def _softmax_backward(c, dc, axis):
    dot = np.sum(dc * c, axis=axis, keepdims=True)
    return c * (dc - dot)


def route_backward(dv_out, state, dc_out=None):
    """Reverse-mode through the routing iterations. Returns du_hat.

    Replays the cached (c_t, s_t, v_t) history backwards.  ``db`` carries the
    gradient with respect to the running logits between iterations; each v_t
    (t < last) receives gradient only through the agreement update it fed.
    """
    u_hat = state.u_hat
    iterations = len(state.couplings)
    du_hat = np.zeros_like(u_hat)
    db = np.zeros_like(state.couplings[0])
    for t in range(iterations - 1, -1, -1):
        c_t, s_t = state.couplings[t], state.pre_squash[t]
        if t == iterations - 1:
            dv = np.asarray(dv_out, dtype=u_hat.dtype)
            dc_extra = dc_out
        else:
            # b_{t+1} = b_t + sum_d u_hat * v_t; db currently holds dL/db_{t+1}
            du_hat += db[..., None] * state.outputs[t][:, None, :, :]
            dv = np.einsum("jnm,jnmd->jmd", db, u_hat)
            dc_extra = None
        ds = squash_backward(dv, s_t, axis=-1)
        dc = np.einsum("jnmd,jmd->jnm", u_hat, ds)
        if dc_extra is not None:
            dc = dc + dc_extra
        du_hat += c_t[..., None] * ds[:, None, :, :]
        db = (0.0 if t == iterations - 1 else db) + _softmax_backward(c_t, dc, axis=2)
    return du_hat


def classifier_forward(images, params, cfg, prefix=""):
    """images (batch, H, W, 1) -> instantiation tensor C (batch, classes, 16).

    Returns (C, cache); pass the cache to :func:`classifier_backward`.
    """
    if images.ndim != 4 or images.shape[3] != 1:
        raise ValueError(f"expected (batch, H, W, 1) images, got {images.shape}")
    cache = {"inputs": []}
    x = images
    for i, (k, s) in enumerate(zip(cfg.conv_kernels, cfg.conv_strides), start=1):
        spec = kernels.ConvSpec(k, k, s, "same")
        pre = kernels.conv2d(x, params[f"{prefix}conv{i}/w"].value, params[f"{prefix}conv{i}/b"].value, spec)
        cache["inputs"].append((x, spec, pre))
        x = kernels.relu(pre)
    spec = kernels.ConvSpec(cfg.primary_kernel, cfg.primary_kernel, cfg.primary_stride, "same")
    pre = kernels.conv2d(x, params[f"{prefix}primary/w"].value, params[f"{prefix}primary/b"].value, spec)
    cache["primary"] = (x, spec)
    jb = images.shape[0]
    u_raw = pre.reshape(jb, cfg.num_primary_capsules, CAPSULE_DIM)
    u = squash(u_raw, axis=-1)
    u_hat = votes(u, params[f"{prefix}transform/w"].value)
    v, c, state = route_batch(u_hat, cfg.routing_iterations)
    cache.update(u_raw=u_raw, u=u, state=state, pre_shape=pre.shape, couplings=c)
    return v, cache


def classifier_backward(dC, cache, params, cfg, prefix=""):
    """Accumulate parameter gradients for :func:`classifier_forward`.

    Returns the gradient with respect to the input images (same shape).
    """
    du_hat = route_backward(np.asarray(dC), cache["state"])
    du, dw_t = votes_backward(du_hat, cache["u"], params[f"{prefix}transform/w"].value)
    params[f"{prefix}transform/w"].grad += dw_t
    du_raw = squash_backward(du, cache["u_raw"], axis=-1)
    dpre = du_raw.reshape(cache["pre_shape"])
    x, spec = cache["primary"]
    dx, dw, db = kernels.conv2d_backward(dpre, x, params[f"{prefix}primary/w"].value, spec)
    params[f"{prefix}primary/w"].grad += dw
    params[f"{prefix}primary/b"].grad += db
    for i in range(len(cfg.conv_kernels), 0, -1):
        x, spec, pre = cache["inputs"][i - 1]
        dpre = kernels.relu_backward(dx, pre)
        dx, dw, db = kernels.conv2d_backward(dpre, x, params[f"{prefix}conv{i}/w"].value, spec)
        params[f"{prefix}conv{i}/w"].grad += dw
        params[f"{prefix}conv{i}/b"].grad += db
    return dx


def capsule_lengths(C):
    """Euclidean norm of each class capsule: (batch, classes, 16) -> (batch, classes)."""
    return np.sqrt(np.sum(np.square(C), axis=-1))


def capsule_lengths_backward(dlen, C):
    lengths = capsule_lengths(C)[..., None]
    safe = np.where(lengths > 0, lengths, 1.0)
    return np.where(lengths > 0, dlen[..., None] * C / safe, 0.0)


def margin_loss(lengths, labels, m_plus=0.9, m_minus=0.1, lam=0.5):
    """Class-presence margin loss, summed over classes and averaged over batch.

    L_k = T_k max(0, m+ - |v_k|)^2 + lam (1 - T_k) max(0, |v_k| - m-)^2
    """
    lengths = np.asarray(lengths)
    jb, m = lengths.shape
    t = np.zeros((jb, m), dtype=lengths.dtype)
    t[np.arange(jb), np.asarray(labels, dtype=int)] = 1.0
    pos = np.square(np.maximum(0.0, m_plus - lengths))
    neg = np.square(np.maximum(0.0, lengths - m_minus))
    per_sample = np.sum(t * pos + lam * (1.0 - t) * neg, axis=1)
    return float(np.mean(per_sample))


def margin_loss_backward(lengths, labels, m_plus=0.9, m_minus=0.1, lam=0.5):
    """d(margin_loss)/d(lengths), shape (batch, classes)."""
    lengths = np.asarray(lengths)
    jb, m = lengths.shape
    t = np.zeros((jb, m), dtype=lengths.dtype)
    t[np.arange(jb), np.asarray(labels, dtype=int)] = 1.0
    dpos = -2.0 * np.maximum(0.0, m_plus - lengths)
    dneg = 2.0 * np.maximum(0.0, lengths - m_minus)
    return (t * dpos + lam * (1.0 - t) * dneg) / jb


def classify(C):
    """Predicted label per sample: argmax of capsule length (ties -> lowest index)."""
    return np.argmax(capsule_lengths(C), axis=-1)
