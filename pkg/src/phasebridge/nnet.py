"""Residual MLP policies with hand-written reverse-mode gradients.

The two drift policies (forward and backward) share one fixed architecture:

    emb  = sinusoidal(t)                              # no parameters
    a0   = concat([m, emb], axis=1)                   # (B, 2d + E)
    h    = silu(a0 @ W_in + b_in)                     # (B, W)
    for each residual block r = 1..R:
        u  = silu(h @ A_r + a_r)                      # (B, W)
        h  = h + u @ B_r + b_r                        # skip connection
    out  = h @ W_out + b_out                          # (B, d), zero-init

so the parameter count is

    (2d + E)·W + W  +  R·(2·(W² + W))  +  W·d + d.

All parameters live in one flat vector; the optimizer state (AdamW moments,
EMA shadow) is flat as well. Gradients are accumulated by an explicit
reverse pass over this fixed graph — there is deliberately no autodiff
dependency, so finite-difference checks exercise an independent route.

Training math is float32; tests can build float64 nets for gradient checks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import expit

# Angular frequencies of the sinusoidal time embedding, log-spaced to cover
# both the horizon scale (T = a few units) and the finest step scale
# (default step 0.01).
_EMB_FREQ_MIN = 0.5
_EMB_FREQ_MAX = 300.0

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ConfigurationError(ValueError):
    """Invalid architecture or run configuration."""


@dataclass(frozen=True)
class ArchConfig:
    """Shape of the policy network.

    Args:
        state_dim: d; positions and velocities each have d coordinates, the
            network input is the 2d phase vector plus the time embedding and
            the output is a d-dimensional (unscaled) velocity control.
        hidden_width: Units per hidden layer.
        num_residual_blocks: Residual blocks between the input and output
            projections.
        time_embed_dim: Size of the sinusoidal time embedding (even).
        activation_id: Only "silu" is supported.
        param_init_seed: Seed for the deterministic init.
    """

    state_dim: int
    hidden_width: int = 128
    num_residual_blocks: int = 2
    time_embed_dim: int = 64
    activation_id: str = "silu"
    param_init_seed: int = 0

    @property
    def input_dim(self) -> int:
        return 2 * self.state_dim

    def validate(self) -> None:
        if self.state_dim < 1:
            raise ConfigurationError(f"state_dim must be >= 1, got {self.state_dim}")
        if self.hidden_width < 1:
            raise ConfigurationError(
                f"hidden_width must be >= 1, got {self.hidden_width}"
            )
        if self.num_residual_blocks < 1:
            raise ConfigurationError(
                f"num_residual_blocks must be >= 1, got {self.num_residual_blocks}"
            )
        if self.time_embed_dim < 2 or self.time_embed_dim % 2 != 0:
            raise ConfigurationError(
                f"time_embed_dim must be even and >= 2, got {self.time_embed_dim}"
            )
        if self.activation_id != "silu":
            raise ConfigurationError(f"unknown activation {self.activation_id!r}")


def _layout(arch: ArchConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list of all parameter tensors."""
    d, w = arch.state_dim, arch.hidden_width
    in_dim = 2 * d + arch.time_embed_dim
    layers: list[tuple[str, tuple[int, ...]]] = [
        ("w_in", (in_dim, w)),
        ("b_in", (w,)),
    ]
    for r in range(arch.num_residual_blocks):
        layers += [
            (f"blk{r}_w1", (w, w)),
            (f"blk{r}_b1", (w,)),
            (f"blk{r}_w2", (w, w)),
            (f"blk{r}_b2", (w,)),
        ]
    layers += [("w_out", (w, d)), ("b_out", (d,))]
    return layers


def param_count(arch: ArchConfig) -> int:
    """Total number of parameters implied by the architecture."""
    return sum(int(np.prod(shape)) for _, shape in _layout(arch))


def _views(arch: ArchConfig, flat: np.ndarray) -> dict[str, np.ndarray]:
    """Named views into the flat parameter vector (no copies)."""
    out: dict[str, np.ndarray] = {}
    pos = 0
    for name, shape in _layout(arch):
        size = int(np.prod(shape))
        out[name] = flat[pos : pos + size].reshape(shape)
        pos += size
    return out


@dataclass
class PolicyNet:
    """One drift policy: parameters, AdamW state, and an EMA shadow."""

    arch: ArchConfig
    params: np.ndarray
    ema_params: np.ndarray
    opt_m: np.ndarray
    opt_v: np.ndarray
    step: int = 0
    ema_decay: float = 0.999
    direction_tag: str = "forward"

    def __post_init__(self) -> None:
        n = self.params.shape[0]
        for name in ("ema_params", "opt_m", "opt_v"):
            if getattr(self, name).shape != (n,):
                raise ConfigurationError(f"{name} length differs from params")

    @property
    def dtype(self) -> np.dtype:
        return self.params.dtype

    def clone(self) -> "PolicyNet":
        return replace(
            self,
            params=self.params.copy(),
            ema_params=self.ema_params.copy(),
            opt_m=self.opt_m.copy(),
            opt_v=self.opt_v.copy(),
        )


def net_init(
    arch: ArchConfig,
    seed: int | None = None,
    direction_tag: str = "forward",
    dtype=np.float32,
) -> PolicyNet:
    """Deterministically initialize a policy.

    Hidden layers use the uniform fan-in rule U(-1/sqrt(fan_in), 1/sqrt(fan_in))
    for weights and biases; the output projection is zero so freshly built
    policies output z = 0 (the uncontrolled reference process). The EMA
    shadow starts equal to the parameters and the AdamW moments at zero.
    """
    arch.validate()
    if seed is None:
        seed = arch.param_init_seed
    rng = np.random.default_rng(np.random.SeedSequence(entropy=int(seed)))
    pieces = []
    for name, shape in _layout(arch):
        if name.startswith(("w_out", "b_out")):
            pieces.append(np.zeros(int(np.prod(shape))))
            continue
        # Bias bounds follow their layer's weight fan-in.
        fan_in = shape[0] if len(shape) == 2 else _bias_fan_in(arch, name)
        bound = 1.0 / np.sqrt(fan_in)
        pieces.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
    params = np.concatenate(pieces).astype(dtype)
    return PolicyNet(
        arch=arch,
        params=params,
        ema_params=params.copy(),
        opt_m=np.zeros_like(params),
        opt_v=np.zeros_like(params),
        step=0,
        direction_tag=direction_tag,
    )


def _bias_fan_in(arch: ArchConfig, bias_name: str) -> int:
    if bias_name == "b_in":
        return 2 * arch.state_dim + arch.time_embed_dim
    return arch.hidden_width


def time_embedding(t: np.ndarray, dim: int, dtype=np.float32) -> np.ndarray:
    """Sinusoidal embedding of scalar times, shape (B, dim)."""
    half = dim // 2
    freqs = np.geomspace(_EMB_FREQ_MIN, _EMB_FREQ_MAX, half).astype(dtype)
    args = np.asarray(t, dtype=dtype).reshape(-1, 1) * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


def _silu(x: np.ndarray) -> np.ndarray:
    return x * expit(x)


def _silu_grad(x: np.ndarray) -> np.ndarray:
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _as_batch(t, m: np.ndarray, arch: ArchConfig) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(m)
    if m.ndim != 2 or m.shape[1] != 2 * arch.state_dim:
        raise ValueError(
            f"phase batch must be (B, {2 * arch.state_dim}), got {m.shape}"
        )
    t = np.asarray(t, dtype=m.dtype)
    if t.ndim == 0:
        t = np.full(m.shape[0], float(t), dtype=m.dtype)
    if t.shape != (m.shape[0],):
        raise ValueError(f"time batch must be scalar or ({m.shape[0]},), got {t.shape}")
    return t, m


def _forward(
    views: dict[str, np.ndarray],
    arch: ArchConfig,
    t: np.ndarray,
    m: np.ndarray,
    keep: bool,
):
    """Forward pass; optionally keep intermediates for the reverse pass."""
    dtype = views["w_in"].dtype
    emb = time_embedding(t, arch.time_embed_dim, dtype=dtype)
    a0 = np.concatenate([m.astype(dtype, copy=False), emb], axis=1)
    z_in = a0 @ views["w_in"] + views["b_in"]
    h = _silu(z_in)
    cache = {"a0": a0, "z_in": z_in} if keep else None
    hs = [h] if keep else None
    zs = [] if keep else None
    us = [] if keep else None
    for r in range(arch.num_residual_blocks):
        z = h @ views[f"blk{r}_w1"] + views[f"blk{r}_b1"]
        u = _silu(z)
        h = h + u @ views[f"blk{r}_w2"] + views[f"blk{r}_b2"]
        if keep:
            zs.append(z)
            us.append(u)
            hs.append(h)
    out = h @ views["w_out"] + views["b_out"]
    if keep:
        cache.update(hs=hs, zs=zs, us=us)
    return out, cache


def net_eval(net: PolicyNet, t, m, use_ema: bool = False) -> np.ndarray:
    """Evaluate the policy: (B,) times and (B, 2d) phase points -> (B, d).

    The output is the unscaled control z; the diffusion scale g is applied
    by the simulator and the loss, never inside the network.
    """
    t, m = _as_batch(t, m, net.arch)
    flat = net.ema_params if use_ema else net.params
    out, _ = _forward(_views(net.arch, flat), net.arch, t, m, keep=False)
    return out


def policy_eval(net, t, m, use_ema: bool = False) -> np.ndarray:
    """Evaluate a policy or a plain callable stub.

    Simulation, Langevin refreshes, and frozen-reference loss terms accept
    any callable (t, m) -> (B, d) in place of a trained policy; diagnostics
    and oracles use this to inject exact closed-form controls. Gradient
    paths still require a real PolicyNet.
    """
    if callable(net):
        return np.asarray(net(t, m))
    return net_eval(net, t, m, use_ema=use_ema)


def net_backprop(net: PolicyNet, t, m, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * net(t, m)) w.r.t. the flat parameters.

    Always differentiates the raw (non-EMA) parameters; returns a flat
    vector matching ``net.params``.
    """
    t, m = _as_batch(t, m, net.arch)
    upstream = np.asarray(upstream, dtype=net.dtype)
    if not np.all(np.isfinite(upstream)):
        raise ValueError("non-finite upstream gradient")
    arch = net.arch
    views = _views(arch, net.params)
    out, cache = _forward(views, arch, t, m, keep=True)
    if upstream.shape != out.shape:
        raise ValueError(f"upstream shape {upstream.shape} != output {out.shape}")

    grads: dict[str, np.ndarray] = {}
    hs, zs, us = cache["hs"], cache["zs"], cache["us"]
    h_last = hs[-1]
    grads["w_out"] = h_last.T @ upstream
    grads["b_out"] = upstream.sum(axis=0)
    gh = upstream @ views["w_out"].T
    for r in reversed(range(arch.num_residual_blocks)):
        h_prev, z, u = hs[r], zs[r], us[r]
        grads[f"blk{r}_w2"] = u.T @ gh
        grads[f"blk{r}_b2"] = gh.sum(axis=0)
        gz = (gh @ views[f"blk{r}_w2"].T) * _silu_grad(z)
        grads[f"blk{r}_w1"] = h_prev.T @ gz
        grads[f"blk{r}_b1"] = gz.sum(axis=0)
        gh = gh + gz @ views[f"blk{r}_w1"].T
    gz_in = gh * _silu_grad(cache["z_in"])
    grads["w_in"] = cache["a0"].T @ gz_in
    grads["b_in"] = gz_in.sum(axis=0)

    flat = np.empty_like(net.params)
    pos = 0
    for name, shape in _layout(arch):
        size = int(np.prod(shape))
        flat[pos : pos + size] = grads[name].reshape(-1)
        pos += size
    return flat


def adamw_step(
    net: PolicyNet,
    grad: np.ndarray,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = ADAM_BETA1,
    beta2: float = ADAM_BETA2,
    eps: float = ADAM_EPS,
) -> PolicyNet:
    """One AdamW update (decoupled weight decay) followed by the EMA update.

    Mutates the net in place and returns it. A non-finite gradient raises
    before any state is touched.
    """
    grad = np.asarray(grad, dtype=net.dtype)
    if grad.shape != net.params.shape:
        raise ValueError("gradient length differs from params")
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    net.step += 1
    net.opt_m *= beta1
    net.opt_m += (1.0 - beta1) * grad
    net.opt_v *= beta2
    net.opt_v += (1.0 - beta2) * grad * grad
    bias1 = 1.0 - beta1**net.step
    bias2 = 1.0 - beta2**net.step
    m_hat = net.opt_m / bias1
    v_hat = net.opt_v / bias2
    net.params -= lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * net.params)
    net.ema_params *= net.ema_decay
    net.ema_params += (1.0 - net.ema_decay) * net.params
    return net


def save_checkpoint(net: PolicyNet, path: str | Path) -> None:
    """Write a policy (arch, params, EMA, optimizer moments) to one file."""
    arch_doc = {
        "state_dim": net.arch.state_dim,
        "hidden_width": net.arch.hidden_width,
        "num_residual_blocks": net.arch.num_residual_blocks,
        "time_embed_dim": net.arch.time_embed_dim,
        "activation_id": net.arch.activation_id,
        "param_init_seed": net.arch.param_init_seed,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format_version=np.int64(1),
            arch_json=np.frombuffer(json.dumps(arch_doc).encode(), dtype=np.uint8),
            params=net.params,
            ema_params=net.ema_params,
            opt_m=net.opt_m,
            opt_v=net.opt_v,
            step=np.int64(net.step),
            ema_decay=np.float64(net.ema_decay),
            direction_tag=np.frombuffer(net.direction_tag.encode(), dtype=np.uint8),
        )


def load_checkpoint(path: str | Path) -> PolicyNet:
    with np.load(path) as z:
        version = int(z["format_version"])
        if version != 1:
            raise ValueError(f"unsupported checkpoint version {version}")
        arch = ArchConfig(**json.loads(bytes(z["arch_json"]).decode()))
        return PolicyNet(
            arch=arch,
            params=z["params"].copy(),
            ema_params=z["ema_params"].copy(),
            opt_m=z["opt_m"].copy(),
            opt_v=z["opt_v"].copy(),
            step=int(z["step"]),
            ema_decay=float(z["ema_decay"]),
            direction_tag=bytes(z["direction_tag"]).decode(),
        )
