"""Goal-conditioned policies trained by backpropagation(-through-time) on a
windowed mean-squared-error imitation objective.

Two variants share the linear output head:
  * "lstm": two gated recurrent layers unrolled over flat observations.
    Gates (input i, forget f, cell g, output o) follow the standard equations
      i = sig(W_i x + U_i h + b_i)      f = sig(W_f x + U_f h + b_f)
      g = tanh(W_g x + U_g h + b_g)     o = sig(W_o x + U_o h + b_o)
      c' = f*c + i*g                    h' = o * tanh(c')
    with the four gate blocks stacked row-wise in one matrix per layer.
  * "stacked_ff": a two-hidden-layer tanh net over the flattened stacked
    (8, J+5) observation.

All tensors are float64; everything is deterministic under a seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .dataset import WindowSample

ARCH_LSTM = "lstm"
ARCH_STACKED_FF = "stacked_ff"

_TENSOR_ORDER = {
    ARCH_LSTM: ("W0", "U0", "b0", "W1", "U1", "b1", "Wy", "by"),
    ARCH_STACKED_FF: ("W0", "b0", "W1", "b1", "Wy", "by"),
}

CHECKPOINT_MAGIC = b"TTGOALS-CKPT1\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, episode_ids: Sequence[str] = ()):
        super().__init__(message)
        self.episode_ids = list(episode_ids)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    k: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning rate must be positive")
        if self.k < 1:
            raise ValueError("window length k must be >= 1")


@dataclass
class PolicyParams:
    arch: str
    obs_layout: str
    input_dim: int
    hidden: int
    out_dim: int
    tensors: dict[str, np.ndarray]
    version: int = 1

    def copy(self) -> "PolicyParams":
        return replace(self, tensors={k: v.copy() for k, v in self.tensors.items()})

    def tensor_order(self) -> tuple[str, ...]:
        return _TENSOR_ORDER[self.arch]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.tensors[k].ravel() for k in self.tensor_order()])

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        out = {}
        at = 0
        for k in self.tensor_order():
            t = self.tensors[k]
            out[k] = vec[at : at + t.size].reshape(t.shape).copy()
            at += t.size
        if at != vec.size:
            raise ValueError("flat vector size mismatch")
        return replace(self, tensors=out)


@dataclass
class RecurrentState:
    h: list[np.ndarray] = field(default_factory=list)
    c: list[np.ndarray] = field(default_factory=list)


def init_recurrent_state(params: PolicyParams) -> RecurrentState:
    """Zeroed per-layer hidden and cell vectors (reset at episode start)."""
    if params.arch != ARCH_LSTM:
        return RecurrentState()
    H = params.hidden
    return RecurrentState(
        h=[np.zeros(H), np.zeros(H)],
        c=[np.zeros(H), np.zeros(H)],
    )


def init_params(
    arch: str,
    input_dim: int,
    hidden: int,
    out_dim: int,
    rng,
    obs_layout: str = "flat",
) -> PolicyParams:
    """Uniform fan-in initialization; the LSTM forget-gate bias starts at +1."""

    def uni(shape, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, size=shape)

    H = hidden
    t: dict[str, np.ndarray] = {}
    if arch == ARCH_LSTM:
        t["W0"] = uni((4 * H, input_dim), input_dim)
        t["U0"] = uni((4 * H, H), H)
        t["b0"] = np.zeros(4 * H)
        t["b0"][H : 2 * H] = 1.0  # forget gate block
        t["W1"] = uni((4 * H, H), H)
        t["U1"] = uni((4 * H, H), H)
        t["b1"] = np.zeros(4 * H)
        t["b1"][H : 2 * H] = 1.0
    elif arch == ARCH_STACKED_FF:
        t["W0"] = uni((H, input_dim), input_dim)
        t["b0"] = np.zeros(H)
        t["W1"] = uni((H, H), H)
        t["b1"] = np.zeros(H)
    else:
        raise ValueError(f"unknown architecture {arch!r}")
    t["Wy"] = uni((out_dim, H), H)
    t["by"] = np.zeros(out_dim)
    return PolicyParams(
        arch=arch,
        obs_layout=obs_layout,
        input_dim=input_dim,
        hidden=H,
        out_dim=out_dim,
        tensors=t,
    )


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _flatten_obs(obs: np.ndarray) -> np.ndarray:
    """Stacked observations flatten to one vector per tick."""
    if obs.ndim >= 2:
        return obs.reshape(*obs.shape[:-2], -1) if obs.ndim > 2 else obs.reshape(-1)
    return obs


# ---------------------------------------------------------------------------
# Forward / streaming inference
# ---------------------------------------------------------------------------


def _lstm_layer_forward(W, U, b, X):
    """X: (B, T, D) -> gates and states, each (B, T, H).

    The input projection X@W.T runs as one batched GEMM; only the recurrent
    h@U.T stays inside the tick loop.
    """
    B, T, _ = X.shape
    H = U.shape[1]
    I = np.empty((B, T, H))
    F = np.empty((B, T, H))
    G = np.empty((B, T, H))
    O = np.empty((B, T, H))
    C = np.empty((B, T, H))
    Hs = np.empty((B, T, H))
    TC = np.empty((B, T, H))
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    XW = X @ W.T + b
    Ut = U.T
    for t in range(T):
        z = XW[:, t] + h @ Ut
        i = _sigmoid(z[:, :H])
        f = _sigmoid(z[:, H : 2 * H])
        g = np.tanh(z[:, 2 * H : 3 * H])
        o = _sigmoid(z[:, 3 * H :])
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        I[:, t], F[:, t], G[:, t], O[:, t] = i, f, g, o
        C[:, t], Hs[:, t], TC[:, t] = c, h, tc
    return {"X": X, "I": I, "F": F, "G": G, "O": O, "C": C, "H": Hs, "TC": TC}


def _forward_cached(params: PolicyParams, X: np.ndarray):
    """X: (B, T, input_dim) -> (Y, cache)."""
    t = params.tensors
    if params.arch == ARCH_LSTM:
        l0 = _lstm_layer_forward(t["W0"], t["U0"], t["b0"], X)
        l1 = _lstm_layer_forward(t["W1"], t["U1"], t["b1"], l0["H"])
        Y = l1["H"] @ t["Wy"].T + t["by"]
        return Y, {"l0": l0, "l1": l1}
    A0 = np.tanh(X @ t["W0"].T + t["b0"])
    A1 = np.tanh(A0 @ t["W1"].T + t["b1"])
    Y = A1 @ t["Wy"].T + t["by"]
    return Y, {"X": X, "A0": A0, "A1": A1}


def forward(params: PolicyParams, obs_window: np.ndarray) -> np.ndarray:
    """Unroll over a window from zero state: (T, ...) -> (T, J), or batched
    (B, T, ...) -> (B, T, J)."""
    obs_window = np.asarray(obs_window, dtype=np.float64)
    if params.obs_layout == "stacked":
        batched = obs_window.ndim == 4
        X = obs_window.reshape(*obs_window.shape[:-2], -1)
    else:
        batched = obs_window.ndim == 3
        X = obs_window
    if X.ndim == 2:
        X = X[None]
    if X.shape[-1] != params.input_dim:
        raise ValueError(f"expected input dim {params.input_dim}, got {X.shape[-1]}")
    Y, _ = _forward_cached(params, X)
    return Y if batched else Y[0]


def act(
    params: PolicyParams, rstate: RecurrentState, obs: np.ndarray
) -> tuple[np.ndarray, RecurrentState]:
    """Single-tick inference; chaining act over a window reproduces forward."""
    t = params.tensors
    x = _flatten_obs(np.asarray(obs, dtype=np.float64))
    if x.shape != (params.input_dim,):
        raise ValueError(f"expected observation dim {params.input_dim}, got {x.shape}")
    if params.arch == ARCH_STACKED_FF:
        a0 = np.tanh(t["W0"] @ x + t["b0"])
        a1 = np.tanh(t["W1"] @ a0 + t["b1"])
        return t["Wy"] @ a1 + t["by"], rstate
    H = params.hidden
    h_new, c_new = [], []
    inp = x
    for layer in (0, 1):
        W, U, b = t[f"W{layer}"], t[f"U{layer}"], t[f"b{layer}"]
        z = W @ inp + U @ rstate.h[layer] + b
        i = _sigmoid(z[:H])
        f = _sigmoid(z[H : 2 * H])
        g = np.tanh(z[2 * H : 3 * H])
        o = _sigmoid(z[3 * H :])
        c = f * rstate.c[layer] + i * g
        h = o * np.tanh(c)
        h_new.append(h)
        c_new.append(c)
        inp = h
    return t["Wy"] @ inp + t["by"], RecurrentState(h=h_new, c=c_new)


class PolicyAgent:
    """Streaming rollout wrapper: resets its recurrent state each episode."""

    def __init__(self, params: PolicyParams):
        self.params = params
        self.rstate = init_recurrent_state(params)

    def start_episode(self, env) -> None:
        self.rstate = init_recurrent_state(self.params)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        action, self.rstate = act(self.params, self.rstate, obs)
        return action


# ---------------------------------------------------------------------------
# Loss and gradients
# ---------------------------------------------------------------------------


def _assemble_batch(params: PolicyParams, batch: Sequence[WindowSample]):
    """Pad variable-length windows into (X, A, mask) arrays."""
    if not batch:
        raise ValueError("empty batch")
    B = len(batch)
    T = max(w.obs.shape[0] for w in batch)
    X = np.zeros((B, T, params.input_dim))
    A = np.zeros((B, T, params.out_dim))
    mask = np.zeros((B, T))
    for bi, w in enumerate(batch):
        n = w.obs.shape[0]
        obs = w.obs.reshape(n, -1) if w.obs.ndim == 3 else w.obs
        if obs.shape[1] != params.input_dim:
            raise ValueError(
                f"window observation dim {obs.shape[1]} != policy input {params.input_dim}"
            )
        X[bi, :n] = obs
        A[bi, :n] = w.acts
        mask[bi, :n] = 1.0
    return X, A, mask


def loss(params: PolicyParams, batch: Sequence[WindowSample]) -> float:
    """Mean squared error per action element over all present ticks."""
    X, A, mask = _assemble_batch(params, batch)
    Y, _ = _forward_cached(params, X)
    r = (Y - A) * mask[:, :, None]
    total = mask.sum() * params.out_dim
    return float((r * r).sum() / total)


def _lstm_layer_backward(W, U, cache, dH_in):
    """Per-tick loop only carries the recurrent terms; weight gradients and
    dX batch into single GEMMs over the stored per-tick gate gradients."""
    X, I, F, G, O, C, Hs, TC = (
        cache["X"], cache["I"], cache["F"], cache["G"],
        cache["O"], cache["C"], cache["H"], cache["TC"],
    )
    B, T, H = I.shape
    DZ = np.empty((B, T, 4 * H))
    dh_next = np.zeros((B, H))
    dc_next = np.zeros((B, H))
    for t in range(T - 1, -1, -1):
        i, f, g, o, tc = I[:, t], F[:, t], G[:, t], O[:, t], TC[:, t]
        dh = dH_in[:, t] + dh_next
        do = dh * tc
        dc = dc_next + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        c_prev = C[:, t - 1] if t > 0 else 0.0
        df = dc * c_prev
        dc_next = dc * f
        dz = DZ[:, t]
        dz[:, :H] = di * i * (1.0 - i)
        dz[:, H : 2 * H] = df * f * (1.0 - f)
        dz[:, 2 * H : 3 * H] = dg * (1.0 - g * g)
        dz[:, 3 * H :] = do * o * (1.0 - o)
        dh_next = dz @ U
    flatZ = DZ.reshape(B * T, 4 * H)
    dW = flatZ.T @ X.reshape(B * T, -1)
    # h_prev sequence: zeros at t=0, then H states shifted one tick right.
    Hprev = np.concatenate([np.zeros((B, 1, H)), Hs[:, :-1]], axis=1)
    dU = flatZ.T @ Hprev.reshape(B * T, H)
    db = flatZ.sum(axis=0)
    dX = (flatZ @ W).reshape(X.shape)
    return dW, dU, db, dX


def grad(
    params: PolicyParams, batch: Sequence[WindowSample]
) -> tuple[float, dict[str, np.ndarray]]:
    """Exact loss gradient via backpropagation (through time for the LSTM)."""
    X, A, mask = _assemble_batch(params, batch)
    Y, cache = _forward_cached(params, X)
    r = (Y - A) * mask[:, :, None]
    total = mask.sum() * params.out_dim
    loss_val = float((r * r).sum() / total)
    dY = (2.0 / total) * r

    t = params.tensors
    grads: dict[str, np.ndarray] = {}
    if params.arch == ARCH_LSTM:
        H1 = cache["l1"]["H"]
        grads["Wy"] = np.einsum("btj,bth->jh", dY, H1)
        grads["by"] = dY.sum(axis=(0, 1))
        dH1 = dY @ t["Wy"]
        dW1, dU1, db1, dH0 = _lstm_layer_backward(t["W1"], t["U1"], cache["l1"], dH1)
        grads["W1"], grads["U1"], grads["b1"] = dW1, dU1, db1
        dW0, dU0, db0, _ = _lstm_layer_backward(t["W0"], t["U0"], cache["l0"], dH0)
        grads["W0"], grads["U0"], grads["b0"] = dW0, dU0, db0
    else:
        A0, A1 = cache["A0"], cache["A1"]
        grads["Wy"] = np.einsum("btj,bth->jh", dY, A1)
        grads["by"] = dY.sum(axis=(0, 1))
        dA1 = (dY @ t["Wy"]) * (1.0 - A1 * A1)
        grads["W1"] = np.einsum("bth,btk->hk", dA1, A0)
        grads["b1"] = dA1.sum(axis=(0, 1))
        dA0 = (dA1 @ t["W1"]) * (1.0 - A0 * A0)
        grads["W0"] = np.einsum("bth,btk->hk", dA0, cache["X"])
        grads["b0"] = dA0.sum(axis=(0, 1))
    return loss_val, grads


# ---------------------------------------------------------------------------
# Optimization
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0


def init_adam(params: PolicyParams) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(v) for k, v in params.tensors.items()},
        v={k: np.zeros_like(v) for k, v in params.tensors.items()},
    )


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


def train_step(
    params: PolicyParams,
    opt_state: AdamState,
    batch: Sequence[WindowSample],
    cfg: TrainConfig,
) -> tuple[PolicyParams, AdamState, float]:
    """One bias-corrected moment update with global-norm gradient clipping."""
    loss_val, grads = grad(params, batch)
    if not np.isfinite(loss_val):
        raise TrainingDiverged(
            f"non-finite training loss {loss_val}",
            episode_ids=[w.episode_id for w in batch],
        )

    gn = global_norm(grads)
    if cfg.clip_norm > 0 and gn > cfg.clip_norm:
        scale = cfg.clip_norm / gn
        grads = {k: g * scale for k, g in grads.items()}

    step = opt_state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**step
    bc2 = 1.0 - b2**step
    new_t: dict[str, np.ndarray] = {}
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    for k, p in params.tensors.items():
        g = grads[k]
        m = b1 * opt_state.m[k] + (1.0 - b1) * g
        v = b2 * opt_state.v[k] + (1.0 - b2) * g * g
        new_m[k] = m
        new_v[k] = v
        new_t[k] = p - cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
    return (
        replace(params, tensors=new_t),
        AdamState(m=new_m, v=new_v, step=step),
        loss_val,
    )


# ---------------------------------------------------------------------------
# Ensembles
# ---------------------------------------------------------------------------


@dataclass
class Ensemble:
    """N identically configured models training from one shared cache."""

    models: list[PolicyParams]
    opt_states: list[AdamState]

    def __post_init__(self):
        if not self.models:
            raise ValueError("ensemble needs at least one model")
        if len(self.models) != len(self.opt_states):
            raise ValueError("one optimizer state per model required")
        a0 = self.models[0]
        for m in self.models[1:]:
            if (m.arch, m.input_dim, m.hidden, m.out_dim) != (
                a0.arch, a0.input_dim, a0.hidden, a0.out_dim,
            ):
                raise ValueError("all ensemble members must share one architecture")

    @property
    def n(self) -> int:
        return len(self.models)


def make_ensemble(
    n: int, arch: str, input_dim: int, hidden: int, out_dim: int, seed: int,
    obs_layout: str = "flat",
) -> Ensemble:
    models = []
    for m in range(n):
        rng = np.random.default_rng([seed, 0x9A11C, m])
        models.append(init_params(arch, input_dim, hidden, out_dim, rng, obs_layout))
    return Ensemble(models=models, opt_states=[init_adam(p) for p in models])


def ensemble_rollout_assignment(ens: Ensemble, iter_index: int, num_rollouts: int) -> list[int]:
    """Round-robin model order for one practice iteration; the offset advances
    with the iteration so uneven splits rotate across models."""
    n = ens.n
    start = (iter_index * num_rollouts) % n
    return [(start + j) % n for j in range(num_rollouts)]


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(params: PolicyParams, path) -> None:
    """Versioned binary dump: magic, JSON shape manifest, raw float64 buffers."""
    manifest = {
        "version": params.version,
        "arch": params.arch,
        "obs_layout": params.obs_layout,
        "input_dim": params.input_dim,
        "hidden": params.hidden,
        "out_dim": params.out_dim,
        "tensors": [
            {"name": k, "shape": list(params.tensors[k].shape)} for k in params.tensor_order()
        ],
    }
    blob = json.dumps(manifest, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for k in params.tensor_order():
            fh.write(np.ascontiguousarray(params.tensors[k], dtype="<f8").tobytes())


def load_checkpoint(path) -> PolicyParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a policy checkpoint")
        (n,) = struct.unpack("<I", fh.read(4))
        manifest = json.loads(fh.read(n).decode())
        tensors: dict[str, np.ndarray] = {}
        for entry in manifest["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        extra = fh.read(1)
        if extra:
            raise ValueError(f"{path}: trailing bytes after tensor data")
    return PolicyParams(
        arch=manifest["arch"],
        obs_layout=manifest["obs_layout"],
        input_dim=manifest["input_dim"],
        hidden=manifest["hidden"],
        out_dim=manifest["out_dim"],
        tensors=tensors,
        version=manifest["version"],
    )
