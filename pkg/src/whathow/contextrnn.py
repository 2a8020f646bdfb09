"""Context-gated low-rank RNN with hand-written backprop through time.

Every context slot ``z`` owns a rank-``r`` recurrent factor pair ``U_z V_z^T``
plus its own input and output weights. At each time step the effective
network is the mixture of the slots weighted by the context posterior
``p_t(z)`` handed over by the task model::

    h_t = (1 - a) h_{t-1} + a [W_rec(p_t) phi(h_{t-1}) + W_in(p_t) s_t + b_in(p_t) + sqrt(2/a) sigma_r xi_t]
    yhat_t = W_out(p_t) phi(h_t) + b_out(p_t)

The recurrent matrix is never materialised; ``V_z^T phi`` is applied first.
All arrays carry a leading slot axis ``Z``; only the slots active in a batch
are touched.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

BANK_FORMAT = "whathow.bank"
CHECKPOINT_VERSION = 1
PARAM_NAMES = ("U", "V", "W_in", "b_in", "W_out", "b_out")


class RNNError(RuntimeError):
    pass


@dataclass(frozen=True)
class RNNConfig:
    n_hidden: int = 256
    rank: int = 3
    alpha: float = 0.1
    sigma_r: float = 0.05
    activation: str = "relu"
    input_dim: int = 5
    output_dim: int = 3
    n_slots: int = 16

    def __post_init__(self):
        if not 0 < self.alpha <= 1:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.rank < 1:
            raise ValueError(f"rank must be >= 1, got {self.rank}")
        if self.sigma_r < 0:
            raise ValueError(f"sigma_r must be >= 0, got {self.sigma_r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def noise_scale(self) -> float:
        return math.sqrt(2.0 / self.alpha) * self.sigma_r


def _relu(h):
    return np.maximum(h, 0.0)


def _relu_grad(h):
    return (h > 0).astype(h.dtype)


def _tanh_grad(h):
    return 1.0 - np.tanh(h) ** 2


ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass
class ContextBank:
    """Per-slot weights stacked along a leading slot axis."""

    cfg: RNNConfig
    U: np.ndarray  # (Z, N, r)
    V: np.ndarray  # (Z, N, r)
    W_in: np.ndarray  # (Z, N, I)
    b_in: np.ndarray  # (Z, N)
    W_out: np.ndarray  # (Z, O, N)
    b_out: np.ndarray  # (Z, O)
    allocated: np.ndarray  # (Z,) bool

    @classmethod
    def empty(cls, cfg: RNNConfig) -> "ContextBank":
        Z, N, r, I, O = cfg.n_slots, cfg.n_hidden, cfg.rank, cfg.input_dim, cfg.output_dim
        return cls(cfg, np.zeros((Z, N, r)), np.zeros((Z, N, r)), np.zeros((Z, N, I)), np.zeros((Z, N)),
                   np.zeros((Z, O, N)), np.zeros((Z, O)), np.zeros(Z, bool))

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "ContextBank":
        return ContextBank(self.cfg, *(getattr(self, k).copy() for k in PARAM_NAMES), self.allocated.copy())

    def n_params_per_context(self) -> int:
        return sum(p[0].size for p in self.params().values())

    def n_params(self) -> int:
        return int(self.allocated.sum()) * self.n_params_per_context()

    def checksum(self, slots=None) -> str:
        h = hashlib.sha256()
        idx = np.arange(self.cfg.n_slots) if slots is None else np.asarray(slots)
        for k in PARAM_NAMES:
            h.update(np.ascontiguousarray(getattr(self, k)[idx]).tobytes())
        return h.hexdigest()


def allocate_context(bank: ContextBank, z: int, rng: np.random.Generator) -> ContextBank:
    """Draw initial weights for slot ``z`` in place and return the bank."""
    if bank.allocated[z]:
        raise RNNError(f"context slot {z} is already allocated")
    cfg = bank.cfg
    N, r = cfg.n_hidden, cfg.rank
    bank.U[z] = rng.standard_normal((N, r)) / math.sqrt(N) / math.sqrt(r)
    bank.V[z] = rng.standard_normal((N, r)) / math.sqrt(N)
    bank.W_in[z] = rng.standard_normal((N, cfg.input_dim)) / math.sqrt(cfg.input_dim)
    bank.b_in[z] = 0.0
    bank.W_out[z] = rng.standard_normal((cfg.output_dim, N)) / math.sqrt(N)
    bank.b_out[z] = 0.0
    bank.allocated[z] = True
    return bank


def normalize_gating(bank: ContextBank, p: np.ndarray) -> np.ndarray:
    """Restrict ``p (..., Z)`` to allocated slots and renormalise."""
    p = np.where(bank.allocated, p, 0.0)
    tot = p.sum(axis=-1, keepdims=True)
    if np.any(tot <= 0):
        raise RNNError("gating puts no mass on any allocated context")
    return p / tot


def compose_weights(bank: ContextBank, p: np.ndarray) -> dict[str, np.ndarray]:
    """Explicit effective weights for a single gating vector ``p (Z,)``."""
    p = normalize_gating(bank, p)
    return {
        "W_rec": np.einsum("z,znr,zmr->nm", p, bank.U, bank.V),
        "W_in": np.einsum("z,zni->ni", p, bank.W_in),
        "b_in": p @ bank.b_in,
        "W_out": np.einsum("z,zon->on", p, bank.W_out),
        "b_out": p @ bank.b_out,
    }


def step(h: np.ndarray, s: np.ndarray, weights: dict[str, np.ndarray], cfg: RNNConfig,
         rng: np.random.Generator | None = None) -> np.ndarray:
    """One Euler step with explicit weights; ``rng=None`` or ``sigma_r=0`` is noise-free."""
    phi = ACTIVATIONS[cfg.activation][0]
    drive = phi(h) @ weights["W_rec"].T + s @ weights["W_in"].T + weights["b_in"]
    if rng is not None and cfg.sigma_r > 0:
        drive = drive + cfg.noise_scale * rng.standard_normal(h.shape)
    h2 = (1 - cfg.alpha) * h + cfg.alpha * drive
    if not np.all(np.isfinite(h2)):
        raise RNNError("non-finite hidden state")
    return h2


@dataclass
class ForwardCache:
    slots: np.ndarray  # active slot indices (K,)
    p: np.ndarray  # (T, B, K)
    s: np.ndarray  # (T, B, I)
    h: np.ndarray  # (T + 1, B, N), h[0] = 0
    a: np.ndarray  # (T, B, K, r): V_k^T phi(h_{t-1})
    y_hat: np.ndarray  # (T, B, O)


def _flat(bank: ContextBank, slots: np.ndarray):
    """Slot-stacked weights laid out for plain matrix products.

    ``U``/``V`` become ``(N, K*r)``, ``W_in`` ``(K*I, N)`` and ``W_out``
    ``(N, K*O)``, all with the slot index varying slowest along the flattened axis.
    """
    K = len(slots)
    N = bank.cfg.n_hidden
    U = bank.U[slots].transpose(1, 0, 2).reshape(N, -1)
    V = bank.V[slots].transpose(1, 0, 2).reshape(N, -1)
    W_in = bank.W_in[slots].transpose(0, 2, 1).reshape(-1, N)
    W_out = bank.W_out[slots].transpose(2, 0, 1).reshape(N, -1)
    return K, U, V, W_in, W_out


def forward_trial(bank: ContextBank, p: np.ndarray, s: np.ndarray, rng: np.random.Generator | None = None,
                  noise: bool = True) -> tuple[np.ndarray, ForwardCache]:
    """Run a batch of trials.

    ``p`` is the gating ``(B, T, Z)`` (or ``(T, Z)`` for one trial) and ``s``
    the inputs ``(B, T, I)``. Returns ``y_hat (B, T, O)`` and the cache for
    :func:`backward_trial`. Noise draws enter the cached trajectory, so the
    backward pass differentiates exactly the sampled path.
    """
    single = s.ndim == 2
    if single:
        p, s = p[None], s[None]
    cfg = bank.cfg
    phi = ACTIVATIONS[cfg.activation][0]
    p = normalize_gating(bank, p)
    slots = np.flatnonzero(p.max(axis=(0, 1)) > 0)
    pk = np.ascontiguousarray(p[..., slots].transpose(1, 0, 2))  # (T, B, K)
    sk = np.ascontiguousarray(s.transpose(1, 0, 2))
    K, U, V, W_in, W_out = _flat(bank, slots)
    b_in, b_out = bank.b_in[slots], bank.b_out[slots]
    T, B = pk.shape[:2]
    N, r, I, O = cfg.n_hidden, cfg.rank, cfg.input_dim, cfg.output_dim
    use_noise = noise and rng is not None and cfg.sigma_r > 0
    # input drive for every step at once: sum_k p_k (W_in_k s + b_in_k)
    ps = (pk[..., None] * sk[:, :, None, :]).reshape(T * B, K * I)
    drive_in = (ps @ W_in + pk.reshape(T * B, K) @ b_in).reshape(T, B, N)
    h = np.zeros((T + 1, B, N))
    a = np.empty((T, B, K, r))
    for t in range(T):
        at = phi(h[t]) @ V
        a[t] = at.reshape(B, K, r)
        drive = (a[t] * pk[t][..., None]).reshape(B, K * r) @ U.T + drive_in[t]
        if use_noise:
            drive += cfg.noise_scale * rng.standard_normal((B, N))
        h[t + 1] = (1 - cfg.alpha) * h[t] + cfg.alpha * drive
        if not np.all(np.isfinite(h[t + 1])):
            raise RNNError(f"non-finite hidden state at t={t}")
    out = (phi(h[1:]).reshape(T * B, N) @ W_out).reshape(T, B, K, O) + b_out
    y_hat = np.einsum("tbk,tbko->tbo", pk, out)
    cache = ForwardCache(slots, pk, sk, h, a, y_hat)
    y = y_hat.transpose(1, 0, 2)
    return (y[0] if single else y), cache


def loss_mask(z_true: np.ndarray, response: np.ndarray, out_dim: int = 3) -> np.ndarray:
    """Per-(time, output) weights: 1.0 in response epochs, 0.2 elsewhere.

    ``z_true`` is ``(..., T)`` of epoch ids; ``response`` flags response epochs.
    """
    m = np.where(response[z_true], 1.0, 0.2)
    return np.repeat(m[..., None], out_dim, axis=-1)


def weighted_mse(y_hat: np.ndarray, y: np.ndarray, mask: np.ndarray) -> float:
    return float(np.mean(mask * (y - y_hat) ** 2))


def backward_trial(bank: ContextBank, cache: ForwardCache, y: np.ndarray, mask: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`weighted_mse` for the cached forward pass.

    Returns full-size gradient arrays (zero outside the active slots). The
    gating is treated as a constant.
    """
    if cache is None:
        raise RNNError("backward_trial needs the cache from forward_trial")
    if y.ndim == 2:
        y, mask = y[None], mask[None]
    cfg = bank.cfg
    phi, dphi = ACTIVATIONS[cfg.activation]
    k = cache.slots
    K, U, V, W_in, W_out = _flat(bank, k)
    pk, h, a = cache.p, cache.h, cache.a
    T, B = pk.shape[:2]
    N, r, I, O = cfg.n_hidden, cfg.rank, cfg.input_dim, cfg.output_dim
    yt = y.transpose(1, 0, 2)
    mt = mask.transpose(1, 0, 2)
    e = 2.0 * mt * (cache.y_hat - yt) / yt.size  # (T, B, O)
    ph = phi(h[1:])  # (T, B, N)
    dph = dphi(h[1:])

    # readout gradient into phi(h_t), all t at once
    pe = (pk[..., None] * e[:, :, None, :]).reshape(T * B, K * O)
    d_phi_out = (pe @ W_out.T).reshape(T, B, N)

    g = np.empty((T, B, N))  # d loss / d drive_t
    pUg = np.empty((T, B, K * r))
    p_r = np.repeat(pk, r, axis=2)  # gating broadcast over the rank axis
    delta = np.zeros((B, N))  # d loss / d h_{t+1}, flowing back
    for t in range(T - 1, -1, -1):
        delta = delta + d_phi_out[t] * dph[t]
        g[t] = cfg.alpha * delta
        pUg[t] = (g[t] @ U) * p_r[t]
        dh_prev = (1 - cfg.alpha) * delta
        if t > 0:
            dh_prev = dh_prev + (pUg[t] @ V.T) * dph[t - 1]
        delta = dh_prev

    ph_prev = phi(h[:-1]).reshape(T * B, N)
    gf = g.reshape(T * B, N)
    pa = a.reshape(T, B, K * r) * p_r
    ps = (pk[..., None] * cache.s[:, :, None, :]).reshape(T * B, K * I)
    grads = {name: np.zeros_like(getattr(bank, name)) for name in PARAM_NAMES}
    grads["U"][k] = (gf.T @ pa.reshape(T * B, K * r)).reshape(N, K, r).transpose(1, 0, 2)
    grads["V"][k] = (ph_prev.T @ pUg.reshape(T * B, K * r)).reshape(N, K, r).transpose(1, 0, 2)
    grads["W_in"][k] = (gf.T @ ps).reshape(N, K, I).transpose(1, 0, 2)
    grads["b_in"][k] = pk.reshape(T * B, K).T @ gf
    grads["W_out"][k] = (pe.T @ ph.reshape(T * B, N)).reshape(K, O, N)
    grads["b_out"][k] = pe.sum(axis=0).reshape(K, O)
    return grads


# ---------------------------------------------------------------------------
# Optimiser


@dataclass
class TrainState:
    """Adam moments and per-context schedule for a :class:`ContextBank`."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    steps: np.ndarray  # (Z,) Adam step count per context
    lr: np.ndarray  # (Z,) per-context learning rate
    base_lr: float = 1e-3
    lr_decay: float = 0.5
    l2: float = 1e-5
    active_thresh: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_bank(cls, bank: ContextBank, base_lr: float = 1e-3, **kw) -> "TrainState":
        m = {k: np.zeros_like(v) for k, v in bank.params().items()}
        v = {k: np.zeros_like(v) for k, v in bank.params().items()}
        Z = bank.cfg.n_slots
        return cls(m, v, np.zeros(Z, dtype=np.int64), np.full(Z, base_lr), base_lr=base_lr, **kw)

    def copy(self) -> "TrainState":
        return dataclasses.replace(self, m={k: a.copy() for k, a in self.m.items()},
                                   v={k: a.copy() for k, a in self.v.items()},
                                   steps=self.steps.copy(), lr=self.lr.copy())


def context_usage(p: np.ndarray) -> np.ndarray:
    """Average gating mass per slot, the ``p(z | c)`` of a batch."""
    return p.reshape(-1, p.shape[-1]).mean(axis=0)


def adam_step(bank: ContextBank, state: TrainState, grads: dict[str, np.ndarray],
              usage: np.ndarray) -> ContextBank:
    """Update, in place, every context whose usage exceeds the threshold.

    Those contexts also receive the L2 penalty. Contexts below the
    threshold are not touched at all, optimiser moments included.
    """
    active = np.flatnonzero((usage > state.active_thresh) & bank.allocated)
    if len(active) == 0:
        return bank
    state.steps[active] += 1
    n = state.steps[active].astype(float)
    c1 = 1 - state.beta1 ** n
    c2 = 1 - state.beta2 ** n
    for name in PARAM_NAMES:
        w = getattr(bank, name)
        shape = (-1,) + (1,) * (w.ndim - 1)
        gk = grads[name][active] + state.l2 * w[active]
        m = state.m[name][active] = state.beta1 * state.m[name][active] + (1 - state.beta1) * gk
        v = state.v[name][active] = state.beta2 * state.v[name][active] + (1 - state.beta2) * gk * gk
        m_hat = m / c1.reshape(shape)
        v_hat = v / c2.reshape(shape)
        w[active] -= state.lr[active].reshape(shape) * m_hat / (np.sqrt(v_hat) + state.eps)
    return bank


def decay_learning_rates(state: TrainState, usage: np.ndarray) -> np.ndarray:
    """Halve (by ``lr_decay``) the rate of every context the finished task used."""
    hit = usage > state.active_thresh
    state.lr[hit] *= state.lr_decay
    return hit


# ---------------------------------------------------------------------------
# Performance


def response_angle(y_hat: np.ndarray, resp: np.ndarray) -> np.ndarray:
    """Direction of the time-averaged first two outputs over the response steps."""
    w = resp.astype(float)
    cnt = np.maximum(w.sum(axis=-1), 1.0)
    mx = (y_hat[..., 0] * w).sum(axis=-1) / cnt
    my = (y_hat[..., 1] * w).sum(axis=-1) / cnt
    return np.arctan2(my, mx)


def evaluate_perf(y_hat: np.ndarray, y: np.ndarray, resp: np.ndarray, fix_thresh: float = 0.5,
                  angle_tol: float = math.pi / 10) -> np.ndarray:
    """Per-trial correctness.

    ``resp`` flags response steps ``(..., T)``. A trial is correct when the
    third output stays at or below ``fix_thresh`` on every step before the
    first response step and the mean response direction is within
    ``angle_tol`` of the target direction.
    """
    before = np.cumsum(resp, axis=-1) == 0
    held = np.all((y_hat[..., 2] <= fix_thresh) | ~before, axis=-1)
    err = response_angle(y_hat, resp) - response_angle(y, resp)
    err = np.abs((err + math.pi) % (2 * math.pi) - math.pi)
    return held & (err < angle_tol) & resp.any(axis=-1)


# ---------------------------------------------------------------------------
# Checkpoints


def save_checkpoint(path: str | Path, arrays: dict[str, np.ndarray], payload: str, config: dict,
                    extra: dict | None = None) -> None:
    """Shared container for model checkpoints: npz arrays plus a JSON header."""
    meta = {"format": BANK_FORMAT, "version": CHECKPOINT_VERSION, "payload": payload,
            "config": config, "extra": extra or {}}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta)), **arrays)


def load_checkpoint(path: str | Path, payload: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as f:
        meta = json.loads(str(f["meta"]))
        if meta.get("format") != BANK_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise RNNError(f"{path}: not a model checkpoint (v{CHECKPOINT_VERSION})")
        if payload is not None and meta.get("payload") != payload:
            raise RNNError(f"{path}: holds {meta.get('payload')!r}, expected {payload!r}")
        arrays = {k: f[k].copy() for k in f.files if k != "meta"}
    return meta, arrays


def save_bank(bank: ContextBank, path: str | Path, state: TrainState | None = None) -> None:
    arrays = dict(bank.params())
    arrays["allocated"] = bank.allocated
    extra = {}
    if state is not None:
        for k in PARAM_NAMES:
            arrays[f"m_{k}"] = state.m[k]
            arrays[f"v_{k}"] = state.v[k]
        arrays["steps"] = state.steps
        arrays["lr"] = state.lr
        extra = {f.name: getattr(state, f.name) for f in dataclasses.fields(state)
                 if f.name not in ("m", "v", "steps", "lr")}
    save_checkpoint(path, arrays, "context_bank", dataclasses.asdict(bank.cfg), extra)


def load_bank(path: str | Path) -> tuple[ContextBank, TrainState | None]:
    meta, a = load_checkpoint(path, "context_bank")
    cfg = RNNConfig(**meta["config"])
    bank = ContextBank(cfg, *(a[k] for k in PARAM_NAMES), a["allocated"].astype(bool))
    state = None
    if "steps" in a:
        state = TrainState({k: a[f"m_{k}"] for k in PARAM_NAMES}, {k: a[f"v_{k}"] for k in PARAM_NAMES},
                           a["steps"], a["lr"], **meta["extra"])
    return bank, state


@dataclass
class ContextRNN:
    """Bank plus optimiser state with the training protocol attached."""

    cfg: RNNConfig = field(default_factory=RNNConfig)
    bank: ContextBank = None
    state: TrainState = None
    base_lr: float = 1e-3

    def __post_init__(self):
        if self.bank is None:
            self.bank = ContextBank.empty(self.cfg)
        if self.state is None:
            self.state = TrainState.for_bank(self.bank, self.base_lr)

    def ensure_allocated(self, slots, rng: np.random.Generator) -> list[int]:
        new = [int(z) for z in slots if not self.bank.allocated[z]]
        for z in new:
            allocate_context(self.bank, z, rng)
        return new

    def train_batch(self, p: np.ndarray, s: np.ndarray, y: np.ndarray, mask: np.ndarray,
                    rng: np.random.Generator) -> tuple[float, np.ndarray]:
        p = normalize_gating(self.bank, p)
        y_hat, cache = forward_trial(self.bank, p, s, rng)
        loss = weighted_mse(y_hat, y, mask)
        grads = backward_trial(self.bank, cache, y, mask)
        usage = context_usage(p)
        adam_step(self.bank, self.state, grads, usage)
        return loss, usage

    def predict(self, p: np.ndarray, s: np.ndarray, rng: np.random.Generator | None) -> np.ndarray:
        return forward_trial(self.bank, p, s, rng)[0]
