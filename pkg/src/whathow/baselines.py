"""Full-rank RNN baselines: plain Adam, EWC and orthogonal weight projection.

All three learners share one network, the same step equation as the gated
RNN plus a one-hot task input, and differ only in how a gradient becomes a
parameter update.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .contextrnn import ACTIVATIONS, RNNConfig, RNNError, load_checkpoint, save_checkpoint, weighted_mse

NET_PARAMS = ("W_rec", "W_in", "W_task", "b_in", "W_out", "b_out")


@dataclass
class GeneralRNN:
    cfg: RNNConfig
    n_tasks: int
    W_rec: np.ndarray  # (N, N)
    W_in: np.ndarray  # (N, I)
    W_task: np.ndarray  # (N, n_tasks)
    b_in: np.ndarray  # (N,)
    W_out: np.ndarray  # (O, N)
    b_out: np.ndarray  # (O,)

    @classmethod
    def init(cls, cfg: RNNConfig, n_tasks: int, rng: np.random.Generator) -> "GeneralRNN":
        N, I, O = cfg.n_hidden, cfg.input_dim, cfg.output_dim
        return cls(
            cfg, n_tasks,
            W_rec=rng.standard_normal((N, N)) / math.sqrt(N),
            W_in=rng.standard_normal((N, I)) / math.sqrt(I),
            W_task=rng.standard_normal((N, n_tasks)),
            b_in=np.zeros(N),
            W_out=rng.standard_normal((O, N)) / math.sqrt(N),
            b_out=np.zeros(O),
        )

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in NET_PARAMS}

    def n_params(self) -> int:
        return sum(p.size for p in self.params().values())

    def copy(self) -> "GeneralRNN":
        return GeneralRNN(self.cfg, self.n_tasks, *(getattr(self, k).copy() for k in NET_PARAMS))


@dataclass
class NetCache:
    s: np.ndarray  # (T, B, I)
    onehot: np.ndarray  # (B, n_tasks)
    h: np.ndarray  # (T + 1, B, N)
    y_hat: np.ndarray  # (T, B, O)


def net_forward(net: GeneralRNN, s: np.ndarray, c, rng: np.random.Generator | None = None,
                noise: bool = True) -> tuple[np.ndarray, NetCache]:
    """Batch forward pass; ``s`` is ``(B, T, I)`` and ``c`` a task id or ``(B,)`` ids."""
    cfg = net.cfg
    phi = ACTIVATIONS[cfg.activation][0]
    B, T = s.shape[:2]
    N = cfg.n_hidden
    onehot = np.zeros((B, net.n_tasks))
    onehot[np.arange(B), np.broadcast_to(np.asarray(c), (B,))] = 1.0
    st = np.ascontiguousarray(s.transpose(1, 0, 2))
    drive_in = st @ net.W_in.T + (onehot @ net.W_task.T + net.b_in)[None]
    use_noise = noise and rng is not None and cfg.sigma_r > 0
    h = np.zeros((T + 1, B, N))
    for t in range(T):
        drive = phi(h[t]) @ net.W_rec.T + drive_in[t]
        if use_noise:
            drive += cfg.noise_scale * rng.standard_normal((B, N))
        h[t + 1] = (1 - cfg.alpha) * h[t] + cfg.alpha * drive
        if not np.all(np.isfinite(h[t + 1])):
            raise RNNError(f"non-finite hidden state at t={t}")
    y_hat = phi(h[1:]) @ net.W_out.T + net.b_out
    return y_hat.transpose(1, 0, 2), NetCache(st, onehot, h, y_hat)


def net_backward(net: GeneralRNN, cache: NetCache, y: np.ndarray, mask: np.ndarray,
                 per_trial: bool = False) -> dict[str, np.ndarray]:
    """Gradients of the batch :func:`weighted_mse`.

    With ``per_trial=True`` each array gains a leading batch axis holding the
    gradient of that trial's own loss (so their mean is the batch gradient).
    """
    cfg = net.cfg
    phi, dphi = ACTIVATIONS[cfg.activation]
    h = cache.h
    T, B = cache.y_hat.shape[:2]
    N = cfg.n_hidden
    yt = y.transpose(1, 0, 2)
    mt = mask.transpose(1, 0, 2)
    scale = B if per_trial else 1.0
    e = scale * 2.0 * mt * (cache.y_hat - yt) / yt.size  # (T, B, O)
    ph = phi(h[1:])
    dph = dphi(h[1:])
    d_phi_out = e @ net.W_out
    g = np.empty((T, B, N))
    delta = np.zeros((B, N))
    for t in range(T - 1, -1, -1):
        delta = delta + d_phi_out[t] * dph[t]
        g[t] = cfg.alpha * delta
        dh_prev = (1 - cfg.alpha) * delta
        if t > 0:
            dh_prev = dh_prev + (g[t] @ net.W_rec) * dph[t - 1]
        delta = dh_prev
    ph_prev = phi(h[:-1])
    if per_trial:
        return {
            "W_rec": np.einsum("tbn,tbm->bnm", g, ph_prev, optimize=True),
            "W_in": np.einsum("tbn,tbi->bni", g, cache.s, optimize=True),
            "W_task": g.sum(axis=0)[:, :, None] * cache.onehot[:, None, :],
            "b_in": g.sum(axis=0),
            "W_out": np.einsum("tbo,tbn->bon", e, ph, optimize=True),
            "b_out": e.sum(axis=0),
        }
    gf = g.reshape(T * B, N)
    g_sum_b = g.sum(axis=0)
    return {
        "W_rec": gf.T @ ph_prev.reshape(T * B, N),
        "W_in": gf.T @ cache.s.reshape(T * B, -1),
        "W_task": g_sum_b.T @ cache.onehot,
        "b_in": gf.sum(axis=0),
        "W_out": e.reshape(T * B, -1).T @ ph.reshape(T * B, N),
        "b_out": e.sum(axis=(0, 1)),
    }


@dataclass
class Adam:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def direction(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Advance the moments and return the step ``-lr * m_hat / (sqrt(v_hat) + eps)``."""
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = -self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


# ---------------------------------------------------------------------------
# EWC


@dataclass
class EwcState:
    fisher_diag: dict[str, np.ndarray]
    theta_star: dict[str, np.ndarray]
    lam: float = 1e5

    @classmethod
    def empty(cls, net: GeneralRNN, lam: float = 1e5) -> "EwcState":
        return cls({k: np.zeros_like(v) for k, v in net.params().items()},
                   {k: v.copy() for k, v in net.params().items()}, lam)


def ewc_loss_grad(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: EwcState) -> dict[str, np.ndarray]:
    """Add ``lam * F * (theta - theta_star)`` to each gradient."""
    return {k: g + state.lam * state.fisher_diag[k] * (params[k] - state.theta_star[k]) for k, g in grads.items()}


def ewc_penalty(params: dict[str, np.ndarray], state: EwcState) -> float:
    return 0.5 * state.lam * sum(float(np.sum(state.fisher_diag[k] * (params[k] - state.theta_star[k]) ** 2))
                                 for k in params)


def fisher_estimate(net: GeneralRNN, s: np.ndarray, y: np.ndarray, mask: np.ndarray, c: int,
                    rng: np.random.Generator | None = None, chunk: int = 64) -> dict[str, np.ndarray]:
    """Diagonal empirical Fisher: mean over trials of squared per-trial loss gradients."""
    out = {k: np.zeros_like(v) for k, v in net.params().items()}
    n = len(s)
    for a in range(0, n, chunk):
        b = min(a + chunk, n)
        _, cache = net_forward(net, s[a:b], c, rng)
        g = net_backward(net, cache, y[a:b], mask[a:b], per_trial=True)
        for k in out:
            out[k] += np.sum(g[k] ** 2, axis=0)
    return {k: v / n for k, v in out.items()}


# ---------------------------------------------------------------------------
# Orthogonal weight projection


@dataclass
class OwpState:
    """Activity covariances of all finished tasks and the projections they induce.

    ``zz``/``hh`` protect the recurrent+input weights (inputs ``[phi(h); s;
    onehot; 1]`` and hidden pre-activations); ``zz_out``/``hh_out`` protect the
    readout (inputs ``[phi(h); 1]`` and outputs).
    """

    zz: np.ndarray
    hh: np.ndarray
    zz_out: np.ndarray
    hh_out: np.ndarray
    n_points: int = 0
    ridge_scale: float = 1e-3
    P1: np.ndarray = None
    P2: np.ndarray = None
    P1_out: np.ndarray = None
    P2_out: np.ndarray = None

    @classmethod
    def empty(cls, net: GeneralRNN, ridge_scale: float = 1e-3) -> "OwpState":
        N, I, O = net.cfg.n_hidden, net.cfg.input_dim, net.cfg.output_dim
        D = N + I + net.n_tasks + 1
        st = cls(np.zeros((D, D)), np.zeros((N, N)), np.zeros((N + 1, N + 1)), np.zeros((O, O)),
                 ridge_scale=ridge_scale)
        st.refresh()
        return st

    @property
    def ridge(self) -> float:
        return self.ridge_scale * max(self.n_points, 1)

    def refresh(self) -> None:
        lam = self.ridge
        self.P1 = _ridge_inverse(self.zz, lam)
        self.P2 = _ridge_inverse(self.hh, lam)
        self.P1_out = _ridge_inverse(self.zz_out, lam)
        self.P2_out = _ridge_inverse(self.hh_out, lam)


def _ridge_inverse(S: np.ndarray, lam: float) -> np.ndarray:
    """``(S / lam + I)^-1`` through an eigendecomposition (S is symmetric PSD)."""
    w, Q = np.linalg.eigh((S + S.T) / 2)
    w = np.maximum(w, 0.0)
    P = (Q / (w / lam + 1.0)) @ Q.T
    return (P + P.T) / 2


def owp_update_stats(state: OwpState, net: GeneralRNN, cache: NetCache) -> OwpState:
    """Accumulate activity of a batch of trials of the finished task and refresh."""
    phi = ACTIVATIONS[net.cfg.activation][0]
    T, B = cache.y_hat.shape[:2]
    if T * B == 0:
        return state
    ph_prev = phi(cache.h[:-1]).reshape(T * B, -1)
    ones = np.ones((T * B, 1))
    onehot = np.broadcast_to(cache.onehot[None], (T, B, cache.onehot.shape[1])).reshape(T * B, -1)
    Z = np.hstack([ph_prev, cache.s.reshape(T * B, -1), onehot, ones])
    H = cache.h[1:].reshape(T * B, -1)
    Z_out = np.hstack([phi(cache.h[1:]).reshape(T * B, -1), ones])
    Y = cache.y_hat.reshape(T * B, -1)
    state.zz += Z.T @ Z
    state.hh += H.T @ H
    state.zz_out += Z_out.T @ Z_out
    state.hh_out += Y.T @ Y
    state.n_points += T * B
    state.refresh()
    return state


def _stack_drive(d: dict[str, np.ndarray]) -> np.ndarray:
    return np.hstack([d["W_rec"], d["W_in"], d["W_task"], d["b_in"][:, None]])


def owp_project(delta: dict[str, np.ndarray], state: OwpState) -> dict[str, np.ndarray]:
    """Two-sided projection ``P2 @ dW @ P1`` of recurrent/input and readout updates."""
    W = state.P2 @ _stack_drive(delta) @ state.P1
    N = W.shape[0]
    I = delta["W_in"].shape[1]
    n_t = delta["W_task"].shape[1]
    Wo = state.P2_out @ np.hstack([delta["W_out"], delta["b_out"][:, None]]) @ state.P1_out
    return {
        "W_rec": W[:, :N],
        "W_in": W[:, N:N + I],
        "W_task": W[:, N + I:N + I + n_t],
        "b_in": W[:, -1],
        "W_out": Wo[:, :-1],
        "b_out": Wo[:, -1],
    }


# ---------------------------------------------------------------------------
# Learners


@dataclass
class BaselineLearner:
    """General RNN trained with Adam, optionally with EWC or OWP.

    ``method`` is ``"adam"``, ``"ewc"`` or ``"owp"``. For OWP the update that
    Adam proposes is projected, so directions used by earlier tasks stay
    protected regardless of Adam's per-coordinate scaling.
    """

    net: GeneralRNN
    method: str = "adam"
    lr: float = 0.01
    l2: float = 1e-5
    ewc_lambda: float = 1e5
    owp_ridge: float = 1e-3
    opt: Adam = None
    ewc: EwcState = None
    owp: OwpState = None
    tasks_done: list = field(default_factory=list)

    def __post_init__(self):
        if self.method not in ("adam", "ewc", "owp"):
            raise ValueError(f"unknown baseline method {self.method!r}")
        if self.opt is None:
            self.opt = Adam(self.lr)
        if self.method == "ewc" and self.ewc is None:
            self.ewc = EwcState.empty(self.net, self.ewc_lambda)
        if self.method == "owp" and self.owp is None:
            self.owp = OwpState.empty(self.net, self.owp_ridge)

    def gradients(self, s, y, mask, c, rng) -> tuple[float, dict[str, np.ndarray]]:
        y_hat, cache = net_forward(self.net, s, c, rng)
        grads = net_backward(self.net, cache, y, mask)
        return weighted_mse(y_hat, y, mask), grads

    def apply(self, grads: dict[str, np.ndarray]) -> None:
        params = self.net.params()
        grads = {k: g + self.l2 * params[k] for k, g in grads.items()}
        if self.method == "ewc":
            grads = ewc_loss_grad(params, grads, self.ewc)
        delta = self.opt.direction(grads)
        if self.method == "owp":
            delta = owp_project(delta, self.owp)
        for k, d in delta.items():
            params[k] += d

    def train_batch(self, s, y, mask, c, rng) -> float:
        loss, grads = self.gradients(s, y, mask, c, rng)
        self.apply(grads)
        return loss

    def predict(self, s, c, rng) -> np.ndarray:
        return net_forward(self.net, s, c, rng)[0]

    def end_task(self, c: int, s: np.ndarray, y: np.ndarray, mask: np.ndarray, rng) -> None:
        """Consolidate after finishing task ``c`` using a batch of its trials."""
        if self.method == "ewc":
            F = fisher_estimate(self.net, s, y, mask, c, rng)
            for k in F:
                self.ewc.fisher_diag[k] += F[k]
            self.ewc.theta_star = {k: v.copy() for k, v in self.net.params().items()}
        elif self.method == "owp":
            _, cache = net_forward(self.net, s, c, rng)
            owp_update_stats(self.owp, self.net, cache)
        self.tasks_done.append(c)


def save_baseline(learner: BaselineLearner, path) -> None:
    arrays = {k: v for k, v in learner.net.params().items()}
    for k in learner.opt.m:
        arrays[f"m_{k}"] = learner.opt.m[k]
        arrays[f"v_{k}"] = learner.opt.v[k]
    if learner.ewc is not None:
        for k in NET_PARAMS:
            arrays[f"fisher_{k}"] = learner.ewc.fisher_diag[k]
            arrays[f"star_{k}"] = learner.ewc.theta_star[k]
    if learner.owp is not None:
        for k in ("zz", "hh", "zz_out", "hh_out"):
            arrays[f"owp_{k}"] = getattr(learner.owp, k)
    extra = {"method": learner.method, "lr": learner.lr, "l2": learner.l2, "ewc_lambda": learner.ewc_lambda,
             "owp_ridge": learner.owp_ridge, "adam_t": learner.opt.t, "n_tasks": learner.net.n_tasks,
             "owp_points": learner.owp.n_points if learner.owp else 0, "tasks_done": learner.tasks_done}
    save_checkpoint(path, arrays, f"baseline_{learner.method}", dataclasses.asdict(learner.net.cfg), extra)


def load_baseline(path) -> BaselineLearner:
    meta, a = load_checkpoint(path)
    x = meta["extra"]
    if not str(meta["payload"]).startswith("baseline_"):
        raise RNNError(f"{path}: holds {meta['payload']!r}, not a baseline")
    cfg = RNNConfig(**meta["config"])
    net = GeneralRNN(cfg, x["n_tasks"], *(a[k] for k in NET_PARAMS))
    opt = Adam(x["lr"], m={k: a[f"m_{k}"] for k in NET_PARAMS if f"m_{k}" in a},
               v={k: a[f"v_{k}"] for k in NET_PARAMS if f"v_{k}" in a}, t=x["adam_t"])
    ewc = owp = None
    if x["method"] == "ewc":
        ewc = EwcState({k: a[f"fisher_{k}"] for k in NET_PARAMS}, {k: a[f"star_{k}"] for k in NET_PARAMS},
                       x["ewc_lambda"])
    if x["method"] == "owp":
        owp = OwpState(a["owp_zz"], a["owp_hh"], a["owp_zz_out"], a["owp_hh_out"], x["owp_points"], x["owp_ridge"])
        owp.refresh()
    return BaselineLearner(net, x["method"], x["lr"], x["l2"], x["ewc_lambda"], x["owp_ridge"], opt, ewc, owp,
                           list(x["tasks_done"]))
