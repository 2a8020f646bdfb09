"""Online learning and inference of the task model.

The learner keeps a bank of epoch slots ``z`` and trial-variable slots ``x``.
Each trial is first used to seed any emission means it reveals for the first
time (incremental initialisation), then a few incremental EM iterations
refine the parameters from decayed running sufficient statistics. Only the
current task's transitions and the emission means the trial actually visits
are updated.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hmm
from .hmm import InferenceError

CHECKPOINT_VERSION = 1


class TaskModelError(RuntimeError):
    pass


class SlotExhaustedError(TaskModelError):
    pass


@dataclass(frozen=True)
class TaskModelConfig:
    z_slots: int = 16
    c_slots: int = 12
    n_x: int = 8
    d_q: int = 8
    d_s: int = 5
    eta_params: float = 0.2
    eta_stats: float = 0.01
    em_iters: int = 2
    # familiarity: per-dimension |difference| below match_sigmas * sigma_hat
    match_sigmas: float = 4.0
    match_tol: float | None = None
    # change points: some dimension jumps by more than cp_sigmas * sigma_hat
    cp_sigmas: float = 6.0
    min_segment: int = 2
    gate_thresh: float = 0.01
    sigma_init: float = 0.1
    self_init: float = 0.8
    # mass moved onto epochs that join an already-known task
    grow_mix: float = 0.1

    def __post_init__(self):
        for k in ("z_slots", "c_slots", "n_x", "d_q", "d_s", "min_segment"):
            v = getattr(self, k)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{k} must be a positive integer, got {v!r}")
        if not 0 < self.eta_params <= 1:
            raise ValueError(f"eta_params must lie in (0, 1], got {self.eta_params}")
        if not 0 <= self.eta_stats < 1:
            raise ValueError(f"eta_stats must lie in [0, 1), got {self.eta_stats}")
        if self.em_iters < 1:
            raise ValueError(f"em_iters must be >= 1, got {self.em_iters}")


@dataclass
class TaskModelParams:
    q_hat: np.ndarray  # (Z, X, D)
    sigma_hat: float
    lambda_hat: np.ndarray  # (C, Z, Z), [c, from, to]
    pi_hat: np.ndarray  # (C, Z)

    @classmethod
    def empty(cls, cfg: TaskModelConfig) -> "TaskModelParams":
        return cls(
            q_hat=np.zeros((cfg.z_slots, cfg.n_x, cfg.d_q)),
            sigma_hat=cfg.sigma_init,
            lambda_hat=np.zeros((cfg.c_slots, cfg.z_slots, cfg.z_slots)),
            pi_hat=np.zeros((cfg.c_slots, cfg.z_slots)),
        )

    def copy(self) -> "TaskModelParams":
        return TaskModelParams(self.q_hat.copy(), self.sigma_hat, self.lambda_hat.copy(), self.pi_hat.copy())


@dataclass
class EncounterTables:
    f_cx: np.ndarray  # (C, X)
    f_xz: np.ndarray  # (X, Z)
    f_cz: np.ndarray  # (C, Z): epochs taking part in each task

    @classmethod
    def empty(cls, cfg: TaskModelConfig) -> "EncounterTables":
        return cls(
            np.zeros((cfg.c_slots, cfg.n_x), bool),
            np.zeros((cfg.n_x, cfg.z_slots), bool),
            np.zeros((cfg.c_slots, cfg.z_slots), bool),
        )

    def copy(self) -> "EncounterTables":
        return EncounterTables(self.f_cx.copy(), self.f_xz.copy(), self.f_cz.copy())

    def n_epochs(self) -> int:
        return int(self.f_xz.any(axis=0).sum())


@dataclass
class SuffStats:
    n: np.ndarray  # (Z, X) expected visit counts
    first: np.ndarray  # (Z, X, D) sum of gamma * q
    sq: np.ndarray  # (Z, X) sum of gamma * |q|^2
    trans: np.ndarray  # (C, Z, Z)
    init: np.ndarray  # (C, Z)

    @classmethod
    def zeros(cls, cfg: TaskModelConfig) -> "SuffStats":
        Z, X, D, C = cfg.z_slots, cfg.n_x, cfg.d_q, cfg.c_slots
        return cls(np.zeros((Z, X)), np.zeros((Z, X, D)), np.zeros((Z, X)),
                   np.zeros((C, Z, Z)), np.zeros((C, Z)))

    def copy(self) -> "SuffStats":
        return SuffStats(*(a.copy() for a in dataclasses.astuple(self)))

    def decayed_plus(self, other: "SuffStats", eta: float) -> "SuffStats":
        k = 1.0 - eta
        return SuffStats(*(k * a + b for a, b in zip(dataclasses.astuple(self), dataclasses.astuple(other))))


@dataclass
class PosteriorBundle:
    gamma: np.ndarray  # (T, Z, X)
    xi: np.ndarray  # (T-1, Z, Z, X)
    ll: float


@dataclass
class UpdateMask:
    """Which parameters an EM step may touch."""

    emission: np.ndarray  # (Z, X) bool
    task: int | None = None
    sigma: bool = True


# ---------------------------------------------------------------------------
# Inference


def _task_view(params: TaskModelParams, tables: EncounterTables, c: int):
    zs = np.flatnonzero(tables.f_cz[c])
    xs = np.flatnonzero(tables.f_cx[c])
    if len(zs) == 0 or len(xs) == 0:
        raise TaskModelError(f"task c={c} has not been encountered")
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.pi_hat[c, zs])
        log_A = np.log(params.lambda_hat[c][np.ix_(zs, zs)])
    log_px = np.full(len(xs), -math.log(len(xs)))
    seeded = tables.f_xz[np.ix_(xs, zs)].T
    return zs, xs, log_pi, log_A, log_px, seeded


def _log_emis(obs: np.ndarray, params: TaskModelParams, zs, xs, seeded, dims: slice) -> np.ndarray:
    means = params.q_hat[np.ix_(zs, xs)][..., dims]
    le = hmm.log_gauss(obs, means, params.sigma_hat)
    le[..., ~seeded] = -np.inf
    return le


def forward_messages(q: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables):
    """Forward messages on the task's encountered slots.

    Returns ``(log_alpha, ll, zs, xs)`` where ``log_alpha`` is
    ``(T, len(zs), len(xs))`` and ``zs``/``xs`` are the slot indices.
    """
    zs, xs, log_pi, log_A, log_px, seeded = _task_view(params, tables, c)
    le = _log_emis(q, params, zs, xs, seeded, slice(None))
    log_alpha, ll = hmm.forward(le, log_pi, log_A, log_px, c)
    return log_alpha, float(ll), zs, xs


def backward_messages(q: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables):
    zs, xs, _, log_A, _, seeded = _task_view(params, tables, c)
    le = _log_emis(q, params, zs, xs, seeded, slice(None))
    return hmm.backward(le, log_A), zs, xs


def smooth(q: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables) -> PosteriorBundle:
    zs, xs, log_pi, log_A, log_px, seeded = _task_view(params, tables, c)
    le = _log_emis(q, params, zs, xs, seeded, slice(None))
    g, xi, ll = hmm.smooth(le, log_pi, log_A, log_px, c)
    T = q.shape[0]
    Z, X = params.q_hat.shape[:2]
    gamma = np.zeros((T, Z, X))
    gamma[:, zs[:, None], xs[None, :]] = g
    xi_full = np.zeros((max(T - 1, 0), Z, Z, X))
    xi_full[:, zs[:, None, None], zs[None, :, None], xs[None, None, :]] = xi
    return PosteriorBundle(gamma, xi_full, ll)


def _filter(obs: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables,
            dims: slice) -> np.ndarray:
    zs, xs, log_pi, log_A, log_px, seeded = _task_view(params, tables, c)
    le = _log_emis(obs, params, zs, xs, seeded, dims)
    pz = hmm.filter_z(le, log_pi, log_A, log_px, c)
    out = np.zeros(pz.shape[:-1] + (params.q_hat.shape[0],))
    out[..., zs] = pz
    return out


def train_time_infer(q: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables) -> np.ndarray:
    """``p(z_t | q_{1:t}, c)`` over all epoch slots; ``q`` may carry batch axes."""
    return _filter(q, c, params, tables, slice(None))


def test_time_infer(s: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables,
                    d_s: int = 5) -> np.ndarray:
    """``p(z_t | s_{1:t}, c)``, using only the input dimensions of the means."""
    return _filter(s[..., :d_s], c, params, tables, slice(0, d_s))


def loglik(q: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables) -> np.ndarray:
    """Marginal log-likelihood of one or more trials (batch axes allowed)."""
    zs, xs, log_pi, log_A, log_px, seeded = _task_view(params, tables, c)
    le = _log_emis(q, params, zs, xs, seeded, slice(None))
    _, ll = hmm.forward(le, log_pi, log_A, log_px, c)
    return ll


# ---------------------------------------------------------------------------
# Learning


def getstats(q: np.ndarray, c: int, params: TaskModelParams, tables: EncounterTables,
             cfg: TaskModelConfig) -> tuple[SuffStats, PosteriorBundle]:
    post = smooth(q, c, params, tables)
    X = SuffStats.zeros(cfg)
    X.n = post.gamma.sum(axis=0)
    X.first = np.einsum("tzx,td->zxd", post.gamma, q)
    X.sq = np.einsum("tzx,t->zx", post.gamma, np.sum(q * q, axis=1))
    X.trans[c] = post.xi.sum(axis=(0, 3))
    X.init[c] = post.gamma[0].sum(axis=1)
    return X, post


def ml_estimates(S: SuffStats, d_q: int):
    """Maximum-likelihood parameters from (decayed) statistics.

    Returns ``(means, sigma, trans, init)``; entries without support are NaN.
    """
    with np.errstate(invalid="ignore", divide="ignore"):
        means = S.first / S.n[..., None]
        ok = S.n > 0
        resid = S.sq[ok] - S.n[ok] * np.sum(means[ok] ** 2, axis=-1)
        tot = S.n[ok].sum()
        sigma = math.sqrt(max(resid.sum(), 0.0) / (d_q * tot)) if tot > 0 else float("nan")
        trans = S.trans / S.trans.sum(axis=-1, keepdims=True)
        init = S.init / S.init.sum(axis=-1, keepdims=True)
    return means, sigma, trans, init


def em_update(params: TaskModelParams, S: SuffStats, mask: UpdateMask, eta: float,
              d_q: int = 8) -> TaskModelParams:
    """Blend the masked parameters toward their ML values: ``theta + eta*(f(S) - theta)``."""
    means, sigma, trans, init = ml_estimates(S, d_q)
    out = params.copy()
    em = mask.emission & (S.n > 0)
    out.q_hat[em] = (1 - eta) * params.q_hat[em] + eta * means[em]
    if mask.sigma and math.isfinite(sigma) and sigma > 0:
        out.sigma_hat = (1 - eta) * params.sigma_hat + eta * sigma
    c = mask.task
    if c is not None:
        rows = S.trans[c].sum(axis=1) > 0
        out.lambda_hat[c, rows] = (1 - eta) * params.lambda_hat[c, rows] + eta * trans[c, rows]
        if S.init[c].sum() > 0:
            out.pi_hat[c] = (1 - eta) * params.pi_hat[c] + eta * init[c]
    return out


def segment(q: np.ndarray, threshold: float, min_len: int = 1) -> list[tuple[int, int]]:
    """Split at steps where any dimension jumps by more than ``threshold``.

    Runs shorter than ``min_len`` (isolated outliers) are folded into the
    preceding segment, or the following one at the start of the trial.
    """
    jumps = np.max(np.abs(np.diff(q, axis=0)), axis=1) > threshold
    cuts = [0] + [int(t) + 1 for t in np.flatnonzero(jumps)] + [len(q)]
    segs = [[a, b] for a, b in zip(cuts[:-1], cuts[1:]) if b > a]
    out: list[list[int]] = []
    for a, b in segs:
        if out and (b - a < min_len or out[-1][1] - out[-1][0] < min_len):
            out[-1][1] = b
        else:
            out.append([a, b])
    return [(a, b) for a, b in out]


def cluster_segments(q: np.ndarray, segs: list[tuple[int, int]], tol: float):
    """Merge segments whose means agree within ``tol`` in every dimension.

    Returns cluster means ``(K, D)`` in order of first appearance.
    """
    sums, counts = [], []
    for a, b in segs:
        m = q[a:b].mean(axis=0)
        best, best_d = None, tol
        for k in range(len(sums)):
            d = np.max(np.abs(m - sums[k] / counts[k]))
            if d < best_d:
                best, best_d = k, d
        if best is None:
            sums.append(q[a:b].sum(axis=0))
            counts.append(b - a)
        else:
            sums[best] = sums[best] + q[a:b].sum(axis=0)
            counts[best] += b - a
    return np.array([s / n for s, n in zip(sums, counts)])


def _choose_x(matched, best_d, in_task, tables: EncounterTables, c: int) -> int:
    """Pick the trial-variable slot for a trial from its segment matches.

    ``matched`` and ``in_task`` are ``(K, X)``: segment k matches a seeded mean
    under slot x, and that mean belongs to an epoch of task ``c``.
    """
    seeded_x = tables.f_xz.any(axis=1)
    task_x = tables.f_cx[c]
    full = matched.all(axis=0) & seeded_x
    total = np.where(matched, best_d, 0.0).sum(axis=0)

    def pick(cands, *keys):
        idx = np.flatnonzero(cands)
        order = np.lexsort((idx,) + tuple(k[idx] for k in reversed(keys)))
        return int(idx[order[0]])

    if (full & task_x).any():
        return pick(full & task_x, total)
    if full.any():
        return pick(full, total)

    # Partial match. Segments earlier in the trial (fixation, stimulus) are the
    # ones most likely shared with other tasks, so they weigh more.
    K = matched.shape[0]
    n_task = (matched & in_task).sum(axis=0)
    n_match = matched.sum(axis=0)
    early = (matched * (2.0 ** np.arange(K - 1, -1, -1))[:, None]).sum(axis=0)
    cands = seeded_x & ~task_x if task_x.any() else seeded_x
    fresh = ~seeded_x
    if cands.any():
        best = pick(cands, -n_task.astype(float), -n_match.astype(float), -early)
        if n_match[best] > 0 or not fresh.any():
            return best
    if fresh.any():
        return int(np.flatnonzero(fresh)[0])
    if (~task_x).any():
        return int(np.flatnonzero(~task_x)[0])
    return pick(task_x, -n_match.astype(float))


def incremental_init(params: TaskModelParams, tables: EncounterTables, q: np.ndarray, c: int,
                     cfg: TaskModelConfig):
    """Seed emission means revealed by this trial and pick its trial-variable slot.

    Returns updated ``(params, tables, x_r)``; the inputs are not modified.
    """
    params, tables = params.copy(), tables.copy()
    tol = cfg.match_tol if cfg.match_tol is not None else cfg.match_sigmas * params.sigma_hat
    segs = segment(q, cfg.cp_sigmas * params.sigma_hat, cfg.min_segment)
    centers = cluster_segments(q, segs, tol)  # (K, D)

    dist = np.max(np.abs(centers[:, None, None, :] - params.q_hat[None]), axis=-1)  # (K, Z, X)
    dist = np.where(tables.f_xz.T[None], dist, np.inf).transpose(0, 2, 1)  # (K, X, Z)
    best_z = np.argmin(dist, axis=2)
    best_d = np.take_along_axis(dist, best_z[..., None], axis=2)[..., 0]
    matched = best_d < tol
    in_task = tables.f_cz[c][best_z]

    x_r = _choose_x(matched, best_d, in_task, tables, c)
    used = [int(best_z[k, x_r]) if matched[k, x_r] else None for k in range(len(centers))]
    taken = {z for z in used if z is not None}
    task_slots = [z for z in np.flatnonzero(tables.f_cz[c]) if not tables.f_xz[x_r, z] and z not in taken]
    fresh = [z for z in np.flatnonzero(~tables.f_xz.any(axis=0))]
    fallback = [z for z in np.flatnonzero(~tables.f_xz[x_r])]
    for k, z in enumerate(used):
        if z is not None:
            continue
        pool = task_slots or [z2 for z2 in fresh if z2 not in taken] or \
            [z2 for z2 in fallback if z2 not in taken]
        if not pool:
            raise SlotExhaustedError(
                f"no free epoch slot for trial variable slot {x_r} (z_slots={cfg.z_slots}); "
                "increase z_slots"
            )
        z_new = int(pool[0])
        if task_slots:
            task_slots.pop(0)
        params.q_hat[z_new, x_r] = centers[k]
        tables.f_xz[x_r, z_new] = True
        used[k] = z_new
        taken.add(z_new)
    tables.f_cx[c, x_r] = True

    old = tables.f_cz[c].copy()
    tables.f_cz[c, list(taken)] = True
    new = tables.f_cz[c] & ~old
    if new.any():
        _grow_task(params, tables.f_cz[c], old, c, cfg)
    return params, tables, x_r


def _grow_task(params: TaskModelParams, active: np.ndarray, old: np.ndarray, c: int,
               cfg: TaskModelConfig) -> None:
    zs = np.flatnonzero(active)
    n = len(zs)
    fresh_row = np.zeros(params.lambda_hat.shape[-1])
    if n == 1:
        fresh_row[zs] = 1.0
    else:
        fresh_row[zs] = (1.0 - cfg.self_init) / (n - 1)
    if not old.any():
        for z in zs:
            row = fresh_row.copy()
            row[z] = cfg.self_init if n > 1 else 1.0
            params.lambda_hat[c, z] = row
        params.pi_hat[c] = 0.0
        params.pi_hat[c, zs] = 1.0 / n
        return
    new = active & ~old
    uni = np.zeros_like(fresh_row)
    uni[new] = 1.0 / new.sum()
    for z in np.flatnonzero(old):
        params.lambda_hat[c, z] = (1 - cfg.grow_mix) * params.lambda_hat[c, z] + cfg.grow_mix * uni
    for z in np.flatnonzero(new):
        row = fresh_row.copy()
        row[z] = cfg.self_init
        params.lambda_hat[c, z] = row / row.sum()
    params.pi_hat[c] = (1 - cfg.grow_mix) * params.pi_hat[c] + cfg.grow_mix * uni


def learn_trial(params: TaskModelParams, stats: SuffStats, tables: EncounterTables, q: np.ndarray,
                c: int, cfg: TaskModelConfig):
    """One step of the online algorithm on a single labelled trial.

    Returns ``(params, stats, tables, ll, x_r)``; the inputs are left untouched,
    so a failure part-way leaves the caller's state as it was.
    """
    params, tables, x_r = incremental_init(params, tables, q, c, cfg)
    temp = params
    S_hat = stats
    ll = float("nan")
    for _ in range(cfg.em_iters):
        X, post = getstats(q, c, temp, tables, cfg)
        ll = post.ll
        S_hat = stats.decayed_plus(X, cfg.eta_stats)
        mask = UpdateMask(emission=X.n > cfg.gate_thresh, task=c)
        temp = em_update(params, S_hat, mask, cfg.eta_params, cfg.d_q)
    return temp, S_hat, tables, ll, x_r


@dataclass
class LLRow:
    trial_index: int
    task_id: int
    ll: float
    n_encountered_epochs: int


@dataclass
class TaskModel:
    """Stateful wrapper: committed parameters, statistics and encounter tables."""

    cfg: TaskModelConfig = field(default_factory=TaskModelConfig)
    params: TaskModelParams = None
    stats: SuffStats = None
    tables: EncounterTables = None
    n_trials: int = 0
    log: list[LLRow] = field(default_factory=list)

    def __post_init__(self):
        if self.params is None:
            self.params = TaskModelParams.empty(self.cfg)
        if self.stats is None:
            self.stats = SuffStats.zeros(self.cfg)
        if self.tables is None:
            self.tables = EncounterTables.empty(self.cfg)

    def learn(self, q: np.ndarray, c: int) -> float:
        p, s, t, ll, _ = learn_trial(self.params, self.stats, self.tables, q, c, self.cfg)
        self.params, self.stats, self.tables = p, s, t
        self.log.append(LLRow(self.n_trials, c, ll, t.n_epochs()))
        self.n_trials += 1
        return ll

    def encountered(self, c: int) -> bool:
        return bool(self.tables.f_cx[c].any())

    def train_gating(self, q: np.ndarray, c: int) -> np.ndarray:
        return train_time_infer(q, c, self.params, self.tables)

    def test_gating(self, s: np.ndarray, c: int) -> np.ndarray:
        return test_time_infer(s, c, self.params, self.tables, self.cfg.d_s)

    def loglik(self, q: np.ndarray, c: int) -> np.ndarray:
        return loglik(q, c, self.params, self.tables)

    def task_epochs(self, c: int) -> np.ndarray:
        return np.flatnonzero(self.tables.f_cz[c])

    def state_arrays(self) -> dict[str, np.ndarray]:
        p, s, t = self.params, self.stats, self.tables
        return {
            "q_hat": p.q_hat, "sigma_hat": np.array(p.sigma_hat), "lambda_hat": p.lambda_hat,
            "pi_hat": p.pi_hat, "stats_n": s.n, "stats_first": s.first, "stats_sq": s.sq,
            "stats_trans": s.trans, "stats_init": s.init, "f_cx": t.f_cx, "f_xz": t.f_xz,
            "f_cz": t.f_cz, "n_trials": np.array(self.n_trials),
        }

    def save(self, path: str | Path) -> None:
        meta = {"format": "whathow.taskmodel", "version": CHECKPOINT_VERSION,
                "config": dataclasses.asdict(self.cfg)}
        with open(path, "wb") as fh:
            np.savez(fh, meta=np.array(json.dumps(meta)), **self.state_arrays())

    @classmethod
    def load(cls, path: str | Path) -> "TaskModel":
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f["meta"]))
            if meta.get("format") != "whathow.taskmodel" or meta.get("version") != CHECKPOINT_VERSION:
                raise TaskModelError(f"{path}: not a task-model checkpoint (v{CHECKPOINT_VERSION})")
            cfg = TaskModelConfig(**meta["config"])
            params = TaskModelParams(f["q_hat"].copy(), float(f["sigma_hat"]), f["lambda_hat"].copy(),
                                     f["pi_hat"].copy())
            stats = SuffStats(f["stats_n"].copy(), f["stats_first"].copy(), f["stats_sq"].copy(),
                              f["stats_trans"].copy(), f["stats_init"].copy())
            tables = EncounterTables(f["f_cx"].copy(), f["f_xz"].copy(), f["f_cz"].copy())
            return cls(cfg, params, stats, tables, int(f["n_trials"]))
