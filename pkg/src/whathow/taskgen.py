"""Generative model of the compositional cognitive task family.

Every task is a left-to-right walk through a handful of epochs drawn from a
shared vocabulary. Within an epoch the observations ``q_t = [s_t, y_t]`` are
Gaussian around a mean that depends on the epoch and on a trial variable
``x`` (stimulus direction, or a pair of stimulus strengths for the decision
tasks).

Indices are zero based throughout: epoch ids, task ids and trial-variable
indices all start at 0.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import hmm

S_DIM = 5
Y_DIM = 3
Q_DIM = S_DIM + Y_DIM

EPOCH_LABELS = ("F", "S", "R_P", "R_A", "M", "R_MP", "R_MA", "S_DM", "R_DMP", "R_DMA")
EPOCH_ID = {label: i for i, label in enumerate(EPOCH_LABELS)}

TASK_SEQUENCES = {
    "DelayPro": ("F", "S", "R_P"),
    "DelayAnti": ("F", "S", "R_A"),
    "MemoryPro": ("F", "S", "M", "R_MP"),
    "MemoryAnti": ("F", "S", "M", "R_MA"),
    "DMPro": ("F", "S_DM", "R_DMP"),
    "DMAnti": ("F", "S_DM", "R_DMA"),
}
MPRIME_SEQUENCES = {
    "MPrimePro": ("F", "S", "R_MP"),
    "MPrimeAnti": ("F", "S", "R_MA"),
}
TASK_NAMES = tuple(TASK_SEQUENCES) + tuple(MPRIME_SEQUENCES)
TASK_ID = {name: i for i, name in enumerate(TASK_NAMES)}

# (gamma, gamma') strength pairs of the decision tasks, indexed by x.
DM_STRENGTHS = (
    (0.5, 1.0), (1.0, 2.0), (0.5, 2.0), (0.2, 1.5),
    (1.0, 0.5), (2.0, 1.0), (2.0, 0.5), (1.5, 0.2),
)

SUITE_FORMAT_VERSION = 1


class TaskGenError(ValueError):
    """Invalid generator configuration or an infeasible trial request."""


def is_response(label: str) -> bool:
    return label.startswith("R")


@dataclass(frozen=True)
class GenConfig:
    sigma: float = 0.05
    n_x: int = 8
    min_epoch_dur: int = 5
    self_prob: float = 0.9
    trial_len: int = 50
    sigma_in: float = 0.01
    alpha: float = 0.1
    seed: int = 0
    # Cue channel (input dim 5) during S_DM. The default keeps the cue off as in
    # every other non-response epoch; True reproduces the printed table row,
    # where S_DM and R_DM inputs coincide and can only be told apart by timing.
    dm_stim_cue: bool = False

    def __post_init__(self):
        if not self.sigma > 0:
            raise TaskGenError(f"sigma must be positive, got {self.sigma}")
        if self.min_epoch_dur < 1:
            raise TaskGenError(f"min_epoch_dur must be >= 1, got {self.min_epoch_dur}")
        if not 0 < self.self_prob < 1:
            raise TaskGenError(f"self_prob must lie in (0, 1), got {self.self_prob}")
        if self.n_x < 1:
            raise TaskGenError(f"n_x must be >= 1, got {self.n_x}")
        if self.trial_len < 1:
            raise TaskGenError(f"trial_len must be >= 1, got {self.trial_len}")

    @property
    def input_noise_std(self) -> float:
        """Extra noise on ``s`` when it is fed to an RNN."""
        return math.sqrt(2.0 / self.alpha) * self.sigma_in


@dataclass
class EpochDef:
    epoch_id: int
    label: str
    mean_table: np.ndarray  # (n_x, Q_DIM); columns [s | y]

    @property
    def s_mean(self) -> np.ndarray:
        return self.mean_table[:, :S_DIM]

    @property
    def y_mean(self) -> np.ndarray:
        return self.mean_table[:, S_DIM:]


@dataclass
class TaskDef:
    task_id: int
    name: str
    sequence: tuple[int, ...]
    initial_probs: np.ndarray
    transitions: np.ndarray  # row-stochastic, transitions[from, to]
    terminal_epochs: frozenset[int] = field(default_factory=frozenset)


@dataclass
class TaskSuite:
    epochs: list[EpochDef]
    tasks: dict[int, TaskDef]
    n_x: int

    @property
    def n_epochs(self) -> int:
        return len(self.epochs)

    def means(self) -> np.ndarray:
        """All mean tables stacked as ``(n_epochs, n_x, Q_DIM)``."""
        return np.stack([e.mean_table for e in self.epochs])

    def task(self, c: int | str) -> TaskDef:
        if isinstance(c, str):
            c = TASK_ID[c]
        try:
            return self.tasks[c]
        except KeyError:
            raise TaskGenError(f"unknown task id {c}") from None

    def response_mask(self) -> np.ndarray:
        return np.array([is_response(e.label) for e in self.epochs])


@dataclass
class Trial:
    s: np.ndarray  # (T, 5)
    y: np.ndarray  # (T, 3)
    c: int
    z_true: np.ndarray  # (T,)
    x_true: int

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.s, self.y], axis=1)

    @property
    def T(self) -> int:
        return len(self.z_true)


def _clean(v: np.ndarray) -> np.ndarray:
    # cos(pi/2) and friends come out as 1e-16; the table is exact zeros there
    return np.where(np.abs(v) < 1e-12, 0.0, v)


def _direction(phi: float) -> np.ndarray:
    return _clean(np.array([math.cos(phi), math.sin(phi)]))


def _mean_row(label: str, x: int, dm_stim_cue: bool = False) -> np.ndarray:
    theta = x * math.pi / 4
    d = _direction(theta)
    anti = _direction(theta + math.pi)
    s = np.zeros(S_DIM)
    y = np.zeros(Y_DIM)
    if label in ("F", "M"):
        pass
    elif label == "S":
        s[:2] = d
    elif label in ("R_P", "R_A"):
        s[:2] = d
        s[4] = 1.0
        y[:2] = d if label == "R_P" else anti
        y[2] = 1.0
    elif label in ("R_MP", "R_MA"):
        s[4] = 1.0
        y[:2] = d if label == "R_MP" else anti
        y[2] = 1.0
    elif label in ("S_DM", "R_DMP", "R_DMA"):
        g, g2 = DM_STRENGTHS[x % len(DM_STRENGTHS)]
        th, th2 = 0.0, math.pi
        s[:2] = g * _direction(th)
        s[2:4] = g2 * _direction(th2)
        s[4] = 1.0
        if label == "S_DM":
            s[4] = 1.0 if dm_stim_cue else 0.0
            y[:] = (1.0, 0.0, 0.0)
        else:
            stronger = th if g > g2 else th2
            weaker = th2 if g > g2 else th
            y[:2] = _direction(stronger if label == "R_DMP" else weaker)
            y[2] = 1.0
    else:
        raise TaskGenError(f"unknown epoch label {label}")
    return np.concatenate([s, y])


def _task_def(task_id: int, name: str, labels: tuple[str, ...], cfg: GenConfig,
              n_epochs: int) -> TaskDef:
    seq = tuple(EPOCH_ID[l] for l in labels)
    pi = np.zeros(n_epochs)
    pi[seq[0]] = 1.0
    A = np.eye(n_epochs)
    for a, b in zip(seq[:-1], seq[1:]):
        A[a] = 0.0
        A[a, a] = cfg.self_prob
        A[a, b] = 1.0 - cfg.self_prob
    return TaskDef(task_id, name, seq, pi, A, frozenset({seq[-1]}))


def build_default_suite(cfg: GenConfig | None = None) -> TaskSuite:
    """The ten-epoch vocabulary and the six base tasks."""
    cfg = cfg or GenConfig()
    epochs = []
    for i, label in enumerate(EPOCH_LABELS):
        table = np.stack([_mean_row(label, x, cfg.dm_stim_cue) for x in range(cfg.n_x)])
        epochs.append(EpochDef(i, label, table))
    tasks = {}
    for name, labels in TASK_SEQUENCES.items():
        tid = TASK_ID[name]
        tasks[tid] = _task_def(tid, name, labels, cfg, len(epochs))
    return TaskSuite(epochs, tasks, cfg.n_x)


def make_mprime_tasks(suite: TaskSuite, cfg: GenConfig | None = None) -> tuple[TaskDef, TaskDef]:
    """Memory tasks with the memory epoch cut out (F -> S -> R_MP / R_MA).

    The returned tasks reuse the suite's epochs; they are also registered in
    ``suite.tasks`` so that trials can be sampled from them.
    """
    cfg = cfg or GenConfig()
    out = []
    for name, labels in MPRIME_SEQUENCES.items():
        tid = TASK_ID[name]
        td = _task_def(tid, name, labels, cfg, suite.n_epochs)
        suite.tasks[tid] = td
        out.append(td)
    return out[0], out[1]


def full_suite(cfg: GenConfig | None = None) -> TaskSuite:
    suite = build_default_suite(cfg)
    make_mprime_tasks(suite, cfg)
    return suite


def trial_rng(seed: int, *keys: int) -> np.random.Generator:
    """Independent substream for one trial, keyed by e.g. (stream, task, index)."""
    return np.random.default_rng([seed, *keys])


def sample_epoch_path(task: TaskDef, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Epoch ids for one trial of length ``cfg.trial_len``.

    Each non-final epoch lasts ``min_epoch_dur`` steps plus a geometric tail
    (continue with probability ``self_prob``). The tail is cut short when the
    remaining epochs would otherwise not fit at their minimum duration, and
    the final epoch absorbs until the end of the trial.
    """
    if not task.terminal_epochs:
        raise TaskGenError(f"task {task.name} has no terminal epoch")
    seq = task.sequence
    T, d = cfg.trial_len, cfg.min_epoch_dur
    if T < len(seq) * d:
        raise TaskGenError(
            f"trial_len={T} too short for {len(seq)} epochs of min duration {d} ({task.name})"
        )
    path = np.empty(T, dtype=np.int64)
    t = 0
    for k, e in enumerate(seq):
        if k == len(seq) - 1:
            path[t:] = e
            break
        room = T - t - (len(seq) - 1 - k) * d
        dwell = d + int(rng.geometric(1.0 - cfg.self_prob)) - 1
        dwell = min(dwell, room)
        path[t:t + dwell] = e
        t += dwell
    return path


def sample_trial(suite: TaskSuite, c: int, cfg: GenConfig, rng: np.random.Generator,
                 x: int | None = None) -> Trial:
    task = suite.task(c)
    if x is None:
        x = int(rng.integers(suite.n_x))
    path = sample_epoch_path(task, cfg, rng)
    q = suite.means()[path, x] + cfg.sigma * rng.standard_normal((cfg.trial_len, Q_DIM))
    return Trial(q[:, :S_DIM].copy(), q[:, S_DIM:].copy(), task.task_id, path, x)


def noisy_inputs(s: np.ndarray, cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Inputs as seen by the RNN: ``s`` plus independent input noise."""
    return s + cfg.input_noise_std * rng.standard_normal(s.shape)


@dataclass
class TrialBatch:
    s: np.ndarray  # (B, T, 5), task-model view
    y: np.ndarray  # (B, T, 3)
    z: np.ndarray  # (B, T)
    x: np.ndarray  # (B,)
    c: int
    s_rnn: np.ndarray  # (B, T, 5), with input noise

    def __len__(self):
        return len(self.x)

    @property
    def q(self) -> np.ndarray:
        return np.concatenate([self.s, self.y], axis=2)

    def trial(self, i: int) -> Trial:
        return Trial(self.s[i], self.y[i], self.c, self.z[i], int(self.x[i]))


def sample_batch(suite: TaskSuite, c: int, cfg: GenConfig, seed: int, stream: int,
                 start: int, n: int) -> TrialBatch:
    """Trials ``start .. start+n-1`` of substream ``(seed, stream, c)``."""
    trials, s_rnn = [], []
    for i in range(start, start + n):
        rng = trial_rng(seed, stream, c, i)
        tr = sample_trial(suite, c, cfg, rng)
        trials.append(tr)
        s_rnn.append(noisy_inputs(tr.s, cfg, rng))
    return TrialBatch(
        s=np.stack([t.s for t in trials]),
        y=np.stack([t.y for t in trials]),
        z=np.stack([t.z_true for t in trials]),
        x=np.array([t.x_true for t in trials]),
        c=c,
        s_rnn=np.stack(s_rnn),
    )


# ---------------------------------------------------------------------------
# Ground-truth likelihood with the indistinguishable epochs merged


def merge_map(suite: TaskSuite) -> np.ndarray:
    """Map each epoch id to the lowest id with an identical mean table."""
    out = np.arange(suite.n_epochs)
    for i, e in enumerate(suite.epochs):
        for j in range(i):
            if np.array_equal(e.mean_table, suite.epochs[j].mean_table):
                out[i] = out[j]
                break
    return out


def merged_task_params(suite: TaskSuite, c: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Initial probs, transitions and state list of task ``c`` after merging.

    A merged state's outgoing row is the equal-weight average of the rows of
    the epochs it absorbs (they share the same dwell-time law).
    """
    task = suite.task(c)
    mm = merge_map(suite)
    states = sorted({int(mm[e]) for e in task.sequence})
    idx = {s: i for i, s in enumerate(states)}
    n = len(states)
    A = np.zeros((n, n))
    counts = np.zeros(n)
    for e in set(task.sequence):
        row = np.zeros(n)
        for e2 in set(task.sequence):
            row[idx[int(mm[e2])]] += task.transitions[e, e2]
        A[idx[int(mm[e])]] += row
        counts[idx[int(mm[e])]] += 1
    A /= counts[:, None]
    pi = np.zeros(n)
    for e in task.sequence:
        pi[idx[int(mm[e])]] += task.initial_probs[e]
    return pi, A, np.array(states)


def ground_truth_ll(suite: TaskSuite, trial: Trial, sigma: float = 0.05) -> float:
    """log p(q_{1:T} | c) under the generating parameters (F and M merged)."""
    pi, A, states = merged_task_params(suite, trial.c)
    means = suite.means()[states]  # (Z, n_x, D)
    log_emis = hmm.log_gauss(trial.q, means, sigma)
    with np.errstate(divide="ignore"):
        _, ll = hmm.forward(log_emis, np.log(pi), np.log(A), np.full(suite.n_x, -math.log(suite.n_x)))
    return float(ll)


# ---------------------------------------------------------------------------
# Persistence


def suite_to_dict(suite: TaskSuite) -> dict:
    return {
        "format": "whathow.suite",
        "version": SUITE_FORMAT_VERSION,
        "n_x": suite.n_x,
        "epochs": [
            {"id": e.epoch_id, "label": e.label, "mean_table": e.mean_table.tolist()}
            for e in suite.epochs
        ],
        "tasks": [
            {
                "id": t.task_id,
                "name": t.name,
                "sequence": list(t.sequence),
                "initial_probs": t.initial_probs.tolist(),
                "transitions": t.transitions.tolist(),
                "terminal_epochs": sorted(t.terminal_epochs),
            }
            for t in suite.tasks.values()
        ],
    }


def suite_from_dict(d: dict) -> TaskSuite:
    if d.get("format") != "whathow.suite" or d.get("version") != SUITE_FORMAT_VERSION:
        raise TaskGenError(f"unsupported suite file (format={d.get('format')}, version={d.get('version')})")
    epochs = [EpochDef(e["id"], e["label"], np.array(e["mean_table"], dtype=float)) for e in d["epochs"]]
    tasks = {
        t["id"]: TaskDef(
            t["id"], t["name"], tuple(t["sequence"]),
            np.array(t["initial_probs"], dtype=float),
            np.array(t["transitions"], dtype=float),
            frozenset(t["terminal_epochs"]),
        )
        for t in d["tasks"]
    }
    return TaskSuite(epochs, tasks, d["n_x"])


def save_suite(suite: TaskSuite, path: str | Path) -> None:
    Path(path).write_text(json.dumps(suite_to_dict(suite), indent=1))


def load_suite(path: str | Path) -> TaskSuite:
    return suite_from_dict(json.loads(Path(path).read_text()))


TRIAL_COLUMNS = ["t", "c", "x", "z"] + [f"s{i + 1}" for i in range(S_DIM)] + [f"y{i + 1}" for i in range(Y_DIM)]


def dump_trial(trial: Trial, path: str | Path) -> None:
    """One row per time step; floats written with ``repr`` so they round-trip."""
    lines = ["\t".join(TRIAL_COLUMNS)]
    for t in range(trial.T):
        vals = [str(t), str(trial.c), str(trial.x_true), str(int(trial.z_true[t]))]
        vals += [repr(float(v)) for v in trial.s[t]] + [repr(float(v)) for v in trial.y[t]]
        lines.append("\t".join(vals))
    Path(path).write_text("\n".join(lines) + "\n")


def load_trial(path: str | Path) -> Trial:
    rows = Path(path).read_text().splitlines()
    if rows[0].split("\t") != TRIAL_COLUMNS:
        raise TaskGenError(f"{path}: unexpected trial dump header")
    data = [r.split("\t") for r in rows[1:] if r]
    c, x = int(data[0][1]), int(data[0][2])
    z = np.array([int(r[3]) for r in data])
    s = np.array([[float(v) for v in r[4:4 + S_DIM]] for r in data])
    y = np.array([[float(v) for v in r[4 + S_DIM:]] for r in data])
    return Trial(s, y, c, z, x)
