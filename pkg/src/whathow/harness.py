"""Experiment drivers: sequential training, transfer, compositional
generalisation, metrics logging and static plots.

Every experiment is a pure function of its :class:`ExperimentConfig` and seed.
Training trials, evaluation trials and network noise are drawn from separate
keyed substreams, so evaluating never shifts the training randomness and a
rerun reproduces the metrics log byte for byte.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import taskgen as tg
from .baselines import BaselineLearner, GeneralRNN, load_baseline, save_baseline
from .contextrnn import ContextRNN, RNNConfig, decay_learning_rates, load_bank, save_bank, evaluate_perf, loss_mask, weighted_mse
from .taskmodel import TaskModel, TaskModelConfig

METRICS_VERSION = 1
METRICS_COLUMNS = ("run_id", "seed", "phase", "global_step", "trained_task", "eval_task", "test_loss",
                   "performance", "task_model_ll")

# substream tags for trial_rng / default_rng keys
TRAIN_STREAM, EVAL_STREAM, CONSOLIDATE_STREAM, INIT_STREAM, NOISE_STREAM, EVAL_NOISE_STREAM = range(6)

DEFAULT_ORDERS = (
    ("DelayPro", "DelayAnti", "MemoryPro", "MemoryAnti", "DMPro", "DMAnti"),
    ("DMAnti", "DMPro", "MemoryAnti", "MemoryPro", "DelayAnti", "DelayPro"),
    ("MemoryPro", "DMPro", "DelayAnti", "MemoryAnti", "DelayPro", "DMAnti"),
    ("DMPro", "DelayPro", "MemoryAnti", "DMAnti", "MemoryPro", "DelayAnti"),
)
LEARNERS = ("context", "adam", "ewc", "owp")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    preset: str = "desk"
    task_order: tuple[str, ...] = DEFAULT_ORDERS[0]
    orders: tuple[tuple[str, ...], ...] = DEFAULT_ORDERS
    tm_trials_per_task: int = 500
    n_batches: int = 300
    batch_size: int = 64
    eval_every: int = 25
    n_eval: int = 200
    seeds: tuple[int, ...] = (0, 1)
    n_hidden: int = 128
    rank: int = 3
    alpha: float = 0.1
    sigma_r: float = 0.05
    activation: str = "relu"
    context_lr: float = 1e-3
    baseline_lr: float = 1e-2
    l2: float = 1e-5
    lr_decay: float = 0.5
    active_thresh: float = 1e-3
    ewc_lambda: float = 1e5
    owp_ridge: float = 1e-3
    consolidate_trials: int = 256
    eval_noise: bool = True
    # transfer experiments
    transfer_pairs: tuple[tuple[str, str], ...] = (("DelayPro", "DelayAnti"), ("MemoryPro", "MemoryAnti"),
                                                   ("DMPro", "DelayPro"))
    short_batches: int = 40
    # compositional generalisation
    compgen_pretrain: tuple[str, ...] = ("MPrimePro", "MPrimeAnti", "MemoryPro")
    compgen_task: str = "MemoryAnti"
    compgen_trials: int = 128
    compgen_eval_every: int = 4
    compgen_baseline_trials: int = 512
    gen: dict = field(default_factory=dict)
    taskmodel: dict = field(default_factory=dict)

    def __post_init__(self):
        self.task_order = tuple(self.task_order)
        self.orders = tuple(tuple(o) for o in self.orders)
        self.seeds = tuple(self.seeds)
        self.transfer_pairs = tuple(tuple(p) for p in self.transfer_pairs)
        self.compgen_pretrain = tuple(self.compgen_pretrain)
        if not self.task_order:
            raise ConfigError("task_order must not be empty")
        for name in self.task_order + sum(self.orders, ()) + self.compgen_pretrain + (self.compgen_task,) + \
                sum(self.transfer_pairs, ()):
            if name not in tg.TASK_ID:
                raise ConfigError(f"unknown task {name!r}")
        for k in ("tm_trials_per_task", "n_batches", "batch_size", "eval_every", "n_eval", "consolidate_trials",
                  "compgen_trials", "compgen_eval_every", "compgen_baseline_trials", "short_batches"):
            if getattr(self, k) <= 0:
                raise ConfigError(f"{k} must be positive, got {getattr(self, k)}")
        try:
            self.gen_config()
            self.rnn_config()
            self.tm_config()
        except (ValueError, TypeError) as err:
            raise ConfigError(str(err)) from None

    def gen_config(self) -> tg.GenConfig:
        return tg.GenConfig(**self.gen)

    def rnn_config(self, n_slots: int | None = None) -> RNNConfig:
        return RNNConfig(n_hidden=self.n_hidden, rank=self.rank, alpha=self.alpha, sigma_r=self.sigma_r,
                         activation=self.activation, n_slots=n_slots or self.tm_config().z_slots)

    def tm_config(self) -> TaskModelConfig:
        return TaskModelConfig(**self.taskmodel)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "desk": {},
    "full": {"n_hidden": 256, "n_batches": 1000, "batch_size": 256, "seeds": (0, 1, 2, 3, 4)},
    # a few seconds end to end; for smoke tests
    "tiny": {"n_hidden": 32, "n_batches": 4, "batch_size": 8, "eval_every": 2, "n_eval": 16,
             "tm_trials_per_task": 30, "consolidate_trials": 16, "compgen_trials": 8, "compgen_eval_every": 4,
             "compgen_baseline_trials": 16, "short_batches": 2, "seeds": (0,),
             "orders": (DEFAULT_ORDERS[0][:2],), "task_order": DEFAULT_ORDERS[0][:2],
             "transfer_pairs": (("DelayPro", "DelayAnti"),)},
}


def make_config(preset: str = "desk", **overrides) -> ExperimentConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (choose from {sorted(PRESETS)})")
    d = dict(PRESETS[preset])
    d.update(overrides)
    d["preset"] = preset
    try:
        return ExperimentConfig.from_dict(d)
    except TypeError as err:
        raise ConfigError(f"bad config value: {err}") from None


def load_config(path: str | Path, preset: str | None = None) -> ExperimentConfig:
    try:
        d = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    p = d.pop("preset", None) or preset or "desk"
    return make_config(p, **d)


# ---------------------------------------------------------------------------
# Metrics


@dataclass(frozen=True)
class MetricsRow:
    run_id: str
    seed: int
    phase: str
    global_step: int
    trained_task: str
    eval_task: str
    test_loss: float
    performance: float
    task_model_ll: float


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


class MetricsLog:
    """Append-only table of evaluation records."""

    def __init__(self, rows: Iterable[MetricsRow] = ()):
        self._rows: list[MetricsRow] = []
        self._last_step: dict[str, int] = {}
        for r in rows:
            self.append(r)

    def append(self, row: MetricsRow) -> None:
        last = self._last_step.get(row.run_id)
        if last is not None and row.global_step < last:
            raise ValueError(f"run {row.run_id}: global_step went back from {last} to {row.global_step}")
        self._last_step[row.run_id] = row.global_step
        self._rows.append(row)

    def extend(self, other: "MetricsLog") -> None:
        for r in other:
            self.append(r)

    def __iter__(self):
        return iter(self._rows)

    def __len__(self):
        return len(self._rows)

    def select(self, **kw) -> list[MetricsRow]:
        return [r for r in self._rows if all(getattr(r, k) == v for k, v in kw.items())]

    def to_text(self) -> str:
        lines = [f"# whathow-metrics v{METRICS_VERSION}", "\t".join(METRICS_COLUMNS)]
        for r in self._rows:
            lines.append("\t".join(_fmt(getattr(r, c)) for c in METRICS_COLUMNS))
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def load(cls, path: str | Path) -> "MetricsLog":
        lines = Path(path).read_text().splitlines()
        if not lines or lines[0] != f"# whathow-metrics v{METRICS_VERSION}":
            raise ValueError(f"{path}: not a metrics log (v{METRICS_VERSION})")
        if tuple(lines[1].split("\t")) != METRICS_COLUMNS:
            raise ValueError(f"{path}: unexpected columns")
        rows = []
        for line in lines[2:]:
            f = line.split("\t")
            rows.append(MetricsRow(f[0], int(f[1]), f[2], int(f[3]), f[4], f[5], float(f[6]), float(f[7]),
                                   float(f[8])))
        return cls(rows)


# ---------------------------------------------------------------------------
# Learners behind one interface


@dataclass
class EvalSet:
    batch: tg.TrialBatch
    mask: np.ndarray
    resp: np.ndarray


def make_eval_set(suite: tg.TaskSuite, c: int, gen: tg.GenConfig, seed: int, n: int) -> EvalSet:
    b = tg.sample_batch(suite, c, gen, seed, EVAL_STREAM, 0, n)
    resp = suite.response_mask()
    return EvalSet(b, loss_mask(b.z, resp), resp[b.z])


class ContextAgent:
    """Task model plus gated RNN, trained with the per-context protocol."""

    kind = "context"

    def __init__(self, cfg: ExperimentConfig, seed: int):
        self.cfg = cfg
        self.tm = TaskModel(cfg.tm_config())
        self.rnn = ContextRNN(cfg.rnn_config(self.tm.cfg.z_slots), base_lr=cfg.context_lr)
        self.rnn.state.lr_decay = cfg.lr_decay
        self.rnn.state.l2 = cfg.l2
        self.rnn.state.active_thresh = cfg.active_thresh
        self.init_rng = np.random.default_rng([seed, INIT_STREAM])
        self.noise_rng = np.random.default_rng([seed, NOISE_STREAM])
        self.tm_budget: dict[int, int] = {}
        self.usage: dict[int, np.ndarray] = {}
        self.frozen = False
        self.isolation: list[dict] = []
        self._snap = None

    def begin_task(self, c: int) -> None:
        self.usage[c] = np.zeros(self.rnn.cfg.n_slots)
        self._n_batches = 0
        # checksum every allocated context; the ones this task never gates must come back unchanged
        self._snap = {int(z): self.rnn.bank.checksum([z]) for z in np.flatnonzero(self.rnn.bank.allocated)}

    def learn_what(self, q: np.ndarray, c: int) -> list[float]:
        left = self.cfg.tm_trials_per_task - self.tm_budget.get(c, 0)
        lls = []
        for i in range(min(left, len(q))):
            lls.append(self.tm.learn(q[i], c))
        self.tm_budget[c] = self.tm_budget.get(c, 0) + len(lls)
        return lls

    def train_batch(self, batch: tg.TrialBatch, mask: np.ndarray) -> float:
        c = batch.c
        self.learn_what(batch.q, c)
        p = self.tm.train_gating(batch.q, c)
        self.rnn.ensure_allocated(np.flatnonzero(p.max(axis=(0, 1)) > 0), self.init_rng)
        loss, usage = self.rnn.train_batch(p, batch.s_rnn, batch.y, mask, self.noise_rng)
        self.usage[c] += usage
        self._n_batches += 1
        return loss

    def end_task(self, c: int, consolidate: tg.TrialBatch | None = None) -> None:
        usage = self.usage[c] / max(self._n_batches, 1)
        gated = set(np.flatnonzero(self.usage[c] > 0).tolist())
        untouched = [z for z in self._snap if z not in gated]
        same = [z for z in untouched if self.rnn.bank.checksum([z]) == self._snap[z]]
        self.isolation.append({"task": c, "ungated": untouched, "unchanged": same})
        decay_learning_rates(self.rnn.state, usage)

    def can_eval(self, c: int) -> bool:
        return self.tm.encountered(c)

    def evaluate(self, ev: EvalSet, rng: np.random.Generator) -> tuple[float, float, float]:
        b = ev.batch
        p = self.tm.test_gating(b.s, b.c)
        y_hat = self.rnn.predict(p, b.s_rnn, rng if self.cfg.eval_noise else None)
        loss = weighted_mse(y_hat, b.y, ev.mask)
        perf = float(evaluate_perf(y_hat, b.y, ev.resp).mean())
        ll = float(np.mean(self.tm.loglik(b.q, b.c)))
        return loss, perf, ll

    def state_digest(self) -> str:
        arrays = self.tm.state_arrays()
        h = hashlib.sha256(self.rnn.bank.checksum().encode())
        for k in sorted(arrays):
            h.update(np.ascontiguousarray(arrays[k]).tobytes())
        for k in sorted(self.rnn.state.m):
            h.update(self.rnn.state.m[k].tobytes())
            h.update(self.rnn.state.v[k].tobytes())
        h.update(self.rnn.state.lr.tobytes())
        return h.hexdigest()


class BaselineAgent:
    kind = "baseline"

    def __init__(self, cfg: ExperimentConfig, seed: int, method: str):
        rcfg = cfg.rnn_config(1)
        init_rng = np.random.default_rng([seed, INIT_STREAM])
        net = GeneralRNN.init(rcfg, len(tg.TASK_NAMES), init_rng)
        self.learner = BaselineLearner(net, method, lr=cfg.baseline_lr, l2=cfg.l2, ewc_lambda=cfg.ewc_lambda,
                                       owp_ridge=cfg.owp_ridge)
        self.cfg = cfg
        self.noise_rng = np.random.default_rng([seed, NOISE_STREAM])
        self.seen: set[int] = set()
        self.isolation: list[dict] = []

    def begin_task(self, c: int) -> None:
        self.seen.add(c)

    def train_batch(self, batch: tg.TrialBatch, mask: np.ndarray) -> float:
        return self.learner.train_batch(batch.s_rnn, batch.y, mask, batch.c, self.noise_rng)

    def end_task(self, c: int, consolidate: tg.TrialBatch | None = None) -> None:
        if consolidate is None:
            return
        mask = loss_mask(consolidate.z, _RESPONSE)
        self.learner.end_task(c, consolidate.s_rnn, consolidate.y, mask, self.noise_rng)

    def can_eval(self, c: int) -> bool:
        return c in self.seen

    def evaluate(self, ev: EvalSet, rng: np.random.Generator) -> tuple[float, float, float]:
        b = ev.batch
        y_hat = self.learner.predict(b.s_rnn, b.c, rng if self.cfg.eval_noise else None)
        return weighted_mse(y_hat, b.y, ev.mask), float(evaluate_perf(y_hat, b.y, ev.resp).mean()), float("nan")

    def state_digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.learner.net.params().items():
            h.update(v.tobytes())
        return h.hexdigest()


_RESPONSE = tg.full_suite().response_mask()


def make_agent(kind: str, cfg: ExperimentConfig, seed: int):
    if kind == "context":
        return ContextAgent(cfg, seed)
    if kind in ("adam", "ewc", "owp"):
        return BaselineAgent(cfg, seed, kind)
    raise ConfigError(f"unknown learner {kind!r} (choose from {LEARNERS})")


def save_agent(agent, out_dir: str | Path) -> list[Path]:
    """Write an agent's checkpoints into ``out_dir``."""
    out = Path(out_dir)
    if isinstance(agent, ContextAgent):
        paths = [out / "taskmodel.npz", out / "bank.npz"]
        agent.tm.save(paths[0])
        save_bank(agent.rnn.bank, paths[1], agent.rnn.state)
        return paths
    path = out / "baseline.npz"
    save_baseline(agent.learner, path)
    return [path]


def load_agent(ckpt_dir: str | Path, cfg: ExperimentConfig, seed: int):
    """Rebuild the agent saved by :func:`save_agent` in ``ckpt_dir``."""
    d = Path(ckpt_dir)
    if (d / "bank.npz").exists() and (d / "taskmodel.npz").exists():
        agent = ContextAgent(cfg, seed)
        agent.tm = TaskModel.load(d / "taskmodel.npz")
        bank, state = load_bank(d / "bank.npz")
        agent.rnn = ContextRNN(bank.cfg, bank, state, base_lr=state.base_lr if state else cfg.context_lr)
        return agent
    if (d / "baseline.npz").exists():
        learner = load_baseline(d / "baseline.npz")
        agent = BaselineAgent(cfg, seed, learner.method)
        agent.learner = learner
        agent.seen = set(learner.tasks_done)
        return agent
    raise ConfigError(f"{d}: no checkpoint found (expected bank.npz + taskmodel.npz or baseline.npz)")


def evaluate_agent(agent, cfg: ExperimentConfig, seed: int, run_id: str = "eval") -> MetricsLog:
    """One row per task the agent can be evaluated on."""
    gen = cfg.gen_config()
    suite = tg.full_suite(gen)
    log = MetricsLog()
    for c in range(len(tg.TASK_NAMES)):
        if not agent.can_eval(c):
            continue
        ev = make_eval_set(suite, c, gen, seed, cfg.n_eval)
        loss, perf, ll = agent.evaluate(ev, _eval_rng(seed, 0, c))
        log.append(MetricsRow(run_id, seed, "eval", 0, "", tg.TASK_NAMES[c], float(loss), float(perf), float(ll)))
    return log


# ---------------------------------------------------------------------------
# Experiments


@dataclass
class RunResult:
    run_id: str
    learner: str
    seed: int
    order: tuple[str, ...]
    log: MetricsLog
    final_perf: dict[str, float]
    final_loss: dict[str, float]
    isolation: list[dict]
    agent: object = None


def _eval_rng(seed: int, step: int, c: int) -> np.random.Generator:
    return np.random.default_rng([seed, EVAL_NOISE_STREAM, step, c])


def evaluate_all(agent, eval_sets: dict[int, EvalSet], tasks: Iterable[int], seed: int, step: int):
    out = {}
    for c in tasks:
        if agent.can_eval(c):
            out[c] = agent.evaluate(eval_sets[c], _eval_rng(seed, step, c))
    return out


def run_sequence(cfg: ExperimentConfig, learner: str, seed: int, order: Iterable[str], run_id: str,
                 phase: str = "continual", batches: Iterable[int] | None = None, eval_tasks: Iterable[str] | None = None,
                 agent=None, progress=None, step0: int = 0) -> RunResult:
    """Train ``learner`` on ``order`` task by task and evaluate along the way.

    ``batches`` gives a per-task batch budget (default ``cfg.n_batches``).
    Evaluation rows cover every task trained so far, or ``eval_tasks`` when
    given, every ``cfg.eval_every`` batches and at each task's end.
    """
    gen = cfg.gen_config()
    suite = tg.full_suite(gen)
    order = tuple(order)
    ids = [tg.TASK_ID[n] for n in order]
    budget = list(batches) if batches is not None else [cfg.n_batches] * len(order)
    fixed_eval = [tg.TASK_ID[n] for n in eval_tasks] if eval_tasks is not None else None
    pool = sorted(set(ids) | set(fixed_eval or ()))
    eval_sets = {c: make_eval_set(suite, c, gen, seed, cfg.n_eval) for c in pool}
    agent = agent or make_agent(learner, cfg, seed)
    log = MetricsLog()
    step = step0
    done: list[int] = []
    last: dict[int, tuple] = {}
    resp = suite.response_mask()
    for c, n_b in zip(ids, budget):
        agent.begin_task(c)
        if c not in done:
            done.append(c)
        for k in range(n_b):
            batch = tg.sample_batch(suite, c, gen, seed, TRAIN_STREAM, k * cfg.batch_size, cfg.batch_size)
            agent.train_batch(batch, loss_mask(batch.z, resp))
            step += 1
            if (k + 1) % cfg.eval_every == 0 or k + 1 == n_b:
                targets = fixed_eval if fixed_eval is not None else done
                res = evaluate_all(agent, eval_sets, targets, seed, step)
                for c2, (loss, perf, ll) in res.items():
                    log.append(MetricsRow(run_id, seed, phase, step, tg.TASK_NAMES[c], tg.TASK_NAMES[c2],
                                          float(loss), float(perf), float(ll)))
                    last[c2] = (loss, perf)
                if progress:
                    progress(f"{run_id} step {step} " + " ".join(
                        f"{tg.TASK_NAMES[c2]}={perf:.2f}" for c2, (_, perf, _) in res.items()))
        cons = tg.sample_batch(suite, c, gen, seed, CONSOLIDATE_STREAM, 0, cfg.consolidate_trials)
        agent.end_task(c, cons)
    return RunResult(run_id, learner, seed, order, log,
                     {tg.TASK_NAMES[c]: v[1] for c, v in last.items()},
                     {tg.TASK_NAMES[c]: v[0] for c, v in last.items()},
                     list(agent.isolation), agent)


def run_continual(cfg: ExperimentConfig, learners: Iterable[str] = ("context",), orders=None, seeds=None,
                  progress=None) -> tuple[MetricsLog, list[RunResult]]:
    """Sequential training over every (learner, order, seed) combination."""
    log = MetricsLog()
    results = []
    orders = orders if orders is not None else cfg.orders
    seeds = seeds if seeds is not None else cfg.seeds
    for learner in learners:
        for oi, order in enumerate(orders):
            for seed in seeds:
                r = run_sequence(cfg, learner, seed, order, f"{learner}-o{oi}-s{seed}", progress=progress)
                r.agent = None
                log.extend(r.log)
                results.append(r)
    return log, results


def run_transfer_forward(cfg: ExperimentConfig, task_pairs=None, learner: str = "context", seeds=None,
                         progress=None) -> MetricsLog:
    """For each pair (A, B): B's curve after A, and B trained from scratch."""
    log = MetricsLog()
    for a, b in task_pairs or cfg.transfer_pairs:
        for seed in seeds if seeds is not None else cfg.seeds:
            pre = run_sequence(cfg, learner, seed, (a, b), f"fwd-{a}-{b}-s{seed}", phase="transfer_fwd",
                               eval_tasks=(b,), progress=progress)
            log.extend(MetricsLog(r for r in pre.log if r.trained_task == b))
            scratch = run_sequence(cfg, learner, seed, (b,), f"scratch-{b}-s{seed}", phase="transfer_scratch",
                                   progress=progress)
            log.extend(scratch.log)
    return log


def run_transfer_backward(cfg: ExperimentConfig, task_pairs=None, short_budget: int | None = None,
                          learners: Iterable[str] = ("context", "owp"), seeds=None, progress=None) -> MetricsLog:
    """Train A briefly, then B, evaluating A (and B) throughout."""
    log = MetricsLog()
    nb = short_budget or cfg.short_batches
    for learner in learners:
        for a, b in task_pairs or cfg.transfer_pairs:
            for seed in seeds if seeds is not None else cfg.seeds:
                r = run_sequence(cfg, learner, seed, (a, b), f"bwd-{learner}-{a}-{b}-s{seed}",
                                 phase="transfer_bwd", batches=(nb, nb), eval_tasks=(a, b), progress=progress)
                log.extend(r.log)
    return log


def batches_to_half_loss(rows: list[MetricsRow], ref_loss: float, start_step: int) -> float:
    """Batches after ``start_step`` until the test loss first drops to ``ref_loss``."""
    for r in rows:
        if r.test_loss <= ref_loss:
            return r.global_step - start_step
    return math.inf


@dataclass
class CompgenResult:
    log: MetricsLog
    context_curve: list[tuple[int, float]]
    baseline_curves: dict[str, list[tuple[int, float]]]
    bank_checksum_before: str
    bank_checksum_after: str


def run_compgen(cfg: ExperimentConfig, seed: int = 0, baselines: Iterable[str] = ("adam", "ewc", "owp"),
                progress=None) -> CompgenResult:
    """Pretrain, freeze the RNN, then adapt only the task model on the new task."""
    gen = cfg.gen_config()
    suite = tg.full_suite(gen)
    target = tg.TASK_ID[cfg.compgen_task]
    ev = make_eval_set(suite, target, gen, seed, cfg.n_eval)
    log = MetricsLog()
    run_id = f"compgen-context-s{seed}"
    pre = run_sequence(cfg, "context", seed, cfg.compgen_pretrain, run_id + "-pretrain", phase="compgen_pretrain",
                       progress=progress)
    log.extend(pre.log)
    agent: ContextAgent = pre.agent
    step = max((r.global_step for r in pre.log), default=0)
    # rows of the adaptation phase count trials of the new task
    before = agent.rnn.bank.checksum()
    curve = []
    for i in range(cfg.compgen_trials):
        tr = tg.sample_trial(suite, target, gen, tg.trial_rng(seed, TRAIN_STREAM, target, i))
        agent.tm.learn(tr.q, target)
        n = i + 1
        if n % cfg.compgen_eval_every == 0 or n == cfg.compgen_trials:
            loss, perf, ll = agent.evaluate(ev, _eval_rng(seed, step + n, target))
            curve.append((n, perf))
            log.append(MetricsRow(run_id, seed, "compgen", n, cfg.compgen_task, cfg.compgen_task,
                                  float(loss), float(perf), float(ll)))
    after = agent.rnn.bank.checksum()
    if progress:
        progress(f"{run_id} " + " ".join(f"{n}:{p:.2f}" for n, p in curve))

    base_curves = {}
    for method in baselines:
        rid = f"compgen-{method}-s{seed}"
        r = run_sequence(cfg, method, seed, cfg.compgen_pretrain, rid + "-pretrain", phase="compgen_pretrain",
                         progress=progress)
        log.extend(r.log)
        ag: BaselineAgent = r.agent
        ag.begin_task(target)
        s0 = max(x.global_step for x in r.log)
        curve_b = []
        seen = 0
        while seen < cfg.compgen_baseline_trials:
            n = min(cfg.batch_size, cfg.compgen_baseline_trials - seen)
            batch = tg.sample_batch(suite, target, gen, seed, TRAIN_STREAM, seen, n)
            ag.train_batch(batch, loss_mask(batch.z, suite.response_mask()))
            seen += n
            loss, perf, _ = ag.evaluate(ev, _eval_rng(seed, s0 + seen, target))
            curve_b.append((seen, perf))
            log.append(MetricsRow(rid, seed, "compgen", seen, cfg.compgen_task, cfg.compgen_task, float(loss),
                                  float(perf), float("nan")))
        base_curves[method] = curve_b
        if progress:
            progress(f"{rid} " + " ".join(f"{n}:{p:.2f}" for n, p in curve_b))
    return CompgenResult(log, curve, base_curves, before, after)


def perf_at(curve: list[tuple[int, float]], n: int) -> float:
    """Performance of the last evaluation at or before ``n`` trials (0 before any)."""
    vals = [p for k, p in curve if k <= n]
    return vals[-1] if vals else 0.0


def run_what(cfg: ExperimentConfig, seed: int = 0, order=None, eval_every: int = 25, n_eval: int = 100,
             progress=None) -> tuple[MetricsLog, TaskModel]:
    """Task model alone: online learning over the order, LL of every seen task.

    Rows of phase ``what_gt`` carry the ground-truth-parameter LL of the same
    evaluation trials (constant over training).
    """
    gen = cfg.gen_config()
    suite = tg.full_suite(gen)
    order = tuple(order or cfg.task_order)
    tm = TaskModel(cfg.tm_config())
    run_id = f"what-s{seed}"
    ids = [tg.TASK_ID[n] for n in order]
    evq = {}
    gt = {}
    for c in ids:
        b = tg.sample_batch(suite, c, gen, seed, EVAL_STREAM, 0, n_eval)
        evq[c] = b.q
        gt[c] = float(np.mean([tg.ground_truth_ll(suite, b.trial(i), gen.sigma) for i in range(n_eval)]))
    log = MetricsLog()
    step = 0
    done = []
    for c in ids:
        done.append(c)
        for i in range(cfg.tm_trials_per_task):
            tr = tg.sample_trial(suite, c, gen, tg.trial_rng(seed, TRAIN_STREAM, c, i))
            tm.learn(tr.q, c)
            step += 1
            if (i + 1) % eval_every == 0 or i + 1 == cfg.tm_trials_per_task:
                for c2 in done:
                    ll = float(np.mean(tm.loglik(evq[c2], c2)))
                    log.append(MetricsRow(run_id, seed, "what", step, tg.TASK_NAMES[c], tg.TASK_NAMES[c2],
                                          float("nan"), float("nan"), ll))
                    log.append(MetricsRow(run_id, seed, "what_gt", step, tg.TASK_NAMES[c], tg.TASK_NAMES[c2],
                                          float("nan"), float("nan"), gt[c2]))
        if progress:
            progress(f"{run_id} {tg.TASK_NAMES[c]} done, epochs={tm.tables.n_epochs()}")
    return log, tm


def gating_accuracy(tm: TaskModel, suite: tg.TaskSuite, c: int, gen: tg.GenConfig, seed: int,
                    n: int = 200) -> float:
    """Fraction of time steps where the test-time argmax epoch is correct.

    Learned slots are unnamed, so each slot is first given the (F/M-merged)
    true epoch it most often coincides with under training-time inference on
    the same trials.
    """
    b = tg.sample_batch(suite, c, gen, seed, EVAL_STREAM, 10_000, n)
    z = tg.merge_map(suite)[b.z]
    train_arg = tm.train_gating(b.q, c).argmax(axis=-1)
    label = np.full(tm.cfg.z_slots, -1)
    for k in np.unique(train_arg):
        label[k] = np.bincount(z[train_arg == k]).argmax()
    test_arg = tm.test_gating(b.s, c).argmax(axis=-1)
    return float(np.mean(label[test_arg] == z))


# ---------------------------------------------------------------------------
# Plots


class PlotError(ValueError):
    pass


def _write_tsv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = ["\t".join(header)] + ["\t".join(_fmt(v) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def emit_plots(log: MetricsLog, out_dir: str | Path, figures: Iterable[str] | None = None) -> list[Path]:
    """Write one SVG per figure with the exact data behind it as TSV.

    Figures: ``continual`` (performance heatmap per run), ``what_ll`` (task
    model LL with ground-truth reference), ``transfer`` (test-loss curves),
    ``compgen`` (accuracy against trials). Requesting a figure whose phase is
    absent from ``log`` is an error.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if len(log) == 0:
        raise PlotError("metrics log is empty")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    phases = {r.phase for r in log}
    available = {
        "continual": {"continual"} & phases,
        "what_ll": {"what"} & phases,
        "transfer": {"transfer_fwd", "transfer_bwd", "transfer_scratch"} & phases,
        "compgen": {"compgen"} & phases,
    }
    wanted = list(figures) if figures is not None else [k for k, v in available.items() if v]
    if not wanted:
        raise PlotError("no plottable phase in metrics log")
    written = []
    plt.rcParams["svg.hashsalt"] = "whathow"
    for fig_name in wanted:
        if fig_name not in available:
            raise PlotError(f"unknown figure {fig_name!r}")
        if not available[fig_name]:
            raise PlotError(f"figure {fig_name!r} needs phase(s) absent from the log")
        rows = [r for r in log if r.phase in available[fig_name]]
        fig = _PLOTTERS[fig_name](plt, rows)
        svg = out / f"{fig_name}.svg"
        fig.savefig(svg, format="svg", metadata={"Date": None})
        plt.close(fig)
        _write_tsv(out / f"{fig_name}.tsv", list(METRICS_COLUMNS), [[getattr(r, c) for c in METRICS_COLUMNS]
                                                                     for r in rows])
        written += [svg, out / f"{fig_name}.tsv"]
    return written


def _plot_continual(plt, rows):
    runs = sorted({r.run_id for r in rows})
    fig, axes = plt.subplots(len(runs), 1, figsize=(8, 1.6 * len(runs) + 0.5), squeeze=False)
    for ax, run in zip(axes[:, 0], runs):
        rr = [r for r in rows if r.run_id == run]
        tasks = list(dict.fromkeys(r.trained_task for r in rr))
        steps = sorted({r.global_step for r in rr})
        grid = np.full((len(tasks), len(steps)), np.nan)
        si = {s: i for i, s in enumerate(steps)}
        ti = {t: i for i, t in enumerate(tasks)}
        for r in rr:
            if r.eval_task in ti:
                grid[ti[r.eval_task], si[r.global_step]] = r.performance
        ax.imshow(grid, aspect="auto", vmin=0, vmax=1, cmap="viridis", interpolation="nearest")
        ax.set_yticks(range(len(tasks)), tasks, fontsize=6)
        ax.set_title(run, fontsize=7)
        ax.set_xticks([])
    axes[-1, 0].set_xlabel("training time (evaluations)")
    fig.tight_layout()
    return fig


def _plot_what(plt, rows):
    fig, ax = plt.subplots(figsize=(6, 4))
    tasks = list(dict.fromkeys(r.eval_task for r in rows))
    colors = plt.cm.tab10(np.arange(len(tasks)))
    for t, col in zip(tasks, colors):
        est = [(r.global_step, r.task_model_ll) for r in rows if r.phase == "what" and r.eval_task == t]
        gt = [r.task_model_ll for r in rows if r.phase == "what_gt" and r.eval_task == t]
        if est:
            ax.plot(*zip(*est), color=col, label=t)
        if gt:
            ax.axhline(gt[0], color=col, ls="--", lw=0.8)
    ax.set_xlabel("trial")
    ax.set_ylabel("LL per trial")
    ax.legend(fontsize=6)
    fig.tight_layout()
    return fig


def _plot_transfer(plt, rows):
    fig, ax = plt.subplots(figsize=(6, 4))
    for run in sorted({r.run_id for r in rows}):
        for t in sorted({r.eval_task for r in rows if r.run_id == run}):
            rr = [r for r in rows if r.run_id == run and r.eval_task == t]
            ax.plot([r.global_step for r in rr], [math.log(max(r.test_loss, 1e-12)) for r in rr],
                    label=f"{run}:{t}", lw=0.8)
    ax.set_xlabel("batch")
    ax.set_ylabel("log test loss")
    ax.legend(fontsize=5)
    fig.tight_layout()
    return fig


def _plot_compgen(plt, rows):
    fig, ax = plt.subplots(figsize=(6, 4))
    for run in sorted({r.run_id for r in rows}):
        rr = [r for r in rows if r.run_id == run]
        ax.plot([r.global_step for r in rr], [r.performance for r in rr], marker=".", label=run)
    ax.set_xscale("log")
    ax.set_xlabel("trials of the new task")
    ax.set_ylabel("accuracy")
    ax.legend(fontsize=6)
    fig.tight_layout()
    return fig


_PLOTTERS = {"continual": _plot_continual, "what_ll": _plot_what, "transfer": _plot_transfer,
             "compgen": _plot_compgen}
