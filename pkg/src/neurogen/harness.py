"""Experiment runner: configuration, the train/trigger/grow loop, and result files."""
from __future__ import annotations

import copy
import csv
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from neurogen import data as datamod
from neurogen import initializers as ini
from neurogen import network as nw
from neurogen import triggers as tg
from neurogen.metrics import ActivationBuffer, MetricKind, MetricName, NotEvaluable, weight_effective_dimension

log = logging.getLogger(__name__)

STRATEGIES = {
    "select": (ini.InitKind.SELECT, tg.TriggerKind.ACTIVATION),
    "preactivation": (ini.InitKind.PREACTIVATION, tg.TriggerKind.ACTIVATION),
    "random": (ini.InitKind.RANDOM, tg.TriggerKind.ACTIVATION),
    "weight": (ini.InitKind.WEIGHT, tg.TriggerKind.WEIGHT),
    "gradmax": (ini.InitKind.GRADMAX, tg.TriggerKind.GRADIENT),
    "firefly": (ini.InitKind.FIREFLY, tg.TriggerKind.GRADIENT),
    "nest": (ini.InitKind.NEST, tg.TriggerKind.GRADIENT),
}
BUFFERED_INITS = {ini.InitKind.SELECT, ini.InitKind.PREACTIVATION}
GRADIENT_INITS = {ini.InitKind.GRADMAX, ini.InitKind.FIREFLY, ini.InitKind.NEST}

DEFAULTS = {
    "toy": dict(batchsize=128, buffer_size=1024, widths=[4], max_widths=[512], epochs=None),
    "mnist": dict(batchsize=512, buffer_size=1568, widths=[64, 64], max_widths=[784, 784], epochs=20),
}
WALL_CLOCK_FIELDS = ("train_seconds",)


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a run. Field defaults are the dense toy settings."""

    dataset: dict = field(default_factory=lambda: {"kind": "toy", "n_features": 16})
    widths: list = field(default_factory=lambda: [4])
    max_widths: list = field(default_factory=lambda: [512])
    strategy: str = "select"
    trigger: str | None = None
    unsafe_pairing: bool = False
    final_widths: list | None = None
    preset_fraction: float = 0.75
    preset_installments: int = 8
    metric: str = "effective_dimension"
    eps: float = 0.01
    gamma_a: float = 0.97
    gamma_w: float = 0.99
    candidates: int = 1000
    firefly_eps: float = 1e-4
    nest_quantile: float = 0.4
    evaluation_period: int = 1
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int | None = None
    max_epochs: int = 200
    convergence_tol: float = 1e-4
    convergence_patience: int = 5
    batchsize: int = 128
    buffer_size: int = 1024
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])
    out: str = "runs"
    checkpoint: bool = True

    @classmethod
    def defaults_for(cls, kind: str, **overrides) -> ExperimentConfig:
        """Table defaults for ``kind`` (``toy`` or ``mnist``/``mnist_sample``) with overrides applied."""
        family = "toy" if kind == "toy" else "mnist"
        base = dict(DEFAULTS[family])
        base["dataset"] = {"kind": kind, "n_features": 16} if kind == "toy" else {"kind": kind}
        base.update(overrides)
        return cls.from_dict(base)

    @classmethod
    def from_dict(cls, raw: dict) -> ExperimentConfig:
        known = set(cls.__dataclass_fields__)
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**copy.deepcopy(raw))
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return copy.deepcopy(asdict(self))

    @property
    def init_kind(self) -> ini.InitKind | None:
        return None if self.strategy == "static" else STRATEGIES[self.strategy][0]

    @property
    def trigger_kind(self) -> tg.TriggerKind:
        if self.trigger is not None:
            return tg.TriggerKind(self.trigger)
        if self.strategy == "static":
            return tg.TriggerKind.STATIC
        return STRATEGIES[self.strategy][1]

    @property
    def metric_kind(self) -> MetricKind:
        return MetricKind(MetricName(self.metric), self.eps)

    def validate(self) -> None:
        kind = self.dataset.get("kind")
        if kind not in ("toy", "mnist", "mnist_sample"):
            raise ConfigError(f"dataset.kind must be toy, mnist or mnist_sample, got {kind!r}")
        if kind == "toy":
            datamod.ToySpec(int(self.dataset.get("n_features", 0)))
        if self.strategy != "static" and self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from static, {', '.join(STRATEGIES)}")
        try:
            trig = self.trigger_kind
            MetricName(self.metric)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.strategy == "static" and trig is not tg.TriggerKind.STATIC:
            raise ConfigError("the static strategy cannot be paired with a growth trigger")
        if trig is tg.TriggerKind.STATIC and self.strategy != "static":
            raise ConfigError(f"strategy {self.strategy!r} needs a growth trigger; use strategy 'static' instead")
        if (self.strategy != "static" and not trig.is_preset and trig is not STRATEGIES[self.strategy][1]
                and not self.unsafe_pairing):
            raise ConfigError(f"{self.strategy} is paired with the {STRATEGIES[self.strategy][1].value} trigger; "
                              "set unsafe_pairing to use another")
        if not self.widths or any(int(w) < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive ints")
        if len(self.max_widths) != len(self.widths) or any(m < w for m, w in zip(self.max_widths, self.widths)):
            raise ConfigError("max_widths must have one entry per hidden layer, each >= the initial width")
        if trig.is_preset:
            if self.final_widths is None or len(self.final_widths) != len(self.widths):
                raise ConfigError("preset schedules need final_widths, one per hidden layer")
            if any(not w <= f <= m for w, f, m in zip(self.widths, self.final_widths, self.max_widths)):
                raise ConfigError("final_widths must lie between widths and max_widths")
        if self.epochs is not None and self.epochs < 1:
            raise ConfigError("epochs must be positive (or null for convergence mode)")
        for name in ("batchsize", "buffer_size", "max_epochs", "convergence_patience", "evaluation_period"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.candidates < 0:
            raise ConfigError("candidates must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        tg.TriggerConfig(trig, self.gamma_a, self.gamma_w)


@dataclass
class RunResult:
    seed: int
    train_loss: list
    train_accuracy: list
    test_accuracy: float
    test_loss: float
    train_seconds: float
    trajectory: list
    events: list
    initial_widths: list
    final_widths: list
    parameter_count: int
    steps: int
    epochs: int
    config: dict
    net: nw.DenseNet | None = field(default=None, repr=False)
    optimizer: nw.AdamState | None = field(default=None, repr=False)

    def summary(self) -> dict:
        return {
            "seed": self.seed,
            "strategy": self.config["strategy"],
            "trigger": ExperimentConfig.from_dict(self.config).trigger_kind.value,
            "test_accuracy": self.test_accuracy,
            "test_loss": self.test_loss,
            "train_seconds": self.train_seconds,
            "train_loss": self.train_loss,
            "train_accuracy": self.train_accuracy,
            "initial_widths": self.initial_widths,
            "final_widths": self.final_widths,
            "parameter_count": self.parameter_count,
            "growth_events": len(self.events),
            "steps": self.steps,
            "epochs": self.epochs,
            "config": self.config,
        }


def load_dataset(cfg: ExperimentConfig, seed: int) -> datamod.Dataset:
    spec = cfg.dataset
    kind = spec["kind"]
    if kind == "toy":
        ds = datamod.generate_toy(datamod.ToySpec(
            int(spec["n_features"]),
            noise=float(spec.get("noise", 0.10)),
            seed=int(spec.get("seed", seed)),
        ))
    elif kind == "mnist":
        directory = spec.get("dir") or os.environ.get("MNIST_DIR")
        if not directory:
            raise ConfigError("dataset.dir (or MNIST_DIR) must point at the MNIST IDX files")
        ds = datamod.load_mnist(directory)
    else:
        directory = Path(spec.get("dir") or Path.home() / ".cache" / "neurogen" / "mnist-sample")
        if not (directory / datamod.MNIST_FILES["test"][1]).exists():
            datamod.export_mnist_sample(directory)
        ds = datamod.load_mnist(directory)
    if spec.get("train_subset") or spec.get("test_subset"):
        ds = ds.subset(spec.get("train_subset"), spec.get("test_subset"))
    if spec.get("validation"):
        ds = ds.with_validation(0.1, seed=seed)
    return ds


def evaluate(net: nw.DenseNet, ds: datamod.Dataset, split: str = "test", chunk: int = 4096) -> tuple[float, float]:
    """Argmax accuracy and mean cross-entropy over a split."""
    X, y = ds.split(split)
    if y.size == 0:
        raise ValueError(f"split {split!r} is empty")
    correct, loss = 0, 0.0
    for start in range(0, y.size, chunk):
        logits = nw.forward(net, X[:, start:start + chunk]).logits
        yb = y[start:start + chunk]
        correct += int(np.count_nonzero(np.argmax(logits, axis=0) == yb))
        loss += nw.cross_entropy(logits, yb) * yb.size
    return correct / y.size, loss / y.size


class Grower:
    """Per-run growth policy: owns the buffer, baselines and trigger state."""

    def __init__(self, cfg: ExperimentConfig, net: nw.DenseNet, X_train, rng, steps_per_epoch: int):
        self.cfg = cfg
        self.init_kind = cfg.init_kind
        self.trigger = tg.TriggerConfig(cfg.trigger_kind, cfg.gamma_a, cfg.gamma_w, cfg.metric_kind,
                                        cfg.evaluation_period)
        self.rng = rng
        self.start_widths = list(net.widths[1:-1])
        self.total_steps = (cfg.epochs or 0) * steps_per_epoch
        kind = self.trigger.kind
        self.needs_buffer = kind is tg.TriggerKind.ACTIVATION or (
            kind.is_preset and self.init_kind in BUFFERED_INITS)
        self.buf = None
        if self.needs_buffer:
            self.buf = ActivationBuffer.for_net(net, cfg.buffer_size)
            # fill with the untrained network on a seeded draw of training samples
            cols = rng.permutation(X_train.shape[1])[:cfg.buffer_size]
            self.buf.push(nw.forward(net, X_train[:, cols]))
            if not self.buf.is_full(net.depth):
                raise ConfigError(f"buffer_size {cfg.buffer_size} exceeds the {X_train.shape[1]} training samples")
        if kind in (tg.TriggerKind.ACTIVATION, tg.TriggerKind.WEIGHT):
            tg.capture_baselines(net, self.buf, self.trigger)

    @property
    def active(self) -> bool:
        return self.trigger.kind is not tg.TriggerKind.STATIC

    def observe(self, trace) -> None:
        if self.buf is not None:
            self.buf.push(trace)

    def decide(self, net, l: int, step: int, batch_state) -> tg.Decision:
        kind = self.trigger.kind
        if kind is tg.TriggerKind.ACTIVATION:
            return tg.evaluate_activation(net, self.buf, self.trigger, l)
        if kind is tg.TriggerKind.WEIGHT:
            return tg.evaluate_weight(net, self.trigger, l)
        if kind is tg.TriggerKind.GRADIENT:
            trace, grads = batch_state()
            return tg.evaluate_gradient(net, trace, grads, l,
                                        cap_by_next=self.init_kind is ini.InitKind.GRADMAX)
        final = self.cfg.final_widths[l - 1]
        count = tg.preset_schedule(kind, step, self.total_steps, self.start_widths[l - 1], final,
                                   width=net.W(l).shape[0], fraction=self.cfg.preset_fraction,
                                   installments=self.cfg.preset_installments)
        return tg.Decision(tg.clamp_to_capacity(count, net.W(l).shape[0], net.max_widths[l - 1]), math.nan)

    def build(self, net, l: int, k: int, batch_state) -> ini.NewNeurons:
        cfg, rng, kind = self.cfg, self.rng, self.init_kind
        if kind in BUFFERED_INITS and not self.buf.is_full(l):
            self.buf.refresh(net)
        if kind is ini.InitKind.RANDOM:
            return ini.init_random(net, l, k, rng)
        if kind is ini.InitKind.SELECT:
            return ini.init_select(net, self.buf, l, k, rng, self.trigger.metric, cfg.candidates)
        if kind is ini.InitKind.PREACTIVATION:
            return ini.init_preactivation(net, self.buf, l, k, rng, self.trigger.metric, cfg.candidates)
        if kind is ini.InitKind.WEIGHT:
            return ini.init_weight(net, l, k, rng)
        trace, grads = batch_state()
        if kind is ini.InitKind.GRADMAX:
            return ini.init_gradmax(net, trace, grads, l, min(k, net.W(l + 1).shape[0]))
        if kind is ini.InitKind.FIREFLY:
            return ini.init_firefly(net, trace, grads, l, k, rng, cfg.firefly_eps, cfg.candidates)
        return ini.init_nest(net, trace, grads, l, k, rng, cfg.nest_quantile)

    def activation_metric_after(self, l: int, new: ini.NewNeurons) -> float:
        """Layer metric with the new neurons' activations appended, on the pre-growth buffer."""
        if self.trigger.kind is tg.TriggerKind.ACTIVATION and self.buf.is_full(l):
            H_prev, _, H_l = self.buf.aligned(l)
            stacked = np.vstack([H_l, ini.candidate_activations(new.fan_in, H_prev)])
            try:
                return self.trigger.metric(stacked)
            except NotEvaluable:
                return math.nan
        return math.nan

    def after_growth(self, net, l: int) -> None:
        if self.buf is not None:
            self.buf.invalidate(l, net.widths)


def _converged(losses: list, tol: float, patience: int) -> bool:
    if len(losses) <= patience:
        return False
    recent = losses[-(patience + 1):]
    return all(recent[i] - recent[i + 1] < tol for i in range(patience))


def run_single(cfg: ExperimentConfig, seed: int, ds: datamod.Dataset | None = None) -> RunResult:
    """Train one seed under ``cfg``; growth follows the configured trigger/initializer pair."""
    ds = ds if ds is not None else load_dataset(cfg, seed)
    X_train, y_train = ds.split("train")
    rng = datamod.make_rng(seed)
    widths = [ds.feature_count, *cfg.widths, ds.class_count]
    net = nw.init_network(widths, cfg.max_widths, seed=rng)
    state = nw.AdamState.for_net(net, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    steps_per_epoch = math.ceil(X_train.shape[1] / cfg.batchsize)
    if cfg.trigger_kind.is_preset and cfg.epochs is None:
        raise ConfigError("preset schedules need a fixed number of epochs")
    grower = Grower(cfg, net, X_train, rng, steps_per_epoch)

    trajectory = [(0, l, w) for l, w in enumerate(net.widths[1:-1], start=1)]
    events: list[tg.GrowthEvent] = []
    train_loss, train_acc = [], []
    step = 0
    max_epochs = cfg.epochs if cfg.epochs is not None else cfg.max_epochs
    started = time.perf_counter()
    for epoch in range(max_epochs):
        loss_sum, correct = 0.0, 0
        for Xb, yb in datamod.batches(X_train, y_train, cfg.batchsize, seed, epoch):
            trace, grads = nw.loss_and_grads(net, Xb, yb)
            loss_sum += grads.loss * yb.size
            correct += int(np.count_nonzero(np.argmax(trace.logits, axis=0) == yb))
            nw.adam_step(net, state, grads)
            step += 1
            if not grower.active:
                continue
            grower.observe(trace)
            if step % cfg.evaluation_period:
                continue
            cache = {}

            def batch_state():
                if "tg" not in cache:
                    cache["tg"] = nw.loss_and_grads(net, Xb, yb)
                return cache["tg"]

            grew = False
            for l in net.hidden_layers():
                decision = grower.decide(net, l, step, batch_state)
                if decision.count <= 0:
                    continue
                try:
                    new = grower.build(net, l, decision.count, batch_state)
                except ini.GrowthImpossible as exc:
                    log.info("step %d layer %d: %s", step, l, exc)
                    continue
                if new.k == 0:
                    continue
                after = grower.activation_metric_after(l, new)
                ini.apply_growth(net, state, l, new)
                if grower.trigger.kind is tg.TriggerKind.WEIGHT:
                    after = weight_effective_dimension(net.W(l), cfg.eps)
                grower.after_growth(net, l)
                cache.clear()
                events.append(tg.GrowthEvent(step, l, new.k, net.W(l).shape[0], decision.metric, after,
                                             grower.trigger.kind.value))
                grew = True
            if grew:
                trajectory.extend((step, l, w) for l, w in enumerate(net.widths[1:-1], start=1))
        n_train = y_train.size
        train_loss.append(loss_sum / n_train)
        train_acc.append(correct / n_train)
        trajectory.extend((step, l, w) for l, w in enumerate(net.widths[1:-1], start=1))
        if cfg.epochs is None and _converged(train_loss, cfg.convergence_tol, cfg.convergence_patience):
            break
    elapsed = time.perf_counter() - started
    test_acc, test_loss = evaluate(net, ds, "test")
    return RunResult(
        seed=int(seed),
        train_loss=train_loss,
        train_accuracy=train_acc,
        test_accuracy=test_acc,
        test_loss=test_loss,
        train_seconds=elapsed,
        trajectory=_dedupe(trajectory),
        events=events,
        initial_widths=list(cfg.widths),
        final_widths=list(net.widths[1:-1]),
        parameter_count=net.parameter_count(),
        steps=step,
        epochs=len(train_loss),
        config=cfg.to_dict(),
        net=net,
        optimizer=state,
    )


def _dedupe(rows):
    seen, out = set(), []
    for row in rows:
        if row not in seen:
            seen.add(row)
            out.append(row)
    return out


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> list[RunResult]:
    """Run every seed in ``cfg.seeds`` sequentially; write outputs when ``out`` is given."""
    results = []
    for seed in cfg.seeds:
        result = run_single(cfg, seed)
        log.info("seed %s: test accuracy %.4f, widths %s, %.1fs", seed, result.test_accuracy,
                 result.final_widths, result.train_seconds)
        results.append(result)
        if out is not None:
            emit_outputs([result], out)
    return results


EVENT_FIELDS = ["step", "layer", "width", "metric_before", "metric_after", "neurons_added", "trigger_kind"]


def emit_outputs(results: list[RunResult], directory) -> list[Path]:
    """Write ``seed_<n>/{events.csv,trajectory.csv,summary.json,checkpoint.json}`` per result."""
    if not results:
        raise ValueError("no results to write")
    written = []
    for result in results:
        target = Path(directory) / f"seed_{result.seed}"
        target.mkdir(parents=True, exist_ok=True)
        with open(target / "events.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=EVENT_FIELDS)
            writer.writeheader()
            for ev in result.events:
                writer.writerow({k: getattr(ev, k) for k in EVENT_FIELDS})
        with open(target / "trajectory.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "layer", "width"])
            writer.writerows(result.trajectory)
        (target / "summary.json").write_text(json.dumps(result.summary(), indent=2, sort_keys=True) + "\n")
        if result.net is not None and result.config.get("checkpoint", True):
            nw.save_checkpoint(target / "checkpoint.json", result.net, result.optimizer)
        written.append(target)
    return written


def strip_wall_clock(summary: dict) -> dict:
    return {k: v for k, v in summary.items() if k not in WALL_CLOCK_FIELDS}


ANALYZE_FIELDS = ["run", "strategy", "trigger", "seed", "test_accuracy", "parameter_count", "train_seconds",
                  "final_widths"]


def analyze(directory) -> list[dict]:
    """Collect every ``summary.json`` under ``directory`` into ``comparison.csv`` and return the rows."""
    directory = Path(directory)
    rows = []
    for path in sorted(directory.rglob("summary.json")):
        s = json.loads(path.read_text())
        rows.append({
            "run": str(path.parent.parent.relative_to(directory)),
            "strategy": s["strategy"],
            "trigger": s["trigger"],
            "seed": s["seed"],
            "test_accuracy": s["test_accuracy"],
            "parameter_count": s["parameter_count"],
            "train_seconds": s["train_seconds"],
            "final_widths": " ".join(str(w) for w in s["final_widths"]),
        })
    if not rows:
        raise FileNotFoundError(f"no summary.json files under {directory}")
    with open(directory / "comparison.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=ANALYZE_FIELDS)
        writer.writeheader()
        writer.writerows(rows)
    return rows


def aggregate(rows: list[dict]) -> list[dict]:
    """Mean and standard deviation per run directory."""
    groups: dict[str, list[dict]] = {}
    for row in rows:
        groups.setdefault(row["run"], []).append(row)
    out = []
    for run, members in groups.items():
        acc = np.array([m["test_accuracy"] for m in members])
        params = np.array([m["parameter_count"] for m in members], dtype=float)
        secs = np.array([m["train_seconds"] for m in members])
        out.append({
            "run": run, "strategy": members[0]["strategy"], "trigger": members[0]["trigger"], "seeds": len(members),
            "accuracy_mean": float(acc.mean()), "accuracy_std": float(acc.std()),
            "parameters_mean": float(params.mean()), "seconds_mean": float(secs.mean()),
        })
    return out


def set_path(raw: dict, key: str, value) -> dict:
    """Return a copy of ``raw`` with the dotted ``key`` set to ``value``."""
    raw = copy.deepcopy(raw)
    node = raw
    parts = key.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return raw
