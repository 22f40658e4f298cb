"""Config-driven training with scheduled conditioning probes and trace output.

A config is one JSON document::

    {
      "seed": 0,
      "data": {"source": "mnist", "path": null, "preprocess": "Crop12",
               "standardize": true, "n_train": null},
      "network": {"topology": "mlp", "width": 256, "depth": 5, "bn": "hidden",
                  "last_bn": false, "variant": "PostAct", "blocks": 8,
                  "init": "LeCun", "bn_eps": 1e-5},
      "optimizer": {"kind": "SGD", "lr": 0.1, "batch_size": 128, "epochs": 10,
                    "steps": null, "frozen_layers": []},
      "loss": "SoftmaxCE",
      "probe": {"enabled": true, "schedule": null, "kappa_p": [0.5, 0.8, 0.9, 1.0],
                "probe_batch": 1024, "grad_mode": "KfacApprox", "neurons": true,
                "neuron_sample": null, "domination_threshold": 1e-3,
                "eval_batch": 10000}
    }

Every field is optional.  ``CONDLAB_SEED`` in the environment replaces
``seed``; the network is initialised from ``seed``, minibatch order from
``seed + 1``.  A probe whose statistics overflow is skipped and its step
listed under ``skipped_probes`` in the final summary.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .conditioning import DEFAULT_PERCENTS, GradMode, LayerConditioning, layer_conditioning
from .data import Dataset, load_mnist, default_mnist_dir, synthetic_gaussian
from .diagnostics import (
    DOMINATION_THRESHOLD,
    DominationReport,
    NeuronActivity,
    neuron_activity,
    relu_owners,
)
from .errors import ConfigError, CondlabError, InvalidValueError
from .nn import (
    BN_EPS,
    BlockVariant,
    Init,
    Loss,
    Network,
    OptimizerKind,
    OptimizerState,
    backward,
    build_network,
    forward,
    load_network,
    loss_and_grad,
    mlp_specs,
    predict_error,
    residual_mlp_specs,
    save_network,
    step,
)

EARLY_STEPS = (0, 1, 2, 5, 10)
SEED_ENV = "CONDLAB_SEED"


# ---------------------------------------------------------------- config

@dataclass
class DataConfig:
    source: str = "mnist"
    path: Optional[str] = None
    preprocess: str = "Crop12"
    standardize: bool = True
    n_train: Optional[int] = None
    # synthetic source only
    n: int = 1000
    n_test: int = 0
    dim: int = 20
    classes: int = 10
    class_separation: float = 1.0


@dataclass
class NetworkConfig:
    topology: str = "mlp"
    width: int = 256
    depth: int = 5
    bn: str = "none"
    last_bn: bool = False
    variant: str = "PostAct"
    blocks: int = 8
    init: str = "LeCun"
    bn_eps: float = BN_EPS


@dataclass
class OptimizerConfig:
    kind: str = "SGD"
    lr: float = 0.1
    batch_size: int = 128
    epochs: int = 1
    steps: Optional[int] = None
    frozen_layers: List[int] = field(default_factory=list)
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ProbeConfig:
    enabled: bool = True
    schedule: Optional[List[int]] = None
    kappa_p: List[float] = field(default_factory=lambda: list(DEFAULT_PERCENTS))
    probe_batch: int = 1024
    grad_mode: str = "KfacApprox"
    neurons: bool = True
    neuron_sample: Optional[int] = None
    domination_threshold: float = DOMINATION_THRESHOLD
    eval_batch: int = 10000


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    loss: str = "SoftmaxCE"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, env=None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        sections = {"data": DataConfig, "network": NetworkConfig,
                    "optimizer": OptimizerConfig, "probe": ProbeConfig}
        known = {f.name for f in fields(cls)}
        for key in d:
            if key not in known:
                raise ConfigError("unknown field", key)
        kwargs = {}
        for key, value in d.items():
            if key in sections:
                kwargs[key] = _section(sections[key], value, key)
            else:
                kwargs[key] = value
        cfg = cls(**kwargs)
        env = os.environ if env is None else env
        if env.get(SEED_ENV):
            try:
                cfg.seed = int(env[SEED_ENV])
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer", "seed") from None
        cfg.validate()
        return cfg

    def validate(self) -> None:
        _expect_int(self.seed, "seed", minimum=0)
        _choice(self.loss, [l.value for l in Loss], "loss")
        d = self.data
        _choice(d.source, ["mnist", "synthetic"], "data.source")
        _choice(d.preprocess, ["Crop12", "Full28"], "data.preprocess")
        if d.n_train is not None:
            _expect_int(d.n_train, "data.n_train", minimum=2)
        if d.source == "synthetic":
            _expect_int(d.n, "data.n", minimum=2)
            _expect_int(d.n_test, "data.n_test", minimum=0)
            _expect_int(d.dim, "data.dim", minimum=1)
            _expect_int(d.classes, "data.classes", minimum=2)
        n = self.network
        _choice(n.topology, ["mlp", "residual"], "network.topology")
        _choice(n.bn, ["none", "hidden", "all"], "network.bn")
        _choice(n.variant, [v.value for v in BlockVariant], "network.variant")
        _choice(n.init, [i.value for i in Init], "network.init")
        _expect_int(n.width, "network.width", minimum=1)
        _expect_int(n.depth, "network.depth", minimum=1)
        _expect_int(n.blocks, "network.blocks", minimum=0)
        if not (isinstance(n.bn_eps, (int, float)) and n.bn_eps >= 0):
            raise ConfigError("must be a non-negative number", "network.bn_eps")
        o = self.optimizer
        _choice(o.kind, [k.value for k in OptimizerKind], "optimizer.kind")
        if not (isinstance(o.lr, (int, float)) and o.lr >= 0):
            raise ConfigError("must be a non-negative number", "optimizer.lr")
        _expect_int(o.batch_size, "optimizer.batch_size", minimum=1)
        _expect_int(o.epochs, "optimizer.epochs", minimum=0)
        if o.steps is not None:
            _expect_int(o.steps, "optimizer.steps", minimum=0)
        depth = self.linear_count()
        for i, k in enumerate(o.frozen_layers):
            _expect_int(k, f"optimizer.frozen_layers[{i}]", minimum=1)
            if k > depth:
                raise ConfigError(f"network has only {depth} Linear layers", f"optimizer.frozen_layers[{i}]")
        p = self.probe
        if p.schedule is not None:
            for i, s in enumerate(p.schedule):
                _expect_int(s, f"probe.schedule[{i}]", minimum=0)
                if i and s <= p.schedule[i - 1]:
                    raise ConfigError("schedule steps must be strictly increasing", f"probe.schedule[{i}]")
        for i, q in enumerate(p.kappa_p):
            if not (isinstance(q, (int, float)) and 0 < q <= 1):
                raise ConfigError("percentages must lie in (0, 1]", f"probe.kappa_p[{i}]")
        _choice(p.grad_mode, [g.value for g in GradMode], "probe.grad_mode")
        _expect_int(p.probe_batch, "probe.probe_batch", minimum=2)
        _expect_int(p.eval_batch, "probe.eval_batch", minimum=2)
        if p.neuron_sample is not None:
            _expect_int(p.neuron_sample, "probe.neuron_sample", minimum=2)

    def linear_count(self) -> int:
        n = self.network
        if n.topology == "mlp":
            return n.depth
        return 2 + 2 * n.blocks


def _section(cls, value, path):
    if not isinstance(value, dict):
        raise ConfigError("must be an object", path)
    names = {f.name for f in fields(cls)}
    for key in value:
        if key not in names:
            raise ConfigError("unknown field", f"{path}.{key}")
    return cls(**value)


def _expect_int(value, path, minimum=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError("must be an integer", path)
    if minimum is not None and value < minimum:
        raise ConfigError(f"must be >= {minimum}", path)


def _choice(value, allowed, path):
    if value not in allowed:
        raise ConfigError(f"must be one of {allowed}, got {value!r}", path)


def load_config(path, env=None) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw, env=env)


# ---------------------------------------------------------------- records

@dataclass
class ProbeRecord:
    step: int
    layers: List[LayerConditioning]
    domination: List[DominationReport]
    neurons: List[NeuronActivity]
    loss: float
    train_error: float
    test_error: Optional[float] = None

    def to_dict(self) -> dict:
        return _encode(asdict(self))

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeRecord":
        d = _decode(d)
        layers = []
        for lc in d["layers"]:
            for key in ("kappa_p_sx", "kappa_p_sgh", "kappa_p_f"):
                lc[key] = {float(p): v for p, v in lc[key].items()}
            layers.append(LayerConditioning(**lc))
        return cls(
            step=d["step"],
            layers=layers,
            domination=[DominationReport(**r) for r in d["domination"]],
            neurons=[NeuronActivity(**r) for r in d["neurons"]],
            loss=d["loss"],
            train_error=d["train_error"],
            test_error=d["test_error"],
        )


def _encode(obj):
    """JSON-safe copy: non-finite floats become strings, float keys become repr strings."""
    if isinstance(obj, dict):
        return {(repr(k) if isinstance(k, float) else k): _encode(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_encode(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _decode(obj):
    if isinstance(obj, dict):
        return {k: _decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_decode(v) for v in obj]
    if obj in ("inf", "-inf", "nan"):
        return float(obj)
    return obj


# ---------------------------------------------------------------- report

def _pct(p: float) -> str:
    return f"{p * 100:g}"


def csv_header(percents: Sequence[float]) -> List[str]:
    cols = ["step", "layer", "lambda_max_sx", "lambda_max_sgh"]
    cols += [f"kappa_p{_pct(p)}_sx" for p in percents]
    cols += [f"kappa_p{_pct(p)}_sgh" for p in percents]
    cols += ["lambda_max_f", "kappa_f"]
    cols += [f"kappa_p{_pct(p)}_f" for p in percents]
    cols += ["lambda_max_sgw", "w_fro", "w_spec", "g_spec", "dominated", "dying", "full",
             "loss", "train_error", "test_error"]
    return cols


def _num(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return "%.17g" % float(v)


def trace_rows(records: Sequence[ProbeRecord], percents: Sequence[float]) -> List[List[str]]:
    rows = []
    for rec in records:
        dom = {r.layer: r for r in rec.domination}
        for lc in rec.layers:
            dying = full = None
            owned = [n for n in rec.neurons if n.layer == lc.layer]
            if owned:
                dying = sum(n.dying_count for n in owned)
                full = sum(n.full_count for n in owned)
            d = dom.get(lc.layer)
            row = [rec.step, lc.layer, lc.lambda_max_sx, lc.lambda_max_sgh]
            row += [lc.kappa_p_sx[p] for p in percents]
            row += [lc.kappa_p_sgh[p] for p in percents]
            row += [lc.lambda_max_f, lc.kappa_f]
            row += [lc.kappa_p_f[p] for p in percents]
            row += [lc.lambda_max_sgw, lc.w_fro, lc.w_spec, lc.g_spec,
                    None if d is None else d.dominated, dying, full,
                    rec.loss, rec.train_error, rec.test_error]
            rows.append([_num(v) for v in row])
    return rows


def emit_report(records: Sequence[ProbeRecord], out_dir, config: ExperimentConfig, final: Optional[dict] = None) -> None:
    """Write trace.csv, summary.json and config_echo.json into ``out_dir``."""
    if not records:
        raise CondlabError("emit_report needs at least one record")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    percents = list(config.probe.kappa_p)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(csv_header(percents))
    writer.writerows(trace_rows(records, percents))
    (out / "trace.csv").write_text(buf.getvalue())
    echo = config.to_dict()
    summary = {"config": echo, "final": _encode(final or {}), "records": [r.to_dict() for r in records]}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    (out / "config_echo.json").write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n")


def load_records(summary_path) -> List[ProbeRecord]:
    with open(summary_path) as fh:
        summary = json.load(fh)
    return [ProbeRecord.from_dict(r) for r in summary["records"]]


# ---------------------------------------------------------------- experiment

def load_datasets(cfg: ExperimentConfig):
    d = cfg.data
    if d.source == "synthetic":
        full = synthetic_gaussian(d.n + d.n_test, d.dim, d.classes, seed=cfg.seed + 2,
                                  class_separation=d.class_separation)
        train = Dataset(full.X[:d.n], full.y[:d.n], full.c, full.meta + ":train")
        test = Dataset(full.X[d.n:], full.y[d.n:], full.c, full.meta + ":test") if d.n_test else None
        return train, test
    root = d.path or default_mnist_dir()
    if root is None:
        raise ConfigError("no MNIST directory found; set data.path or CONDLAB_MNIST_DIR", "data.path")
    return load_mnist(root, d.preprocess, d.standardize, d.n_train)


def build_from_config(cfg: ExperimentConfig, in_dim: int, out_dim: int) -> Network:
    n = cfg.network
    if n.topology == "mlp":
        specs = mlp_specs(in_dim, n.width, n.depth, out_dim, bn=n.bn)
    else:
        specs = residual_mlp_specs(in_dim, n.width, n.blocks, out_dim, n.variant)
    return build_network(specs, last_bn=n.last_bn, init=n.init, seed=cfg.seed, bn_eps=n.bn_eps)


def probe_schedule(cfg: ExperimentConfig, steps_per_epoch: int, total_steps: int) -> List[int]:
    if cfg.probe.schedule is not None:
        return [s for s in cfg.probe.schedule if s <= total_steps]
    steps = set(s for s in EARLY_STEPS if s <= total_steps)
    if steps_per_epoch:
        steps.update(range(steps_per_epoch, total_steps + 1, steps_per_epoch))
    return sorted(steps)


def _targets(ds: Dataset, loss: Loss):
    if loss is Loss.MSE:
        return np.eye(ds.c)[ds.y]
    return ds.y


def _chunks(n: int, size: int):
    """Contiguous slices of at most ``size`` rows; a short tail joins the previous slice."""
    bounds = list(range(0, n, size)) + [n]
    if len(bounds) > 2 and bounds[-1] - bounds[-2] < 2:
        del bounds[-2]
    return [slice(a, b) for a, b in zip(bounds[:-1], bounds[1:])]


def evaluate(net: Network, ds: Dataset, loss: Loss, chunk: int = 10000):
    """Mean loss and error over ``ds`` (BN uses each chunk's batch statistics)."""
    total_loss = 0.0
    wrong = 0.0
    targets = _targets(ds, loss)
    for sl in _chunks(len(ds), chunk):
        out = forward(net, ds.X[sl]).output
        value, _ = loss_and_grad(out, targets[sl], loss)
        m = sl.stop - sl.start
        total_loss += value * m
        wrong += predict_error(out, ds.y[sl]) * m
    return total_loss / len(ds), wrong / len(ds)


def probe_network(net: Network, probe_set: Dataset, cfg: ExperimentConfig, step_index: int,
                  train: Dataset, test: Optional[Dataset] = None) -> ProbeRecord:
    """One ProbeRecord for a snapshot of ``net``; ``net`` itself is not touched."""
    snap = net.copy()
    loss = Loss(cfg.loss)
    p = cfg.probe
    with np.errstate(over="ignore", invalid="ignore"):
        cache = forward(snap, probe_set.X)
        _, g = loss_and_grad(cache.output, _targets(probe_set, loss), loss)
        backward(snap, cache, g)
        layers, doms = [], []
        frozen = set(cfg.optimizer.frozen_layers)
        for k in range(1, snap.depth + 1):
            lc = layer_conditioning(snap, cache, k, p.kappa_p, p.grad_mode)
            layers.append(lc)
            # domination is judged on the update actually applied; a frozen layer applies none
            applied = 0.0 if k in frozen else lc.g_spec
            ratio = applied / max(lc.w_spec, np.finfo(np.float64).tiny)
            doms.append(DominationReport(k, lc.w_spec, applied, ratio, ratio < p.domination_threshold))
        neurons = []
        if p.neurons:
            owners = relu_owners(snap)
            for act in neuron_activity(snap, train.X, sample=p.neuron_sample, seed=cfg.seed):
                act.layer = owners[act.layer - 1]
                neurons.append(act)
        train_loss, train_err = evaluate(snap, train, loss, p.eval_batch)
        test_err = evaluate(snap, test, loss, p.eval_batch)[1] if test is not None and len(test) else None
    return ProbeRecord(step_index, layers, doms, neurons, train_loss, train_err, test_err)


@dataclass
class RunResult:
    records: List[ProbeRecord]
    network: Network
    final: dict


def run_experiment(cfg: ExperimentConfig, out_dir=None) -> RunResult:
    """Train per ``cfg`` and probe on schedule; writes traces when ``out_dir`` is given."""
    train, test = load_datasets(cfg)
    loss = Loss(cfg.loss)
    net = build_from_config(cfg, train.X.shape[1], train.c)
    o = cfg.optimizer
    kind = OptimizerKind(o.kind)
    n = len(train)
    batch = n if kind is OptimizerKind.FULL_GD else o.batch_size
    if batch > n:
        raise ConfigError(f"batch size {batch} exceeds the {n} training examples", "optimizer.batch_size")
    if net.has_batchnorm() and batch < 2:
        raise ConfigError("batch norm needs batches of at least 2", "optimizer.batch_size")
    steps_per_epoch = n // batch
    total = o.steps if o.steps is not None else o.epochs * steps_per_epoch
    schedule = set(probe_schedule(cfg, steps_per_epoch, total)) if cfg.probe.enabled else set()
    probe_set = train.head(min(cfg.probe.probe_batch, n))
    opt = OptimizerState(kind, o.lr, batch, o.beta1, o.beta2, o.eps, frozen=o.frozen_layers)
    targets = _targets(train, loss)
    shuffle = np.random.Generator(np.random.Philox(cfg.seed + 1))

    records: List[ProbeRecord] = []
    epoch_losses: List[float] = []
    running: List[float] = []
    order = np.arange(n)
    diverged_at = None
    skipped: List[int] = []
    for t in range(total + 1):
        if t in schedule:
            try:
                records.append(probe_network(net, probe_set, cfg, t, train, test))
            except InvalidValueError:
                # statistics overflowed; training carries on so probes never alter the run
                skipped.append(t)
        if t == total:
            break
        pos = t % steps_per_epoch
        if pos == 0:
            order = np.arange(n) if kind is OptimizerKind.FULL_GD else shuffle.permutation(n)
        idx = order[pos * batch:(pos + 1) * batch]
        with np.errstate(over="ignore", invalid="ignore"):
            cache = forward(net, train.X[idx])
            value, g = loss_and_grad(cache.output, targets[idx], loss)
            if not math.isfinite(value):
                diverged_at = t
                break
            backward(net, cache, g)
            step(net, cache.param_grads(), opt)
        running.append(value)
        if not all(np.all(np.isfinite(v)) for _, v in net.parameters()):
            diverged_at = t + 1
            break
        if pos == steps_per_epoch - 1:
            epoch_losses.append(float(np.mean(running)))
            running = []

    with np.errstate(over="ignore", invalid="ignore"):
        train_loss, train_err = evaluate(net, train, loss, cfg.probe.eval_batch)
        test_err = evaluate(net, test, loss, cfg.probe.eval_batch)[1] if test is not None and len(test) else None
    final = {
        "steps": total if diverged_at is None else diverged_at,
        "diverged_at_step": diverged_at,
        "train_loss": train_loss,
        "train_error": train_err,
        "test_error": test_err,
        "epoch_losses": epoch_losses,
        "skipped_probes": skipped,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if records:
            emit_report(records, out, cfg, final)
        else:
            echo = cfg.to_dict()
            (out / "summary.json").write_text(
                json.dumps({"config": echo, "final": _encode(final), "records": []}, indent=1, sort_keys=True) + "\n")
            (out / "config_echo.json").write_text(json.dumps(echo, indent=1, sort_keys=True) + "\n")
        save_network(net, out / "checkpoint.npz")
    return RunResult(records, net, final)


def sweep(cfg: ExperimentConfig, lrs: Sequence[float], out_dir=None) -> dict:
    """Run one experiment per learning rate and pick the lowest final training loss."""
    results = []
    for lr in lrs:
        run_cfg = ExperimentConfig.from_dict(cfg.to_dict(), env={})
        run_cfg.optimizer.lr = float(lr)
        sub = None if out_dir is None else Path(out_dir) / f"lr_{lr:g}"
        res = run_experiment(run_cfg, sub)
        results.append({"lr": float(lr), "train_loss": res.final["train_loss"],
                        "train_error": res.final["train_error"],
                        "diverged_at_step": res.final["diverged_at_step"]})
    finite = [r for r in results if r["diverged_at_step"] is None and math.isfinite(r["train_loss"])]
    best = min(finite, key=lambda r: r["train_loss"])["lr"] if finite else None
    summary = {"runs": _encode(results), "best_lr": best}
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "sweep.json").write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    return summary


def probe_checkpoint(checkpoint, data_dir, percents=DEFAULT_PERCENTS, probe_batch: int = 1024,
                     loss: str = "SoftmaxCE") -> ProbeRecord:
    """Probe a saved network on MNIST IDX data; preprocessing follows the input width."""
    net = load_network(checkpoint)
    modes = {144: "Crop12", 784: "Full28"}
    if net.in_dim not in modes:
        raise ConfigError(f"cannot infer MNIST preprocessing for input width {net.in_dim}", "checkpoint")
    cfg = ExperimentConfig(data=DataConfig(path=str(data_dir), preprocess=modes[net.in_dim]),
                           probe=ProbeConfig(kappa_p=list(percents), probe_batch=probe_batch), loss=loss)
    cfg.validate()
    train, test = load_datasets(cfg)
    return probe_network(net, train.head(min(probe_batch, len(train))), cfg, 0, train, test)
