"""Scenario runner: ``fedmeta run | compare | gen-synthetic``.

Configuration files use a flat ``key = value`` grammar grouped in
``[section]`` headers; ``#`` starts a comment.  Lists are comma separated.
Every key has a default, so an empty file is a valid configuration.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data_io import SyntheticSpec, export_synthetic, generate_synthetic, load_manifest_dataset, partition_clients
from .episodes import EpisodeError, EpisodeSpec, LabeledDataset, split_train_test
from .federation import (
    ClientState,
    TrainingConfig,
    encode_checkpoint,
    eval_episodes,
    evaluate_sets,
    initial_meta,
    run_training,
)
from .meta import MetaConfig, NoiseConvention
from .metrics import METRICS, MetricsReport
from .nn import MLP, ModelConfig
from .privacy import CalibrationInputs, PrivacyBudget, calibrate_sigma
from .rng import stream

log = logging.getLogger("fedmeta")

KINDS = ("centralized", "federated", "privacy-sweep", "multi-modal", "multi-disease", "unbalanced")
CSV_COLUMNS = ("scenario", "arm", "round", "client_id", "epsilon", "sigma",
               "loss", "accuracy", "precision", "recall", "f1")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# -- value types -------------------------------------------------------------


def _int(text):
    if not re.fullmatch(r"[+-]?\d+", text):
        raise TypeError("expected an integer")
    return int(text)


def _float(text):
    try:
        v = float(text)
    except ValueError:
        raise TypeError("expected a number") from None
    if math.isnan(v):
        raise TypeError("NaN is not allowed")
    return v


def _bool(text):
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise TypeError("expected true/false")


def _str(text):
    return text


def _list(item):
    def parse(text):
        if not text.strip():
            return ()
        return tuple(item(t.strip()) for t in text.split(","))
    return parse


def _eps_item(text):
    return None if text.lower() in ("none", "w/o", "off") else _float(text)


def _auto_float(text):
    return None if text.lower() == "auto" else _float(text)


def _log_base(text):
    return math.e if text.lower() == "e" else _float(text)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        if value == math.e:
            return "e"
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class _Key:
    section: str
    parse: object
    check: object = None
    doc: str = ""


def _pos(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _unit_open(v):
    return 0 < v < 1


def _choice(*options):
    def check(v):
        return v in options
    check.options = options
    return check


SCHEMA: dict[str, _Key] = {
    # scenario
    "kind": _Key("scenario", _str, _choice(*KINDS)),
    "learner": _Key("scenario", _str, _choice("maml", "metasgd", "metadpsgd")),
    "baseline_learner": _Key("scenario", _str, _choice("maml", "metasgd", "metadpsgd")),
    "rounds": _Key("scenario", _int, _nonneg),
    "local_batches": _Key("scenario", _int, _nonneg),
    "eval_every": _Key("scenario", _int, _nonneg),
    "eval_tasks": _Key("scenario", _int, lambda v: v >= 2),
    "seed": _Key("scenario", _int, _nonneg),
    "workers": _Key("scenario", _int, _pos),
    "checkpoint_every": _Key("scenario", _int, _nonneg),
    "output_dir": _Key("scenario", _str),
    # model
    "hidden_dims": _Key("model", _list(_int), lambda v: len(v) > 0 and min(v) > 0),
    "batchnorm": _Key("model", _bool),
    # episodes
    "n_way": _Key("episodes", _int, lambda v: v >= 2),
    "k_shot": _Key("episodes", _int, _pos),
    "q_query": _Key("episodes", _int, _pos),
    "train_ratio": _Key("episodes", _float, _unit_open),
    # meta
    "beta": _Key("meta", _float, _pos),
    "inner_steps": _Key("meta", _int, _pos),
    "tasks_per_batch": _Key("meta", _int, _pos),
    "clip_bound": _Key("meta", _float, _pos),
    "noise_convention": _Key("meta", _str, _choice("standard", "literal")),
    "alpha_min": _Key("meta", _float, _pos),
    "alpha_max": _Key("meta", _float, _pos),
    "maml_inner_rate": _Key("meta", _float, _nonneg),
    # privacy
    "epsilon": _Key("privacy", _float, _pos),
    "delta": _Key("privacy", _float, _unit_open),
    "c2": _Key("privacy", _float, _pos),
    "sampling_probability": _Key("privacy", _auto_float, lambda v: v is None or 0 < v <= 1),
    "log_base": _Key("privacy", _log_base, lambda v: v > 0 and v != 1),
    "epsilons": _Key("privacy", _list(_eps_item), lambda v: len(v) > 0 and all(e is None or e > 0 for e in v)),
    # federation
    "clients": _Key("federation", _int, _pos),
    "client_counts": _Key("federation", _list(_int), lambda v: len(v) > 0 and min(v) > 0),
    "ratios": _Key("federation", _list(_float), lambda v: all(r > 0 for r in v)),
    "client_assignment": _Key("federation", _str, _choice("partition", "manifest")),
    # data
    "source": _Key("data", _str, _choice("synthetic", "manifest")),
    "manifest": _Key("data", _str),
    "resolution": _Key("data", _int, lambda v: v >= 4),
    "normalization": _Key("data", _str, _choice("per-image", "dataset")),
    "negative_label": _Key("data", _str),
    "num_classes": _Key("data", _int, _pos),
    "examples_per_class": _Key("data", _int, _pos),
    "noise": _Key("data", _float, _nonneg),
    "phase_jitter": _Key("data", _float, _nonneg),
    "amplitude": _Key("data", _float, _pos),
    "modalities": _Key("data", _list(_str), lambda v: len(v) > 0 and all(v)),
    "class_names": _Key("data", _list(_str), lambda v: all(v)),
}


@dataclass(frozen=True)
class ScenarioConfig:
    kind: str = "federated"
    learner: str = "metadpsgd"
    baseline_learner: str = "metasgd"
    rounds: int = 100
    local_batches: int = 10
    eval_every: int = 10
    eval_tasks: int = 100
    seed: int = 0
    workers: int = 1
    checkpoint_every: int = 0
    output_dir: str = "runs"
    hidden_dims: tuple[int, ...] = (256, 128, 64, 64)
    batchnorm: bool = True
    n_way: int = 2
    k_shot: int = 5
    q_query: int = 5
    train_ratio: float = 0.8
    beta: float = 0.05
    inner_steps: int = 1
    tasks_per_batch: int = 32
    clip_bound: float = 10.0
    noise_convention: str = "standard"
    alpha_min: float = 0.005
    alpha_max: float = 0.1
    maml_inner_rate: float = 0.05
    epsilon: float = 1.0
    delta: float = 1e-3
    c2: float = 1.0
    sampling_probability: float | None = None
    log_base: float = math.e
    epsilons: tuple[float | None, ...] = (1.0, 2.0, 4.0, 8.0, 16.0, None)
    clients: int = 4
    client_counts: tuple[int, ...] = (2, 4)
    ratios: tuple[float, ...] = ()
    client_assignment: str = "partition"
    source: str = "synthetic"
    manifest: str = ""
    resolution: int = 16
    normalization: str = "per-image"
    negative_label: str = ""
    num_classes: int = 2
    examples_per_class: int = 100
    noise: float = 1.5
    phase_jitter: float = 0.5
    amplitude: float = 60.0
    modalities: tuple[str, ...] = ("synthetic",)
    class_names: tuple[str, ...] = ()

    # -- derived pieces ------------------------------------------------------

    def model_config(self, input_dim: int, num_classes: int | None = None) -> ModelConfig:
        return ModelConfig(input_dim=input_dim, num_classes=num_classes or self.n_way,
                           hidden_dims=self.hidden_dims, batchnorm_enabled=self.batchnorm)

    def episode_spec(self) -> EpisodeSpec:
        return EpisodeSpec(self.n_way, self.k_shot, self.q_query)

    def meta_config(self, sigma: float = 0.0) -> MetaConfig:
        return MetaConfig(
            beta=self.beta, inner_steps=self.inner_steps, clip_bound=self.clip_bound,
            sigma=sigma, tasks_per_batch=self.tasks_per_batch,
            noise_convention=NoiseConvention(self.noise_convention),
            maml_inner_rate=self.maml_inner_rate,
        )

    def synthetic_spec(self) -> SyntheticSpec:
        data_seed = int(stream(self.seed, "synthetic").integers(2**62))
        return SyntheticSpec(
            num_classes=self.num_classes, examples_per_class=self.examples_per_class,
            resolution=self.resolution, amplitude=self.amplitude, noise=self.noise,
            phase_jitter=self.phase_jitter, modalities=self.modalities,
            class_names=self.class_names, seed=data_seed,
        )


def _validate(cfg: ScenarioConfig, lines: dict[str, int]) -> None:
    def fail(key, msg):
        raise ConfigError(f"{key}: {msg}", lines.get(key))

    if cfg.alpha_min > cfg.alpha_max:
        fail("alpha_max", "must be >= alpha_min")
    if cfg.source == "manifest":
        if not cfg.manifest:
            fail("manifest", "required when source = manifest")
        if not Path(cfg.manifest).is_file():
            fail("manifest", f"file not found: {cfg.manifest}")
    if cfg.source == "synthetic" and cfg.class_names and len(cfg.class_names) != cfg.num_classes:
        fail("class_names", "needs one name per class")
    if cfg.kind == "multi-modal" and cfg.source == "synthetic" and len(cfg.modalities) < 2:
        fail("modalities", "multi-modal scenarios need at least two modalities")
    if cfg.ratios and cfg.kind in ("federated", "privacy-sweep") and len(cfg.ratios) != cfg.clients:
        fail("ratios", "needs one ratio per client")


def parse_config_text(text: str, base_dir: Path | None = None) -> ScenarioConfig:
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        m = re.fullmatch(r"\[\s*([\w-]+)\s*\]", line)
        if m:
            section = m.group(1)
            if section not in {k.section for k in SCHEMA.values()}:
                raise ConfigError(f"unknown section [{section}]", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, _, value = (p.strip() for p in line.partition("="))
        spec = SCHEMA.get(key)
        if spec is None:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if section is None:
            raise ConfigError(f"key {key!r} appears before any [section]", lineno)
        if spec.section != section:
            raise ConfigError(f"key {key!r} belongs in [{spec.section}], not [{section}]", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        try:
            parsed = spec.parse(value)
        except TypeError as exc:
            raise ConfigError(f"{key}: type mismatch, {exc} (got {value!r})", lineno) from None
        if spec.check is not None and not spec.check(parsed):
            options = getattr(spec.check, "options", None)
            hint = f"one of {', '.join(options)}" if options else "out of range"
            raise ConfigError(f"{key}: value {value!r} is {'not ' + hint if options else hint}", lineno)
        if key == "manifest" and parsed and base_dir is not None and not os.path.isabs(parsed):
            parsed = str(base_dir / parsed)
        values[key] = parsed
        lines[key] = lineno
    cfg = ScenarioConfig(**values)
    _validate(cfg, lines)
    return cfg


def parse_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config_text(text, path.parent)


def serialize_config(cfg: ScenarioConfig) -> str:
    out = []
    current = None
    for f in fields(cfg):
        section = SCHEMA[f.name].section
        if section != current:
            out.append(f"{'' if current is None else chr(10)}[{section}]")
            current = section
        value = getattr(cfg, f.name)
        if f.name == "sampling_probability" and value is None:
            out.append(f"{f.name} = auto")
        else:
            out.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(out) + "\n"


# -- scenario construction -----------------------------------------------------


@dataclass
class Arm:
    name: str
    learner: str
    clients: list[LabeledDataset]
    eval_sets: dict[str, LabeledDataset]
    epsilon: float | None = None


def load_dataset(cfg: ScenarioConfig) -> LabeledDataset:
    if cfg.source == "manifest":
        return load_manifest_dataset(cfg.manifest, cfg.resolution, cfg.normalization)
    return generate_synthetic(cfg.synthetic_spec())


def _label_index(ds: LabeledDataset, name: str) -> int | None:
    if not name:
        return None
    for idx, label in ds.label_names.items():
        if label == name:
            return idx
    raise ConfigError(f"negative_label {name!r} is not a class in the data")


def _even_clients(cfg, train, count, key):
    ratios = cfg.ratios if cfg.ratios and len(cfg.ratios) == count else (1.0,) * count
    if count == 1:
        return [train]
    if cfg.client_assignment == "manifest":
        ids = train.tag_values("client")
        if not ids:
            raise ConfigError("client_assignment = manifest but the manifest has no client column")
        return [train.with_tag("client", i) for i in sorted(ids, key=int)]
    return partition_clients(train, ratios, stream(cfg.seed, "partition", key))


def build_arms(cfg: ScenarioConfig, train: LabeledDataset, test: LabeledDataset) -> list[Arm]:
    kind, learner, base = cfg.kind, cfg.learner, cfg.baseline_learner
    dp_eps = cfg.epsilon if learner == "metadpsgd" else None
    everything = {"test": test}
    if kind == "centralized":
        return [Arm(f"C-{learner}", learner, [train], everything, dp_eps)]
    if kind == "federated":
        arms = [Arm(f"C-{learner}", learner, [train], everything, dp_eps)]
        for m in cfg.client_counts:
            arms.append(Arm(f"F-{learner}-{m}", learner, _even_clients(cfg, train, m, m), everything, dp_eps))
        return arms
    if kind == "privacy-sweep":
        clients = _even_clients(cfg, train, cfg.clients, cfg.clients)
        return [
            Arm(f"eps={e:g}", "metadpsgd", clients, everything, e) if e is not None
            else Arm("w/o", "metasgd", clients, everything, None)
            for e in cfg.epsilons
        ]
    if kind == "unbalanced":
        ratios = cfg.ratios or (1.0, 2.0, 3.0, 4.0)
        parts = partition_clients(train, ratios, stream(cfg.seed, "partition", "unbalanced"))
        arms = [Arm(f"client-{i + 1}", base, [p], everything) for i, p in enumerate(parts)]
        arms.append(Arm("federated", learner, parts, everything, dp_eps))
        return arms
    if kind == "multi-modal":
        mods = train.tag_values("modality")
        if len(mods) < 2:
            raise ConfigError("multi-modal scenario needs data from at least two modalities")
        evals = {m: test.with_tag("modality", m) for m in mods}
        arms = [Arm(f"T-{m}", base, [train.with_tag("modality", m)], evals) for m in mods]
        arms.append(Arm("federated", learner, [train.with_tag("modality", m) for m in mods], evals, dp_eps))
        return arms
    if kind == "multi-disease":
        neg = _label_index(train, cfg.negative_label or "normal")
        diseases = [c for c in train.classes() if c != neg]
        if not diseases:
            raise ConfigError("multi-disease scenario needs at least one non-negative class")
        negatives = partition_clients(train.where(lambda y, _: y == neg), [1.0] * len(diseases),
                                      stream(cfg.seed, "partition", "negatives"))
        clients = [LabeledDataset.concat([n, train.where(lambda y, _, d=d: y == d)])
                   for n, d in zip(negatives, diseases)]
        names = [train.label_names.get(d, str(d)) for d in diseases]
        evals = {name: test.where(lambda y, _, d=d: y in (neg, d)) for name, d in zip(names, diseases)}
        arms = [Arm(f"T-{name}", base, [c], evals) for name, c in zip(names, clients)]
        arms.append(Arm("federated-nodp", "metasgd", clients, evals))
        arms.append(Arm("federated", learner, clients, evals, dp_eps))
        return arms
    raise ConfigError(f"unknown scenario kind {kind!r}")


def arm_sigma(cfg: ScenarioConfig, arm: Arm) -> float:
    """Noise multiplier for a private arm; one task counts as one record."""
    if arm.learner != "metadpsgd":
        return 0.0
    s = cfg.sampling_probability
    if s is None:
        per_task = cfg.n_way * (cfg.k_shot + cfg.q_query)
        tasks_per_epoch = max(1, min(len(c) for c in arm.clients) // per_task)
        s = min(1.0, cfg.tasks_per_batch / tasks_per_epoch)
    steps = max(1, cfg.rounds * cfg.local_batches)
    return calibrate_sigma(PrivacyBudget(arm.epsilon, cfg.delta),
                           CalibrationInputs(s, steps, cfg.c2), cfg.log_base)


def training_config(cfg: ScenarioConfig, arm: Arm, sigma: float, negative: int | None) -> TrainingConfig:
    return TrainingConfig(
        learner=arm.learner, episode=cfg.episode_spec(), meta=cfg.meta_config(sigma),
        rounds=cfg.rounds, local_batches=cfg.local_batches, eval_every=cfg.eval_every,
        eval_tasks=cfg.eval_tasks, seed=cfg.seed, workers=cfg.workers,
        alpha_range=(cfg.alpha_min, cfg.alpha_max), negative_label=negative,
    )


def _num(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return repr(float(x))


def run_arm(cfg: ScenarioConfig, arm: Arm, input_dim: int, negative: int | None) -> dict:
    """Train one arm; returns csv rows, the final report and checkpoint blobs."""
    model_cfg = cfg.model_config(input_dim)
    model = MLP(model_cfg)
    sigma = arm_sigma(cfg, arm)
    tcfg = training_config(cfg, arm, sigma, negative)
    clients = [ClientState(i, ds) for i, ds in enumerate(arm.clients)]
    eps = "" if arm.epsilon is None or arm.learner != "metadpsgd" else repr(float(arm.epsilon))
    rows, checkpoints = [], {}

    def on_round(server, report):
        for cid, loss in zip(report.client_ids, report.losses):
            rows.append([cfg.kind, arm.name, report.round_index, cid, eps, _num(sigma), _num(loss), "", "", "", ""])
        for name, rep in report.evals.items():
            rows.append([cfg.kind, arm.name, report.round_index, f"eval:{name}", eps, _num(sigma), ""]
                        + [_num(rep[m].mean) for m in METRICS])
        if cfg.checkpoint_every and report.round_index % cfg.checkpoint_every == 0:
            checkpoints[f"round_{report.round_index:04d}.ckpt"] = encode_checkpoint(
                server.global_meta, model_cfg.digest(), report.round_index)

    init = initial_meta(model, tcfg)
    history, server = run_training(model, clients, tcfg, arm.eval_sets, init=init, on_round=on_round)
    checkpoints["final.ckpt"] = encode_checkpoint(server.global_meta, model_cfg.digest(), server.round_index)
    evals = history[-1].evals if history else {}
    if not history:
        sets = {n: eval_episodes(ds, tcfg, n) for n, ds in arm.eval_sets.items()}
        evals = evaluate_sets(model, server.global_meta, sets, tcfg)
    entries = [
        {"arm": arm.name, "eval_set": name, "learner": arm.learner, "clients": len(arm.clients),
         "epsilon": arm.epsilon if arm.learner == "metadpsgd" else None, "sigma": sigma,
         "report": rep.to_dict()}
        for name, rep in evals.items()
    ]
    return {"rows": rows, "entries": entries, "checkpoints": checkpoints}


def _run_arm_job(args):
    return run_arm(*args)


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def _safe(name: str) -> str:
    return re.sub(r"[^\w.=-]+", "_", name)


def run_scenario(cfg: ScenarioConfig, out_dir=None, jobs: int = 1) -> Path:
    """Run every arm of the scenario and write its artifacts; returns the output dir."""
    out = Path(out_dir or cfg.output_dir)
    data = load_dataset(cfg)
    train, test = split_train_test(data, cfg.train_ratio, stream(cfg.seed, "split"))
    negative = _label_index(data, cfg.negative_label)
    arms = build_arms(cfg, train, test)
    log.info("scenario %s: %d arms, input_dim %d", cfg.kind, len(arms), data.input_dim)
    jobs_args = [(cfg, arm, data.input_dim, negative) for arm in arms]
    if jobs > 1 and len(arms) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_arm_job, jobs_args))
    else:
        results = [_run_arm_job(a) for a in jobs_args]

    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for res in results:
        writer.writerows(res["rows"])
    _atomic_write(out / "rounds.csv", buf.getvalue().encode())
    report = {
        "scenario": cfg.kind,
        "seed": cfg.seed,
        "arms": [e for res in results for e in res["entries"]],
    }
    _atomic_write(out / "final_report.json", (json.dumps(report, indent=2, sort_keys=True) + "\n").encode())
    for arm, res in zip(arms, results):
        for name, blob in res["checkpoints"].items():
            _atomic_write(out / "checkpoints" / _safe(arm.name) / name, blob)
    manifest = {"seed": cfg.seed, "config": serialize_config(cfg),
                "arms": [a.name for a in arms], "input_dim": data.input_dim}
    _atomic_write(out / "run_manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    _atomic_write(out / "resolved.cfg", serialize_config(cfg).encode())
    return out


# -- comparison ------------------------------------------------------------


def _natural(s: str):
    return [(0, float(t), "") if re.fullmatch(r"\d+(\.\d+)?", t) else (1, 0.0, t)
            for t in re.split(r"(\d+(?:\.\d+)?)", s) if t]


def compare_arms(reports: list[dict]) -> list[list[str]]:
    """Rows of [scenario, arm, eval set, accuracy, precision, recall, f1]."""
    if not reports:
        raise ValueError("need at least one report")
    rows = []
    for rep in reports:
        for entry in rep["arms"]:
            metrics = MetricsReport.from_dict(entry["report"])
            rows.append([rep.get("scenario", ""), entry["arm"], entry.get("eval_set", "")]
                        + [metrics[m].format(3) if m in metrics.summaries else "undefined" for m in METRICS])
    rows.sort(key=lambda r: (_natural(r[0]), _natural(r[1]), _natural(r[2]), r[3:]))
    return rows


def format_table(rows: list[list[str]]) -> str:
    header = ["scenario", "arm", "eval", "accuracy", "precision", "recall", "f1"]
    table = [header] + rows
    widths = [max(len(r[i]) for r in table) for i in range(len(header))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in table) + "\n"


# -- entry point ---------------------------------------------------------------


def _cmd_run(args) -> int:
    cfg = parse_config(args.config)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = replace(cfg, seed=args.seed)
    out = run_scenario(cfg, args.out, jobs=args.jobs)
    print(format_table(compare_arms([json.loads((out / "final_report.json").read_text())])), end="")
    return EXIT_OK


def _cmd_compare(args) -> int:
    reports = [json.loads(Path(p).read_text(encoding="utf-8")) for p in args.reports]
    print(format_table(compare_arms(reports)), end="")
    return EXIT_OK


def _cmd_gen(args) -> int:
    cfg = parse_config(args.spec)
    entries = export_synthetic(cfg.synthetic_spec(), args.out_manifest)
    print(f"wrote {len(entries)} images and {args.out_manifest}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fedmeta", description="Federated few-shot meta-learning simulator")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run a scenario configuration")
    run.add_argument("config")
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--jobs", type=int, default=1, help="arms trained in parallel processes")
    run.set_defaults(func=_cmd_run)
    cmp_ = sub.add_parser("compare", help="tabulate final_report.json files")
    cmp_.add_argument("reports", nargs="+")
    cmp_.set_defaults(func=_cmd_compare)
    gen = sub.add_parser("gen-synthetic", help="write synthetic PGM images and a manifest")
    gen.add_argument("spec")
    gen.add_argument("out_manifest")
    gen.set_defaults(func=_cmd_gen)
    return p


def main(argv=None) -> int:
    level = os.environ.get("FEDMETA_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EpisodeError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
