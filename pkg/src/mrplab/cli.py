"""Command-line pipeline: ``gen``, ``pretrain``, ``unlearn``, ``attack`` and ``eval``.

Every command reads one JSON run configuration (schema in README.md) and writes
its outputs below the ``out`` directory. Outputs are deterministic functions of
the configuration, so re-running a command rewrites identical bytes.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from .baselines import AttackConfig, GaConfig, ga_unlearn, relearn_attack, write_trace_csv
from .errors import ConfigError, MrpLabError
from .evalkit import (
    REPORT_FORMAT_VERSION,
    build_report,
    gradient_conflict_report,
    qa_accuracy,
    read_csv_rows,
    write_conflict_csv,
)
from .mrp import HookState, MrpConfig, continual_unlearn, trainable_param_count, unlearn_task
from .nanomodel.checkpoint import load_checkpoint, save_checkpoint
from .nanomodel.model import BaseModel, ModelConfig
from .nanomodel.train import PretrainConfig, pretrain
from .seeding import stream
from .taskgen import generate_corpus, read_jsonl, related_attack_split, write_jsonl

log = logging.getLogger("mrplab")

COMMANDS = ("gen", "pretrain", "unlearn", "attack", "eval")
METHODS = ("mrp", "ga")


@dataclass(frozen=True)
class CorpusSection:
    topics: int = 6
    entities_per_topic: int = 24
    facts_per_entity: int = 1
    attributes_per_topic: int | None = None
    examples_per_split: dict | int | None = None
    unlearn_topics: tuple[int, ...] = (0, 1, 2, 3)
    retain_topics: tuple[int, ...] = (4, 5)
    attack_fraction: float = 0.25


@dataclass(frozen=True)
class AttackSection:
    epochs: int = 5
    lr: float = 2e-4
    batch: int = 5
    stage: int = 1  # which unlearning stage's checkpoint is attacked


@dataclass(frozen=True)
class PathsSection:
    corpus: str = "corpus.jsonl"
    checkpoints: str = "checkpoints"
    reports: str = "reports"
    logs: str = "logs"
    traces: str = "traces"


# section name -> (dataclass, keys not accepted from the file)
SECTIONS = {
    "model": (ModelConfig, ()),
    "corpus": (CorpusSection, ()),
    "pretrain": (PretrainConfig, ("seed",)),
    "mrp": (MrpConfig, ("seed",)),
    "ga": (GaConfig, ("seed",)),
    "attack": (AttackSection, ()),
    "paths": (PathsSection, ()),
}
TOP_LEVEL = ("seed", "method", "order", "out", "checkpoint", "score_all", *SECTIONS)
# keys that locate files rather than change results; excluded from the config hash
UNHASHED = ("out", "paths", "checkpoint")



@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    method: str = "mrp"
    order: tuple[int, ...] | str | None = None
    out: Path = Path("mrplab-run")
    checkpoint: str | None = None
    score_all: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    mrp: MrpConfig = field(default_factory=MrpConfig)
    ga: GaConfig = field(default_factory=GaConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def resolved(self) -> dict:
        """Every result-affecting setting, defaults filled in."""
        out = {"seed": self.seed, "method": self.method, "order": self.order, "score_all": self.score_all}
        for name in SECTIONS:
            if name not in UNHASHED:
                out[name] = dataclasses.asdict(getattr(self, name))
        return out

    @property
    def config_hash(self) -> str:
        text = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]

    @property
    def meta(self) -> dict:
        return {"seed": self.seed, "config_hash": self.config_hash, "format_version": REPORT_FORMAT_VERSION}

    def path(self, section: str, *parts: str) -> Path:
        return self.out.joinpath(getattr(self.paths, section), *parts)


# ------------------------------------------------------------------ config parsing


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def _check_type(path: str, value, annotation: str):
    """Validate ``value`` against a dataclass annotation string and normalize it."""
    kinds = [k.strip() for k in annotation.split("|")]
    if value is None:
        if "None" in kinds:
            return None
        raise ConfigError(f"{path}: must not be null")
    for kind in kinds:
        if kind == "bool" and isinstance(value, bool):
            return value
        if kind == "int" and _is_int(value):
            return value
        if kind == "float" and (_is_int(value) or isinstance(value, float)):
            return float(value)
        if kind == "str" and isinstance(value, str):
            return value
        if kind.startswith("tuple") and isinstance(value, list) and all(_is_int(v) for v in value):
            return tuple(value)
        if kind.startswith("dict") and isinstance(value, dict):
            return value
    raise ConfigError(f"{path}: expected {annotation}, got {json.dumps(value)}")


def _section(name: str, value, seed: int, n_blocks: int):
    cls, forbidden = SECTIONS[name]
    if not isinstance(value, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, v in value.items():
        if key not in fields or key in forbidden:
            hint = " (use the top-level seed)" if key == "seed" else ""
            raise ConfigError(f"{name}.{key}: unknown key{hint}")
        if name == "mrp" and key == "hooked_layers" and v == "random":
            v = sorted(int(i) for i in stream(seed, "hooked-layers").choice(n_blocks, 2, replace=False))
        kwargs[key] = _check_type(f"{name}.{key}", v, str(fields[key].type))
    if "seed" in fields:
        kwargs["seed"] = seed
    try:
        return cls(**kwargs)
    except (MrpLabError, ValueError, TypeError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def parse_run_config(raw: dict, seed: int | None = None, out: str | Path | None = None,
                     base_dir: Path | None = None) -> RunConfig:
    """Validate a decoded JSON configuration; errors name the offending key path."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>: expected a JSON object")
    raw = json.loads(json.dumps(raw))
    for key in raw:
        if key not in TOP_LEVEL:
            raise ConfigError(f"{key}: unknown key")
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["out"] = str(out)
    s = raw.get("seed", 0)
    if not _is_int(s) or s < 0:
        raise ConfigError(f"seed: expected a non-negative integer, got {json.dumps(s)}")
    method = raw.get("method", "mrp")
    if method not in METHODS:
        raise ConfigError(f"method: expected one of {list(METHODS)}, got {json.dumps(method)}")
    order = raw.get("order")
    if order is not None and order != "random":
        if not isinstance(order, list) or not all(_is_int(i) for i in order):
            raise ConfigError('order: expected a list of topic positions, "random" or null')
        order = tuple(order)
    out_dir = raw.get("out", "mrplab-run")
    if not isinstance(out_dir, str):
        raise ConfigError("out: expected a path string")
    out_path = Path(out_dir)
    if not out_path.is_absolute() and base_dir is not None and "out" in raw and out is None:
        out_path = base_dir / out_path
    checkpoint = raw.get("checkpoint")
    if checkpoint is not None and not isinstance(checkpoint, str):
        raise ConfigError("checkpoint: expected a path string")
    score_all = raw.get("score_all", False)
    if not isinstance(score_all, bool):
        raise ConfigError("score_all: expected true or false")

    model = _section("model", raw.get("model", {}), s, 0)
    sections = {name: _section(name, raw.get(name, {}), s, model.n_blocks)
                for name in SECTIONS if name != "model"}
    corpus = sections["corpus"]
    for key in ("unlearn_topics", "retain_topics"):
        idx = getattr(corpus, key)
        if not idx or any(not 0 <= i < corpus.topics for i in idx) or len(set(idx)) != len(idx):
            raise ConfigError(f"corpus.{key}: positions must be distinct and within [0, {corpus.topics})")
    if set(corpus.unlearn_topics) & set(corpus.retain_topics):
        raise ConfigError("corpus.retain_topics: overlaps corpus.unlearn_topics")
    if isinstance(order, tuple) and sorted(order) != list(range(len(corpus.unlearn_topics))):
        raise ConfigError(f"order: must be a permutation of 0..{len(corpus.unlearn_topics) - 1}")
    bad = [h for h in sections["mrp"].hooked_layers if not 0 <= h < model.n_blocks]
    if bad:
        raise ConfigError(f"mrp.hooked_layers: blocks {bad} outside [0, {model.n_blocks})")
    if not 1 <= sections["attack"].stage <= len(corpus.unlearn_topics):
        raise ConfigError("attack.stage: outside the range of unlearning stages")
    return RunConfig(seed=s, method=method, order=order, out=out_path, checkpoint=checkpoint,
                     score_all=score_all, model=model, **sections)


def load_run_config(path, seed: int | None = None, out: str | Path | None = None) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: invalid JSON at line {exc.lineno} ({exc.msg})") from None
    return parse_run_config(raw, seed=seed, out=out, base_dir=path.parent)


# ------------------------------------------------------------------ shared data plumbing


@dataclass
class Workspace:
    """Corpus-derived datasets shared by the commands."""

    unlearn: list  # (topic, unlearn-partition TopicCorpus, attack-partition TopicCorpus)
    retain: list  # TopicCorpus
    test_sets: dict

    @property
    def retain_train(self) -> list:
        return [e for c in self.retain for e in c.split("train")]

    @property
    def retain_names(self) -> list[str]:
        return [c.topic for c in self.retain]


def corpus_kwargs(cfg: RunConfig) -> dict:
    c = cfg.corpus
    return dict(topics=c.topics, entities_per_topic=c.entities_per_topic, facts_per_entity=c.facts_per_entity,
                examples_per_split=c.examples_per_split, attributes_per_topic=c.attributes_per_topic,
                vocab=cfg.model.vocab)


def load_corpus(cfg: RunConfig) -> list:
    path = cfg.out / cfg.paths.corpus
    if not path.exists():
        raise ConfigError(f"paths.corpus: {path} does not exist (run `mrplab gen` first)")
    meta_path = path.with_suffix(".meta.json")
    meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
    if meta.get("seed") != cfg.seed or meta.get("generator") != json.loads(json.dumps(corpus_kwargs(cfg))):
        raise ConfigError(f"paths.corpus: {path} was generated with another seed or corpus section; rerun `mrplab gen`")
    return read_jsonl(path)


def workspace(cfg: RunConfig, corpus) -> Workspace:
    unlearn = []
    for i in cfg.corpus.unlearn_topics:
        unl, att = related_attack_split(corpus[i], cfg.corpus.attack_fraction, seed=cfg.seed)
        unlearn.append((corpus[i].topic, unl, att))
    retain = [corpus[i] for i in cfg.corpus.retain_topics]
    tests = {name: unl.split("test") for name, unl, _ in unlearn}
    tests.update({c.topic: c.split("test") for c in retain})
    return Workspace(unlearn, retain, tests)


def resolve_order(cfg: RunConfig) -> list[int]:
    n = len(cfg.corpus.unlearn_topics)
    if cfg.order == "random":
        return [int(i) for i in stream(cfg.seed, "unlearn-order").permutation(n)]
    return list(cfg.order) if cfg.order is not None else list(range(n))


def _check_meta(cfg: RunConfig, where, meta: dict):
    if meta.get("seed") != cfg.seed:
        raise ConfigError(f"{where}: produced with seed {meta.get('seed')}, config has seed {cfg.seed}")


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _pretrained(cfg: RunConfig):
    path = cfg.path("checkpoints", "pretrained.ckpt")
    if not path.exists():
        raise ConfigError(f"paths.checkpoints: {path} does not exist (run `mrplab pretrain` first)")
    model, meta = load_checkpoint(path)
    _check_meta(cfg, path, meta)
    return model.base, meta


# ------------------------------------------------------------------ commands


def cmd_gen(cfg: RunConfig) -> list[Path]:
    corpus = generate_corpus(cfg.seed, **corpus_kwargs(cfg))
    path = cfg.out / cfg.paths.corpus
    path.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(path, corpus)
    meta_path = path.with_suffix(".meta.json")
    _write_json(meta_path, {**cfg.meta, "topics": [c.topic for c in corpus], "generator": corpus_kwargs(cfg)})
    log.info("wrote %d topics to %s", len(corpus), path)
    return [path, meta_path]


def cmd_pretrain(cfg: RunConfig) -> list[Path]:
    corpus = load_corpus(cfg)
    ws = workspace(cfg, corpus)
    model = BaseModel.init(cfg.model, seed=cfg.seed)
    model = pretrain(model, corpus, cfg.pretrain,
                     on_epoch=lambda e, loss, accs: log.info("epoch %d loss %.4f min train acc %.3f",
                                                             e, loss, min(accs.values())))
    acc_up = {name: qa_accuracy(model, ex) for name, ex in ws.test_sets.items()}
    path = cfg.path("checkpoints", "pretrained.ckpt")
    path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(path, model, {**cfg.meta, "stage": 0, "method": "pretrained", "unlearned": [],
                                  "acc_up": acc_up})
    log.info("pretrained test accuracy %s", {k: round(v, 3) for k, v in acc_up.items()})
    return [path]


def _stage_outputs(cfg: RunConfig, ws: Workspace, acc_up: dict, stage: int, model, unlearned: list,
                   params: int, steps: list, tag: str) -> list[Path]:
    meta = {**cfg.meta, "stage": stage, "method": cfg.method, "unlearned": unlearned}
    ckpt = cfg.path("checkpoints", f"{tag}.ckpt")
    save_checkpoint(ckpt, model, meta)
    report = build_report(model, ws.test_sets, acc_up, unlearned, ws.retain_names, stage=stage,
                          method=cfg.method, seed=cfg.seed, config_hash=cfg.config_hash, trainable_params=params)
    rpath = cfg.path("reports", f"{tag}.json")
    report.write(rpath)
    lpath = cfg.path("logs", f"{tag}.steps.jsonl")
    with open(lpath, "w") as fh:
        fh.write(json.dumps(cfg.meta, sort_keys=True) + "\n")
        for row in steps:
            fh.write(json.dumps({k: (round(v, 10) if isinstance(v, float) else v) for k, v in row.items()},
                                sort_keys=True) + "\n")
    log.info("stage %d (%s): final score %s", stage, unlearned[-1] if unlearned else "-", report.final_score)
    return [ckpt, rpath, lpath]


def cmd_unlearn(cfg: RunConfig) -> list[Path]:
    base, pre_meta = _pretrained(cfg)
    acc_up = pre_meta["acc_up"]
    ws = workspace(cfg, load_corpus(cfg))
    for section in ("checkpoints", "reports", "logs", "traces"):
        cfg.path(section).mkdir(parents=True, exist_ok=True)
    order = resolve_order(cfg)
    requests = [(name, unl.split("train"), ws.retain_train) for name, unl, _ in ws.unlearn]
    written: list[Path] = []
    unlearned: list[str] = []
    stage1_model = None
    if cfg.method == "mrp":
        def on_stage(res):
            nonlocal stage1_model
            unlearned.append(res.request)
            stage1_model = stage1_model or res.model
            written.extend(_stage_outputs(cfg, ws, acc_up, res.stage, res.model, list(unlearned),
                                          trainable_param_count(res.state), res.step_log,
                                          f"mrp_stage{res.stage}"))

        continual_unlearn(base, requests, cfg.mrp, order=order, on_stage=on_stage)
    else:
        model = base
        for stage, idx in enumerate(order, start=1):
            name, d_unl, d_ret = requests[idx]
            steps: list = []
            model = ga_unlearn(model, d_unl, d_ret, cfg.ga, tag=f"{stage}-{name}", step_log=steps)
            unlearned.append(name)
            stage1_model = stage1_model or model
            written.extend(_stage_outputs(cfg, ws, acc_up, stage, model, list(unlearned), model.num_params(),
                                          steps, f"ga_stage{stage}"))

    # gradient conflict between the first two requests, measured after stage 1
    if len(order) >= 2:
        first, second = (requests[i][1] for i in order[:2])
        rows = gradient_conflict_report(stage1_model, first, second)
        cpath = cfg.path("traces", f"{cfg.method}_conflict.csv")
        write_conflict_csv(cpath, rows, cfg.meta)
        written.append(cpath)
    if cfg.score_all:
        written.extend(_score_all(cfg, ws, base, acc_up, requests))
    return written


def _score_all(cfg: RunConfig, ws: Workspace, base: BaseModel, acc_up: dict, requests) -> list[Path]:
    """Single request over the concatenated unlearn sets."""
    d_all = [e for _, d_unl, _ in requests for e in d_unl]
    names = [name for name, _, _ in requests]
    if cfg.method == "mrp":
        state = unlearn_task(base, HookState.empty(cfg.mrp.hooked_layers, base.config.d_model), d_all,
                             ws.retain_train, cfg.mrp, tag="all")
        model, params = state.hooked(base), trainable_param_count(state)
    else:
        model = ga_unlearn(base, d_all, ws.retain_train, cfg.ga, tag="all")
        params = model.num_params()
    report = build_report(model, ws.test_sets, acc_up, names, ws.retain_names, stage=len(names),
                          method=cfg.method, seed=cfg.seed, config_hash=cfg.config_hash, trainable_params=params)
    report.score_all = report.final_score
    path = cfg.path("reports", f"{cfg.method}_all.json")
    report.write(path)
    return [path]


def _resolve_checkpoint(cfg: RunConfig, default: Path) -> Path:
    if cfg.checkpoint is None:
        path = default
    else:
        path = Path(cfg.checkpoint)
        if not path.is_absolute() and not path.exists():
            path = cfg.out / path
    if not path.exists():
        raise ConfigError(f"checkpoint: {path} does not exist")
    return path


def cmd_attack(cfg: RunConfig) -> list[Path]:
    stage = cfg.attack.stage
    path = _resolve_checkpoint(cfg, cfg.path("checkpoints", f"{cfg.method}_stage{stage}.ckpt"))
    model, meta = load_checkpoint(path)
    _check_meta(cfg, path, meta)
    if not meta.get("unlearned"):
        raise ConfigError(f"checkpoint: {path} has no unlearned topic to attack")
    ws = workspace(cfg, load_corpus(cfg))
    target = meta["unlearned"][0]
    attack_set = next(att for name, _, att in ws.unlearn if name == target).examples
    evals = {"unlearn_test_acc": ws.test_sets[target]}
    for i, name in enumerate(ws.retain_names[:2], start=1):
        evals[f"retain{i}_acc"] = ws.test_sets[name]
    attacked, trace = relearn_attack(model, attack_set, evals,
                                     AttackConfig(cfg.attack.epochs, cfg.attack.lr, cfg.attack.batch, cfg.seed))
    cfg.path("traces").mkdir(parents=True, exist_ok=True)
    tag = f"{meta.get('method', cfg.method)}_attack"
    tpath = cfg.path("traces", f"{tag}.csv")
    write_trace_csv(tpath, trace, columns=tuple(evals), meta=cfg.meta)
    cpath = cfg.path("checkpoints", f"{tag}.ckpt")
    save_checkpoint(cpath, attacked, {**meta, "attacked": target, "attack_epochs": cfg.attack.epochs})
    log.info("attack on %s: %s", target, [round(r["unlearn_test_acc"], 3) for r in trace])
    return [cpath, tpath]


def cmd_eval(cfg: RunConfig) -> list[Path]:
    path = _resolve_checkpoint(cfg, cfg.path("checkpoints", "pretrained.ckpt"))
    model, meta = load_checkpoint(path)
    _check_meta(cfg, path, meta)
    _, pre_meta = _pretrained(cfg)
    ws = workspace(cfg, load_corpus(cfg))
    params = trainable_param_count(model) if model.hooks else (
        0 if meta.get("method") == "pretrained" else model.base.num_params())
    report = build_report(model, ws.test_sets, pre_meta["acc_up"], meta.get("unlearned", []), ws.retain_names,
                          stage=int(meta.get("stage", 0)), method=meta.get("method", cfg.method), seed=cfg.seed,
                          config_hash=cfg.config_hash, trainable_params=params)
    cfg.path("reports").mkdir(parents=True, exist_ok=True)
    out = cfg.path("reports", f"eval_{path.stem}.json")
    report.write(out)
    return [out]


# ------------------------------------------------------------------ validation and entry point


def validate_outputs(paths) -> None:
    """Re-read every written file; raises if any is missing or unreadable."""
    for p in paths:
        p = Path(p)
        if not p.exists():
            raise MrpLabError(f"declared output {p} was not written")
        if p.suffix == ".ckpt":
            load_checkpoint(p)
        elif p.suffix == ".json":
            json.loads(p.read_text())
        elif p.name.endswith(".jsonl") and p.name != "corpus.jsonl":
            for line in p.read_text().splitlines():
                json.loads(line)
        elif p.suffix == ".jsonl":
            read_jsonl(p)
        elif p.suffix == ".csv":
            read_csv_rows(p)


RUNNERS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "unlearn": cmd_unlearn, "attack": cmd_attack,
           "eval": cmd_eval}


def run(command: str, cfg: RunConfig) -> list[Path]:
    cfg.out.mkdir(parents=True, exist_ok=True)
    written = RUNNERS[command](cfg)
    validate_outputs(written)
    return written


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mrplab", description="Continual unlearning pipeline on a small numpy transformer.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON run configuration")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--method", choices=METHODS, help="unlearning method (overrides the config)")
    p.add_argument("--checkpoint", help="checkpoint for attack/eval (overrides the config)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_run_config(args.config, seed=args.seed, out=args.out)
        if args.checkpoint is not None:
            cfg = dataclasses.replace(cfg, checkpoint=args.checkpoint)
        if args.method is not None:
            cfg = dataclasses.replace(cfg, method=args.method)
        for path in run(args.command, cfg):
            print(path)
    except ConfigError as exc:
        print(f"mrplab: config error: {exc}", file=sys.stderr)
        return 2
    except MrpLabError as exc:
        print(f"mrplab: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
