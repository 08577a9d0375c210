"""Command-line entry point: ``compgrpo gen-data | train | eval | pipeline``.

Every run writes into one output directory::

    OUT/config.json        effective configuration
    OUT/checkpoints/       policy checkpoints
    OUT/traces/            per-epoch / per-step CSV traces, rollout dumps
    OUT/reports/           evaluation CSVs, prediction dumps, report.json

Configuration comes from an optional JSON file (``--config``) overlaid with
``--set section.key=value`` and the dedicated flags.  Unknown keys are errors.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Sequence

from . import __version__
from .abstraction import DescriptorError, FormalismDescriptor, SkeletonError, descriptor_for, load_descriptor
from .corpus import CorpusError, Dataset, MiniScanConfig, generate_mini_scan, load_tsv, save_tsv, validate_split
from .evaluation import (
    build_trigram_table,
    copying_score,
    evaluate,
    fmt,
    incorrect_pairs,
    length_bucket_report,
    pass_at_k_from_samples,
    read_prediction_dump,
    sample_candidates,
    write_csv,
    write_prediction_dump,
)
from .grpo import TRACE_FIELDS, GrpoConfig, train_grpo
from .policy import (
    ArchConfig,
    PolicyError,
    PolicyParams,
    Vocab,
    greedy_decode,
    init_policy,
    load_checkpoint,
    save_checkpoint,
)
from .reward import RewardMode, RewardWeights
from .sft import SftConfig, train_sft

log = logging.getLogger("compgrpo")


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataSection:
    formalism: str = "SCAN"
    train: str = ""  # TSV paths; empty means "generate mini-SCAN"
    test: str = ""
    max_depth: int = 2
    split: str = "length"  # or "template"
    threshold: int = 7
    template: str = ""
    seed: int = 0


@dataclass
class ArchSection:
    embedding_dim: int = 16
    hidden_dim: int = 128
    context_window: int = 5
    max_output_len: int = 12
    max_source_len: int = 0  # 0: longest source in the data
    source_encoding: str = "concat"
    seed: int = 0


@dataclass
class SftSection:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.5
    seed: int = 0


@dataclass
class GrpoSection:
    group_size: int = 8
    temperature: float = 0.6
    batch_inputs: int = 16
    learning_rate: float = 0.02
    clip_epsilon: float = 0.2
    kl_beta: float = 0.01
    inner_epochs: int = 1
    std_floor: float = 1e-8
    reward: str = "binary"
    lambda1: float = 0.1
    lambda2: float = 0.2
    include_binary_term: bool = True
    steps: int = 1500
    seed: int = 0
    dump_rollouts: bool = False


@dataclass
class EvalSection:
    pass_k: list[int] = field(default_factory=list)
    temperature: float = 0.6
    seed: int = 0
    length_buckets: bool = False
    trigram_compare: list[str] = field(default_factory=list)  # two prediction dumps
    predictions: str = ""  # evaluate an external dump instead of a checkpoint


@dataclass
class RunConfig:
    out: str = "runs/default"
    mode: str = "sft"
    checkpoint: str = ""
    formalism_descriptor: str = ""
    data: DataSection = field(default_factory=DataSection)
    arch: ArchSection = field(default_factory=ArchSection)
    sft: SftSection = field(default_factory=SftSection)
    grpo: GrpoSection = field(default_factory=GrpoSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"


def _coerce(value: Any, default: Any, key: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return list(value)
    raise ConfigError(f"{key}: unsupported value {value!r}")


def merge(obj, updates: dict, prefix: str = ""):
    """A copy of dataclass ``obj`` with ``updates`` applied; unknown keys raise."""
    if not isinstance(updates, dict):
        raise ConfigError(f"{prefix or 'config'}: expected an object")
    known = {f.name: f for f in fields(obj)}
    changes = {}
    for key, value in updates.items():
        name = f"{prefix}{key}"
        if key not in known:
            raise ConfigError(f"unknown config key {name!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            changes[key] = merge(current, value, f"{name}.")
        else:
            changes[key] = _coerce(value, current, name)
    return replace(obj, **changes)


def parse_assignment(text: str) -> dict:
    """``a.b=1`` -> ``{"a": {"b": 1}}``; the value is JSON if it parses, else a string."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
    node[parts[-1]] = value
    return out


def load_config(path: str | None) -> RunConfig:
    config = RunConfig()
    if path:
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        config = merge(config, data)
    return config


def _flag_updates(args: argparse.Namespace) -> list[dict]:
    updates: list[dict] = []
    simple = {
        "out": ("out",),
        "mode": ("mode",),
        "checkpoint": ("checkpoint",),
        "formalism_descriptor": ("formalism_descriptor",),
        "train": ("data", "train"),
        "test": ("data", "test"),
        "formalism": ("data", "formalism"),
        "max_depth": ("data", "max_depth"),
        "threshold": ("data", "threshold"),
        "template": ("data", "template"),
        "reward": ("grpo", "reward"),
        "steps": ("grpo", "steps"),
        "epochs": ("sft", "epochs"),
        "predictions": ("eval", "predictions"),
    }
    for attr, path in simple.items():
        value = getattr(args, attr, None)
        if value is None:
            continue
        node: dict = {}
        updates.append(node)
        for part in path[:-1]:
            node = node.setdefault(part, {})
        node[path[-1]] = value
    if getattr(args, "template", None) is not None:
        updates.append({"data": {"split": "template"}})
    if getattr(args, "pass_k", None) is not None:
        updates.append({"eval": {"pass_k": _parse_ks(args.pass_k)}})
    if getattr(args, "length_buckets", False):
        updates.append({"eval": {"length_buckets": True}})
    if getattr(args, "trigram_compare", None) is not None:
        updates.append({"eval": {"trigram_compare": list(args.trigram_compare)}})
    if getattr(args, "seed", None) is not None:
        s = args.seed
        updates.append({section: {"seed": s} for section in ("data", "arch", "sft", "grpo", "eval")})
    return updates


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(k) for k in text.split(",") if k.strip()]
    except ValueError:
        raise ConfigError(f"--pass-k expects a comma-separated list of integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise ConfigError("--pass-k values must be positive integers")
    return ks


def resolve_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config)
    for assignment in args.set or []:
        config = merge(config, parse_assignment(assignment))
    for update in _flag_updates(args):
        config = merge(config, update)
    if config.mode not in ("sft", "grpo"):
        raise ConfigError(f"mode must be sft or grpo, got {config.mode!r}")
    choices = [m.value for m in RewardMode]
    if config.grpo.reward not in choices:
        raise ConfigError(f"unknown reward {config.grpo.reward!r} (choose from {', '.join(choices)})")
    return config


def mini_scan_config(section: DataSection) -> MiniScanConfig:
    if section.split == "length":
        rule = ("length", section.threshold)
    elif section.split == "template":
        rule = ("template", section.template)
    else:
        raise ConfigError(f"data.split must be length or template, got {section.split!r}")
    return MiniScanConfig(section.max_depth, rule, section.seed)


def grpo_config(section: GrpoSection, max_output_len: int | None) -> GrpoConfig:
    return GrpoConfig(
        group_size=section.group_size,
        temperature=section.temperature,
        batch_inputs=section.batch_inputs,
        learning_rate=section.learning_rate,
        clip_epsilon=section.clip_epsilon,
        kl_beta=section.kl_beta,
        inner_epochs=section.inner_epochs,
        std_floor=section.std_floor,
        reward_mode=RewardMode(section.reward),
        weights=RewardWeights(section.lambda1, section.lambda2, section.include_binary_term),
        steps=section.steps,
        seed=section.seed,
        max_output_len=max_output_len,
    )


# ---------------------------------------------------------------------------
# helpers


def _prepare_out(config: RunConfig) -> Path:
    out = Path(config.out)
    for sub in ("checkpoints", "traces", "reports"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(config.to_json(), encoding="utf-8")
    return out


def _descriptor(config: RunConfig) -> FormalismDescriptor:
    if config.formalism_descriptor:
        return load_descriptor(config.formalism_descriptor)
    return descriptor_for(config.data.formalism.upper())


def _datasets(config: RunConfig) -> tuple[Dataset, Dataset | None]:
    data = config.data
    if data.train:
        train = load_tsv(data.train, data.formalism, "train")
        test = load_tsv(data.test, data.formalism, "test") if data.test else None
        return train, test
    return generate_mini_scan(mini_scan_config(data))


def _arch(config: RunConfig, datasets: Sequence[Dataset]) -> ArchConfig:
    a = config.arch
    max_source = a.max_source_len or max(len(s) for ds in datasets for s in ds.sources())
    return ArchConfig(
        embedding_dim=a.embedding_dim,
        hidden_dim=a.hidden_dim,
        context_window=a.context_window,
        max_output_len=a.max_output_len,
        max_source_len=max_source,
        source_encoding=a.source_encoding,
    )


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(config: RunConfig) -> Path:
    out = _prepare_out(config)
    train, test = generate_mini_scan(mini_scan_config(config.data))
    save_tsv(train, out / "train.tsv")
    save_tsv(test, out / "test.tsv")
    report = validate_split(train, test, _descriptor(config))
    print(f"train={len(train)} test={len(test)} {report.summary()}")
    return out


def cmd_train(config: RunConfig) -> Path:
    if config.mode == "grpo" and not config.checkpoint:
        raise ConfigError("warm-up checkpoint required: grpo mode needs --checkpoint from an sft run")
    out = _prepare_out(config)
    train, test = _datasets(config)
    if config.mode == "sft":
        datasets = [train] + ([test] if test is not None else [])
        vocab = Vocab.build(
            train.source_vocab | train.target_vocab | (test.source_vocab if test is not None else frozenset())
        )
        params = init_policy(vocab, _arch(config, datasets), config.arch.seed)
        s = config.sft
        params, losses = train_sft(train, params, SftConfig(s.epochs, s.batch_size, s.learning_rate, s.seed))
        write_csv(out / "traces" / "sft_loss.csv", ("epoch", "mean_loss"),
                  [(i, loss) for i, loss in enumerate(losses, 1)])
        save_checkpoint(params, out / "checkpoints" / "sft.ckpt")
        print(f"sft: {len(losses)} epochs, final loss {fmt(losses[-1])}")
        return out

    warm = load_checkpoint(config.checkpoint)
    gcfg = grpo_config(config.grpo, warm.arch.max_output_len)
    dump = (out / "traces" / "rollouts.jsonl").open("w", encoding="utf-8") if config.grpo.dump_rollouts else None
    try:
        params, trace = train_grpo(train, warm, warm, gcfg, _descriptor(config), rollout_log=dump)
    finally:
        if dump is not None:
            dump.close()
    write_csv(
        out / "traces" / "grpo_trace.csv",
        TRACE_FIELDS,
        [(i, s.mean_reward, s.fraction_exact_match, s.mean_kl, s.mean_clip_fraction, s.grad_norm)
         for i, s in enumerate(trace, 1)],
    )
    save_checkpoint(params, out / "checkpoints" / "grpo.ckpt")
    last = trace[-1] if trace else None
    print(f"grpo: {len(trace)} steps" + (f", last mean reward {fmt(last.mean_reward)}" if last else ""))
    return out


def cmd_eval(config: RunConfig) -> Path:
    out = _prepare_out(config)
    reports = out / "reports"
    descriptor = _descriptor(config)
    ev = config.eval
    summary: dict[str, Any] = {"version": __version__}

    if ev.predictions:
        rows = read_prediction_dump(ev.predictions)
        sources = [r[0] for r in rows]
        golds = [r[1] for r in rows]
        preds = [r[2] for r in rows]
        params: PolicyParams | None = None
    else:
        if not config.checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        params = load_checkpoint(config.checkpoint)
        _, test = _datasets(config)
        if test is None:
            raise ConfigError("eval needs a test split (data.test)")
        sources, golds = test.sources(), test.targets()
        preds = greedy_decode(params, sources)
        write_prediction_dump(reports / "predictions.tsv", sources, golds, preds)

    report = evaluate(preds, golds, descriptor)
    write_csv(reports / "metrics.csv", ("metric", "value"), report.rows())
    summary["metrics"] = {k: v for k, v in report.rows()}

    if ev.pass_k:
        if params is None:
            raise ConfigError("pass@k needs a checkpoint to sample from")
        samples = sample_candidates(params, sources, max(ev.pass_k), ev.temperature, ev.seed)
        scores = pass_at_k_from_samples(samples, golds, ev.pass_k)
        write_csv(reports / "pass_at_k.csv", ("k", "accuracy"), sorted(scores.items()))
        summary["pass_at_k"] = {str(k): v for k, v in sorted(scores.items())}

    if ev.length_buckets:
        buckets = length_bucket_report(preds, golds)
        write_csv(reports / "length_buckets.csv", ("bucket", "count", "accuracy"),
                  [(b.label, b.count, b.accuracy) for b in buckets.buckets])
        summary["length_buckets"] = {b.label: [b.count, b.accuracy] for b in buckets.buckets}

    if ev.trigram_compare:
        if len(ev.trigram_compare) != 2:
            raise ConfigError("--trigram-compare takes exactly two prediction dumps")
        train, _ = _datasets(config)
        table = build_trigram_table(train.targets())
        rows_out = []
        for dump_path in ev.trigram_compare:
            dump_rows = read_prediction_dump(dump_path)
            wrong_preds, wrong_golds = incorrect_pairs([r[2] for r in dump_rows], [r[1] for r in dump_rows])
            score = copying_score(wrong_preds, wrong_golds, table)
            rows_out.append((Path(dump_path).stem, score.mean_freq, score.n_scored, score.n_skipped))
        write_csv(reports / "copying.csv", ("system", "mean_freq", "n_scored", "n_skipped"), rows_out)
        summary["copying"] = {name: [m, n, s] for name, m, n, s in rows_out}

    (reports / "report.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    print(f"exact_match={fmt(report.exact_match)} prim={fmt(report.prim_accuracy)} "
          f"comp={fmt(report.comp_accuracy)} n={report.n_examples}")
    return out


def cmd_pipeline(config: RunConfig) -> Path:
    """gen-data, sft, grpo and eval of both checkpoints under one directory."""
    root = Path(config.out)
    data_cfg = replace(config, out=str(root / "data"))
    cmd_gen_data(data_cfg)
    data = replace(config.data, train=str(root / "data" / "train.tsv"), test=str(root / "data" / "test.tsv"))
    sft_cfg = replace(config, out=str(root / "sft"), mode="sft", data=data)
    cmd_train(sft_cfg)
    grpo_cfg = replace(config, out=str(root / "grpo"), mode="grpo", data=data,
                       checkpoint=str(root / "sft" / "checkpoints" / "sft.ckpt"))
    cmd_train(grpo_cfg)
    for name in ("sft", "grpo"):
        ckpt = root / name / "checkpoints" / f"{name}.ckpt"
        cmd_eval(replace(config, out=str(root / f"eval_{name}"), checkpoint=str(ckpt), data=data))
    return root


def _json_safe(value):
    if isinstance(value, float):
        return None if math.isnan(value) else round(value, 6)
    if isinstance(value, dict):
        return {k: _json_safe(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_json_safe(v) for v in value]
    return value


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compgrpo", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key, e.g. grpo.steps=50")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="global seed applied to every section")
    common.add_argument("--formalism-descriptor", dest="formalism_descriptor", help="custom .fd descriptor file")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--train", help="training TSV (default: generate mini-SCAN)")
    data.add_argument("--test", help="test TSV")
    data.add_argument("--formalism", help="SCAN, COGS, FUNQL or SPARQL")

    g = sub.add_parser("gen-data", parents=[common], help="write mini-SCAN train/test TSVs")
    g.add_argument("--max-depth", dest="max_depth", type=int)
    g.add_argument("--threshold", type=int, help="length split: train keeps outputs up to this length")
    g.add_argument("--template", help="template split: hold out this template, e.g. 'V twice after V'")

    t = sub.add_parser("train", parents=[common, data], help="supervised warm-up or GRPO")
    t.add_argument("--mode", choices=("sft", "grpo"))
    t.add_argument("--reward", choices=[m.value for m in RewardMode])
    t.add_argument("--checkpoint", help="warm-up checkpoint (grpo mode)")
    t.add_argument("--epochs", type=int, help="sft epochs")
    t.add_argument("--steps", type=int, help="grpo steps")

    e = sub.add_parser("eval", parents=[common, data], help="evaluate a checkpoint or a prediction dump")
    e.add_argument("--checkpoint")
    e.add_argument("--predictions", help="TSV of source, gold, prediction")
    e.add_argument("--pass-k", dest="pass_k", metavar="K1,K2,...")
    e.add_argument("--length-buckets", dest="length_buckets", action="store_true")
    e.add_argument("--trigram-compare", dest="trigram_compare", nargs=2, metavar=("DUMP_A", "DUMP_B"))

    p = sub.add_parser("pipeline", parents=[common], help="gen-data, sft, grpo and eval in one go")
    p.add_argument("--reward", choices=[m.value for m in RewardMode])
    p.add_argument("--epochs", type=int, help="sft epochs")
    p.add_argument("--steps", type=int, help="grpo steps")
    p.add_argument("--pass-k", dest="pass_k", metavar="K1,K2,...")
    p.add_argument("--length-buckets", dest="length_buckets", action="store_true")
    return parser


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "pipeline": cmd_pipeline}


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = resolve_config(args)
        COMMANDS[args.command](config)
    except (ConfigError, CorpusError, DescriptorError, SkeletonError, PolicyError, FileNotFoundError, ValueError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
