"""Command-line entry point: ``rtdkit <subcommand> ...``.

Every subcommand writes into an output directory that it locks for the
duration of the run. Files appear atomically (written to a temporary name,
then renamed), and a ``run.json`` records the merged config, seed, build id
and wall time.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import subprocess
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import filelock
import numpy as np

from . import __version__
from .bench import BenchSettings, bench_efficiency, report_csv, summarize
from .checkpoint import CheckpointError, load_checkpoint, restore, save_checkpoint
from .data import (DataFormatError, SyntheticLangSpec, gen_synthetic_corpus, read_conll, read_corpus,
                   read_squad_json, read_tsv_classification)
from .finetune import (FinetuneConfig, build_task_model, evaluate, finetune, lr_sweep)
from .metrics import accuracy, entity_f1, macro_f1, squad_scores, weighted_f1
from .model import ConfigError, EncoderConfig, MaskedLanguageModel, PretrainingModels, init_parameters
from .pretrain import METRICS_COLUMNS, MlmPretrainer, PretrainConfig, Pretrainer, interval_means, pack_sequences
from .tokenizer import VocabError, load_vocab, save_vocab, tokenize, train_vocab

log = logging.getLogger("rtdkit")

PRESETS = ("toy", "base")
LOCK_NAME = ".lock"


class UsageError(Exception):
    """Bad configuration or arguments; reported without a traceback."""


# ---------------------------------------------------------------------------
# configuration


@dataclass
class RunConfig:
    generator: EncoderConfig
    discriminator: EncoderConfig
    pretrain: PretrainConfig
    finetune: dict = field(default_factory=dict)
    synthetic: SyntheticLangSpec = field(default_factory=SyntheticLangSpec)
    bench: dict = field(default_factory=dict)
    tying: str = "all"
    log_every: int = 10

    def to_dict(self) -> dict:
        return {
            "generator": self.generator.to_dict(),
            "discriminator": self.discriminator.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": dict(self.finetune),
            "synthetic": asdict(self.synthetic),
            "bench": dict(self.bench),
            "tying": self.tying,
            "log_every": self.log_every,
        }

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        """Build and validate; errors name the offending section."""
        known = {"generator", "discriminator", "pretrain", "finetune", "synthetic", "bench", "tying", "log_every"}
        unknown = set(d) - known
        if unknown:
            raise UsageError(f"config: unknown sections {sorted(unknown)}")

        def section(name, build):
            try:
                return build(d.get(name, {}))
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config.{name}: {exc}") from None

        for name in ("generator", "discriminator"):
            if name not in d:
                raise UsageError(f"config.{name}: missing")
        cfg = cls(
            generator=section("generator", EncoderConfig.from_dict),
            discriminator=section("discriminator", EncoderConfig.from_dict),
            pretrain=section("pretrain", PretrainConfig.from_dict),
            finetune=section("finetune", dict),
            synthetic=section("synthetic", lambda x: SyntheticLangSpec(**x)),
            bench=section("bench", dict),
            tying=d.get("tying", "all"),
            log_every=d.get("log_every", 10),
        )
        if cfg.tying not in ("none", "token", "all"):
            raise UsageError(f"config.tying: must be none, token or all, got {cfg.tying!r}")
        if not isinstance(cfg.log_every, int) or cfg.log_every < 1:
            raise UsageError(f"config.log_every: must be a positive integer, got {cfg.log_every!r}")
        return cfg


def preset_dict(name: str) -> dict:
    return json.loads(resources.files("rtdkit").joinpath("presets", f"{name}.json").read_text(encoding="utf-8"))


def load_config(spec: str | None) -> RunConfig:
    """``spec`` is a preset name, a JSON file, or None for the toy preset."""
    if spec is None or spec in PRESETS:
        d = preset_dict(spec or "toy")
    else:
        try:
            with open(spec, encoding="utf-8") as f:
                d = json.load(f)
        except FileNotFoundError:
            raise UsageError(f"config file {spec} not found") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {spec}: invalid JSON ({exc})") from None
    if not isinstance(d, dict):
        raise UsageError("config must be a JSON object")
    return RunConfig.from_dict(d)


def build_id() -> str:
    """``git describe`` of the source tree when available, else the version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


# ---------------------------------------------------------------------------
# artifact handling


def atomic_write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path: Path, obj) -> None:
    atomic_write_text(path, json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(x):
    return repr(float(x)) if isinstance(x, (float, np.floating)) else x


class Run:
    """Owns one output directory: lock, timing and ``run.json``."""

    def __init__(self, out: str | os.PathLike, command: str, config: dict, seed: int | None,
                 record: str = "run.json"):
        self.out = Path(out)
        self.record = record
        self.command = command
        self.config = config
        self.seed = seed
        self.extra: dict = {}

    def __enter__(self) -> Run:
        self.out.mkdir(parents=True, exist_ok=True)
        self.lock = filelock.FileLock(str(self.out / LOCK_NAME))
        try:
            self.lock.acquire(timeout=0)
        except filelock.Timeout:
            raise UsageError(f"{self.out} is in use by another run") from None
        self.t0 = time.time()
        return self

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                atomic_write_json(self.out / self.record, {
                    "command": self.command,
                    "seed": self.seed,
                    "config": self.config,
                    "build": build_id(),
                    "wall_time_s": round(time.time() - self.t0, 3),
                    **self.extra,
                })
        finally:
            self.lock.release()
            try:
                os.unlink(self.out / LOCK_NAME)
            except OSError:
                pass
        return False


# ---------------------------------------------------------------------------
# subcommands


def cmd_tokenize_train(args) -> None:
    docs = read_corpus(args.corpus)
    if not docs:
        raise UsageError("corpus is empty")
    vocab = train_vocab(docs, args.size, args.min_freq)
    config = {"corpus": [str(p) for p in args.corpus], "size": args.size, "min_freq": args.min_freq}
    out = Path(args.out)
    # the run record sits next to the vocabulary file: vocab.txt -> vocab.run.json
    with Run(out.parent, "tokenize-train", config, None, record=f"{out.stem}.run.json") as run:
        save_vocab(vocab, out)
        run.extra["vocab_size"] = len(vocab)
    print(f"wrote {len(vocab)} tokens to {out}")


def cmd_synth(args) -> None:
    cfg = load_config(args.config)
    spec = cfg.synthetic if args.seed is None else SyntheticLangSpec(**{**asdict(cfg.synthetic), "seed": args.seed})
    corpus = gen_synthetic_corpus(spec)
    with Run(args.out, "synth", {"synthetic": asdict(spec)}, spec.seed) as run:
        atomic_write_text(run.out / "train.txt", corpus.to_text(corpus.train))
        atomic_write_text(run.out / "heldout.txt", corpus.to_text(corpus.heldout))
        save_vocab(corpus.vocab, run.out / "vocab.txt")
        run.extra["documents"] = {"train": len(corpus.train), "heldout": len(corpus.heldout)}
    print(f"wrote {len(corpus.train)} + {len(corpus.heldout)} documents to {args.out}")


def _documents(paths, vocab) -> list[list[int]]:
    docs = read_corpus(paths)
    if not docs:
        raise UsageError("corpus is empty")
    return [[vocab.token_to_id[t[0]] for t in tokenize(d, vocab)] for d in docs]


def _fit_vocab(cfg: EncoderConfig, n: int) -> EncoderConfig:
    return EncoderConfig.from_dict({**cfg.to_dict(), "vocab_size": n})


def with_steps(base: PretrainConfig, steps: int | None, **changes) -> PretrainConfig:
    """Copy of ``base`` with a new step budget; warmup keeps its fraction of the run."""
    d = {**base.to_dict(), **changes}
    if steps:
        d["steps"] = steps
        d["warmup_steps"] = min(base.warmup_steps, base.warmup_steps * steps // base.steps)
    try:
        return PretrainConfig.from_dict(d)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config.pretrain: {exc}") from None


def cmd_pretrain(args) -> None:
    cfg = load_config(args.config)
    vocab = load_vocab(args.vocab)
    pcfg = with_steps(cfg.pretrain, args.steps, seed=args.seed)
    d_cfg = _fit_vocab(cfg.discriminator, len(vocab))
    g_cfg = _fit_vocab(cfg.generator, len(vocab))
    if pcfg.seq_len > d_cfg.max_positions:
        raise UsageError(f"config.pretrain.seq_len {pcfg.seq_len} exceeds max_positions {d_cfg.max_positions}")
    windows, _ = pack_sequences(_documents(args.corpus, vocab), pcfg.seq_len, vocab)
    if args.objective == "rtd":
        model = PretrainingModels(g_cfg, d_cfg, cfg.tying)
        configs = {"generator": g_cfg, "discriminator": d_cfg}
        trainer_cls = Pretrainer
    else:
        model = MaskedLanguageModel(d_cfg)
        configs = {"encoder": d_cfg}
        trainer_cls = MlmPretrainer
    init_parameters(model, pcfg.seed)
    trainer = trainer_cls(model, windows, vocab, pcfg)
    every = cfg.log_every
    save_every = args.save_every or pcfg.steps
    if save_every % every:
        raise UsageError("--save-every must be a multiple of log_every")
    merged = {**cfg.to_dict(), "pretrain": pcfg.to_dict(), "generator": g_cfg.to_dict(),
              "discriminator": d_cfg.to_dict(), "objective": args.objective,
              "corpus": [str(p) for p in args.corpus], "vocab": str(args.vocab)}
    with Run(args.out, "pretrain", merged, pcfg.seed) as run:
        ckpt_dir = run.out / "checkpoint"
        rows: list[list] = []
        if args.resume and (ckpt_dir / "manifest.json").exists():
            ckpt = load_checkpoint(ckpt_dir)
            if ckpt.kind != args.objective:
                raise UsageError(f"checkpoint objective {ckpt.kind!r} differs from --objective {args.objective}")
            if ckpt.extra.get("pretrain") != pcfg.to_dict():
                raise UsageError("checkpoint was written with a different pretrain config")
            restore(ckpt, model, trainer.optimizer)
            trainer.step = ckpt.step
            with open(run.out / "metrics.csv", encoding="utf-8") as f:
                rows = list(csv.reader(f))[1:]
            log.info("resumed at step %d", trainer.step)
        save_vocab(vocab, run.out / "vocab.txt")
        while trainer.step < pcfg.steps:
            chunk = trainer.run(min(save_every, pcfg.steps - trainer.step))
            rows += [[_fmt(x) for x in r] for r in interval_means(chunk, every)]
            for r in rows[-len(chunk) // every or None:]:
                log.info("step %s mlm %s disc %s acc %s lr %s", *r)
            save_checkpoint(ckpt_dir, model, configs, args.objective, trainer.optimizer, trainer.step,
                            extra={"pretrain": pcfg.to_dict(), "tying": cfg.tying})
            atomic_write_text(run.out / "metrics.csv", csv_text(METRICS_COLUMNS, rows))
        run.extra["steps"] = trainer.step
        run.extra["skipped_batch_rows"] = trainer.skipped
    print(f"pretrained {args.objective} for {pcfg.steps} steps; artifacts in {args.out}")


def _read_task(task: str, path, num_labels: int):
    if task == "qa":
        examples, report = read_squad_json(path)
        if report.dropped:
            log.warning("%s: dropped %d of %d questions (%s)", path, report.dropped, report.total,
                        "; ".join(report.reasons[:3]))
        return examples
    if task == "sa":
        return read_tsv_classification(path, num_labels)
    return read_conll(path)


def _prediction_json(task: str, examples, preds) -> dict:
    if task == "qa":
        return dict(preds)
    return {ex.id: p for ex, p in zip(examples, preds)}


def _pretrained(path: Path):
    ckpt_dir = path / "checkpoint" if (path / "checkpoint" / "manifest.json").exists() else path
    ckpt = load_checkpoint(ckpt_dir)
    key = {"rtd": "discriminator", "mlm": "encoder"}.get(ckpt.kind)
    if key is None or key not in ckpt.configs:
        raise UsageError(f"{ckpt_dir}: not a pretraining checkpoint")
    return ckpt, ckpt.configs[key]


def cmd_finetune(args) -> None:
    cfg = load_config(args.config)
    overrides = {k: v for k, v in cfg.finetune.items() if k != "task"}
    overrides["task"] = args.task
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.lr is not None:
        overrides["learning_rate"] = args.lr
    try:
        ft = FinetuneConfig.from_dict(overrides)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"config.finetune: {exc}") from None
    ckpt_path = Path(args.ckpt)
    ckpt, enc_cfg = _pretrained(ckpt_path)
    vocab_path = args.vocab or (ckpt_path / "vocab.txt")
    vocab = load_vocab(vocab_path)
    if len(vocab) != enc_cfg.vocab_size:
        raise UsageError(f"vocabulary has {len(vocab)} tokens, checkpoint expects {enc_cfg.vocab_size}")
    if ft.max_seq_len > enc_cfg.max_positions:
        raise UsageError(f"max_seq_len {ft.max_seq_len} exceeds the encoder's {enc_cfg.max_positions} positions")
    train = _read_task(args.task, args.train, ft.num_labels)
    dev = _read_task(args.task, args.dev, ft.num_labels) if args.dev else None
    test = _read_task(args.task, args.test, ft.num_labels) if args.test else None
    make = lambda c: build_task_model(enc_cfg, c, ckpt)
    with Run(args.out, "finetune", {**cfg.to_dict(), "finetune": ft.to_dict(), "ckpt": str(args.ckpt),
                                    "train": str(args.train), "dev": args.dev and str(args.dev),
                                    "test": args.test and str(args.test)}, ft.seed) as run:
        if args.lr_sweep:
            sweep = lr_sweep(make, train, vocab, ft, dev, test)
            result, table = sweep.best, sweep.rows
        else:
            result = finetune(make(ft), train, vocab, ft, dev)
            table = []
        report = {"task": args.task, "learning_rate": result.config.learning_rate, "sweep": table,
                  "epochs": result.epochs, "skipped_examples": result.skipped}
        curve = [[r["step"], r["epoch"], _fmt(r["loss"]), _fmt(r["lr"])] for r in result.curve]
        atomic_write_text(run.out / "curve.csv", csv_text(("step", "epoch", "loss", "lr"), curve))
        for name, split in (("dev", dev), ("test", test)):
            if split:
                scores = evaluate(result.model, split, vocab, result.config)
                preds = scores.pop("predictions")
                report[name] = scores
                atomic_write_json(run.out / f"predictions.{name}.json", _prediction_json(args.task, split, preds))
        atomic_write_json(run.out / "report.json", report)
        save_checkpoint(run.out / "checkpoint", result.model, {"encoder": enc_cfg}, f"finetune-{args.task}",
                        extra={"finetune": result.config.to_dict()})
    print(json.dumps({k: report[k] for k in ("learning_rate", "sweep") if k in report} |
                     {k: report[k] for k in ("dev", "test") if k in report}, indent=2, ensure_ascii=False))


def evaluate_files(task: str, pred_path, gold_path, num_labels: int = 5) -> dict:
    with open(pred_path, encoding="utf-8") as f:
        preds = json.load(f)
    gold = _read_task(task, gold_path, num_labels)
    missing = [ex.id for ex in gold if ex.id not in preds]
    if task == "qa":
        out = squad_scores(preds, {ex.id: [a[0] for a in ex.answers] for ex in gold})
    elif task == "sa":
        g = [ex.label for ex in gold]
        p = [int(preds.get(ex.id, -1)) for ex in gold]
        if missing:
            raise UsageError(f"{len(missing)} examples have no prediction, e.g. {missing[0]}")
        out = {"macro_f1": macro_f1(g, p, num_labels), "weighted_f1": weighted_f1(g, p, num_labels),
               "accuracy": accuracy(g, p), "count": len(g)}
    else:
        if missing:
            raise UsageError(f"{len(missing)} sentences have no prediction, e.g. {missing[0]}")
        prf = entity_f1([ex.tags for ex in gold], [preds[ex.id] for ex in gold])
        out = {"precision": prf.precision, "recall": prf.recall, "f1": prf.f1, "count": len(gold)}
    out["missing_predictions"] = len(missing)
    return out


def cmd_evaluate(args) -> None:
    report = evaluate_files(args.task, args.pred, args.gold, args.num_labels)
    text = json.dumps(report, indent=2)
    if args.out:
        with Run(args.out, "evaluate", {"task": args.task, "pred": str(args.pred), "gold": str(args.gold)}, None) as run:
            atomic_write_json(run.out / "report.json", report)
    print(text)


def cmd_bench(args) -> None:
    cfg = load_config(args.config)
    b = dict(cfg.bench)
    seeds = args.seeds if args.seeds is not None else b.pop("seeds", [0, 1, 2, 3, 4])
    b.pop("seeds", None)
    budget = args.budget if args.budget is not None else b.pop("budget_steps", cfg.pretrain.steps)
    b.pop("budget_steps", None)
    eval_every = args.eval_every or b.pop("eval_every", None)
    b.pop("eval_every", None)
    pcfg = with_steps(cfg.pretrain, max(budget, 1))
    try:
        settings = BenchSettings(discriminator=cfg.discriminator, generator=cfg.generator, pretrain=pcfg,
                                 tying=cfg.tying, **b)
    except TypeError as exc:
        raise UsageError(f"config.bench: {exc}") from None
    steps = sorted(set(list(range(0, budget, eval_every)) + [budget])) if eval_every else [budget]
    merged = {**cfg.to_dict(), "pretrain": pcfg.to_dict(), "seeds": list(seeds), "budget_steps": budget,
              "eval_steps": steps}
    with Run(args.out, "bench-efficiency", merged, None) as run:
        rows = bench_efficiency(cfg.synthetic, budget, seeds, settings, steps,
                                on_row=lambda r: log.info("seed %d step %d mlm %.4f rtd %.4f", r.seed, r.step,
                                                          r.mlm_probe_metric, r.rtd_probe_metric))
        atomic_write_text(run.out / "bench.csv", report_csv(rows))
        run.extra["summary"] = summarize(rows)
    print(report_csv(rows), end="")
    print(json.dumps(summarize(rows)))


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtdkit", description="Replaced-token-detection pretraining toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    s = sub.add_parser("tokenize-train", help="train a WordPiece vocabulary")
    s.add_argument("--corpus", nargs="+", required=True, type=Path)
    s.add_argument("--size", type=int, default=8192, help="target vocabulary size")
    s.add_argument("--min-freq", type=int, default=1)
    s.add_argument("--out", required=True, type=Path, help="vocabulary file to write")
    s.set_defaults(func=cmd_tokenize_train)

    s = sub.add_parser("synth", help="generate a synthetic corpus and its vocabulary")
    s.add_argument("--config", help="preset name (toy, base) or JSON path; default toy")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("pretrain", help="RTD or MLM pretraining")
    s.add_argument("--objective", choices=("rtd", "mlm"), default="rtd")
    s.add_argument("--corpus", nargs="+", required=True, type=Path)
    s.add_argument("--vocab", required=True, type=Path)
    s.add_argument("--config")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, help="override pretrain.steps")
    s.add_argument("--save-every", type=int, help="checkpoint interval in steps (default: end only)")
    s.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint if present")
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="fine-tune a pretrained encoder on qa, sa or ner")
    s.add_argument("--task", choices=("qa", "sa", "ner"), required=True)
    s.add_argument("--ckpt", required=True, type=Path, help="pretrain output or checkpoint directory")
    s.add_argument("--vocab", type=Path, help="default: CKPT/vocab.txt")
    s.add_argument("--train", required=True, type=Path)
    s.add_argument("--dev", type=Path)
    s.add_argument("--test", type=Path)
    s.add_argument("--lr-sweep", action="store_true", help="try every rate in finetune.lr_grid")
    s.add_argument("--lr", type=float)
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("evaluate", help="score a prediction file against gold data")
    s.add_argument("--task", choices=("qa", "sa", "ner"), required=True)
    s.add_argument("--pred", required=True, type=Path)
    s.add_argument("--gold", required=True, type=Path)
    s.add_argument("--num-labels", type=int, default=5)
    s.add_argument("--out", type=Path)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("bench-efficiency", help="MLM vs RTD linear-probe comparison")
    s.add_argument("--config")
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--budget", type=int, help="pretraining steps per objective")
    s.add_argument("--eval-every", type=int, help="also probe every N steps")
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ConfigError, CheckpointError, DataFormatError, VocabError, FileNotFoundError) as exc:
        print(f"rtdkit {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
