"""Command-line orchestration: corpus generation, training, evaluation,
ablation grids, and example inspection.

Configuration precedence is defaults < config file < flags. The config
file is flat `key = value` text using the same keys as the long flags.
Every run directory is self-describing: it contains the resolved config,
the seed, and a content hash of the corpus it was produced from. The
environment variable XLDG_RUN_DIR overrides the root for relative output
paths. Commands refuse to overwrite existing outputs without --force.
"""

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import __version__
from .evalkit import (all_ordered_pairs, compare_report, concept_f1,
                      cross_pairs, evaluate, ignore_task_flag,
                      language_mix_flag, save_records_jsonl, save_report_csv)
from .model import ModelConfig, ModelParams, Vocab, generate
from .toylang import (CorpusConfig, corpus_digest, generate_corpus,
                      load_corpus, save_corpus, trans_lingual_reference)
from .trainer import (TrainConfig, pretrain_translation, train, write_log_csv)

CLI_MODES = ("direct", "prompt-combo", "contrastive", "pipeline-mono")
TRAINER_MODE = {"direct": "direct", "prompt-combo": "prompt_combo",
                "contrastive": "contrastive", "pipeline-mono": "direct"}

CORPUS_PRESETS = {
    "rich": dict(n_langs=3, n_concepts=200, train=2000, valid=200, test=200),
    "low": dict(n_langs=3, n_concepts=200, train=256, valid=200, test=200),
}


class CliError(RuntimeError):
    pass


def out_path(p) -> Path:
    """Resolve an output path, honoring the XLDG_RUN_DIR root override."""
    p = Path(p)
    root = os.environ.get("XLDG_RUN_DIR")
    if root and not p.is_absolute():
        return Path(root) / p
    return p


def read_config_file(path) -> dict:
    """Flat `key = value` lines; values are parsed as JSON when possible,
    else kept as strings. Blank lines and # comments are skipped."""
    cfg = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CliError(f"{path}:{ln}: expected key = value, got {raw!r}")
        key, value = key.strip(), value.strip()
        try:
            cfg[key] = json.loads(value)
        except json.JSONDecodeError:
            cfg[key] = value
    return cfg


def resolve(defaults: dict, args: argparse.Namespace) -> dict:
    """defaults < config file < explicit flags. Flags left at None defer
    to the lower layers; unknown config-file keys are an error."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        file_cfg = read_config_file(args.config)
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise CliError(f"unknown config keys {unknown}; "
                           f"expected a subset of {sorted(defaults)}")
        merged.update(file_cfg)
    for key in defaults:
        flag = getattr(args, key, None)
        if flag is not None:
            merged[key] = flag
    return merged


def _require_new(path: Path, force: bool, what: str) -> None:
    if path.exists() and not force:
        raise CliError(f"{what} {path} exists; pass --force to overwrite")


def _write_json(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n",
                    encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

GEN_DEFAULTS = dict(langs=3, concepts=200, train=2000, valid=200, test=200,
                    polysemy=0.2, phrase=0.1, templates=12, seed=0)


def cmd_gen_data(args) -> int:
    defaults = dict(GEN_DEFAULTS)
    if args.preset:
        p = CORPUS_PRESETS[args.preset]
        defaults.update(langs=p["n_langs"], concepts=p["n_concepts"],
                        train=p["train"], valid=p["valid"], test=p["test"])
    cfg = resolve(defaults, args)
    corpus_cfg = CorpusConfig(
        n_langs=int(cfg["langs"]), n_concepts=int(cfg["concepts"]),
        train=int(cfg["train"]), valid=int(cfg["valid"]),
        test=int(cfg["test"]), polysemy_fraction=float(cfg["polysemy"]),
        phrase_fraction=float(cfg["phrase"]),
        n_context_templates=int(cfg["templates"]), seed=int(cfg["seed"]))
    out_dir = out_path(args.out)
    target = out_dir / "corpus.jsonl"
    _require_new(target, args.force, "corpus file")
    corpus = generate_corpus(corpus_cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_corpus(corpus, target)
    digest = corpus_digest(corpus)
    vocab = Vocab(corpus.languages)
    print(f"wrote {target} (digest {digest}, vocab {len(vocab)})")
    print(f"{'lang':<6}{'train':>8}{'valid':>8}{'test':>8}"
          f"{'mean-def':>10}{'mean-ctx':>10}")
    for code in corpus.codes:
        splits = corpus.examples[code]
        defs = [len(e.definition) for e in splits["train"]]
        ctxs = [len(e.context) for e in splits["train"]]
        print(f"{code:<6}{len(splits['train']):>8}{len(splits['valid']):>8}"
              f"{len(splits['test']):>8}{np.mean(defs):>10.2f}"
              f"{np.mean(ctxs):>10.2f}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

TRAIN_DEFAULTS = dict(
    mode="contrastive", tuning="full", epochs=10, batch_size=16,
    learning_rate=None, lam=0.2, tau=0.16, sigma=1.0, pooling="attention",
    seed=0, pretrain_steps=0, init=None, d_model=64, n_heads=4, enc_layers=2,
    dec_layers=2, ffn_dim=128, task_tokens=8, max_len=128, dropout=0.0,
    val_limit=None, val_max_new=16)


def _load_corpus_checked(path) -> tuple:
    path = Path(path)
    if path.is_dir():
        path = path / "corpus.jsonl"
    if not path.exists():
        raise CliError(f"corpus {path} not found; run gen-data first")
    corpus = load_corpus(path)
    return corpus, corpus_digest(corpus)


def _train_configs(cfg: dict, n_vocab: int, n_langs: int,
                   cli_mode: str) -> tuple[ModelConfig, TrainConfig]:
    mc = ModelConfig(
        vocab_size=n_vocab, n_langs=n_langs, d_model=int(cfg["d_model"]),
        n_heads=int(cfg["n_heads"]), n_enc_layers=int(cfg["enc_layers"]),
        n_dec_layers=int(cfg["dec_layers"]), ffn_dim=int(cfg["ffn_dim"]),
        max_len=int(cfg["max_len"]), n_task_tokens=int(cfg["task_tokens"]),
        dropout=float(cfg["dropout"]))
    lr = cfg["learning_rate"]
    tc = TrainConfig(
        mode=TRAINER_MODE[cli_mode], tuning=cfg["tuning"].replace("-", "_"),
        batch_size=int(cfg["batch_size"]), epochs=int(cfg["epochs"]),
        learning_rate=None if lr is None else float(lr), lam=float(cfg["lam"]),
        sigma=float(cfg["sigma"]), tau=float(cfg["tau"]),
        pooling=cfg["pooling"], seed=int(cfg["seed"]),
        val_limit=None if cfg["val_limit"] is None else int(cfg["val_limit"]),
        val_max_new=int(cfg["val_max_new"]))
    return mc, tc


def _run_pretrain(corpus, vocab, mc, tc, steps: int, run_dir: Path):
    per_epoch = max(1, sum(len(corpus.examples[c]["train"])
                           for c in corpus.codes) // tc.batch_size)
    ptc = TrainConfig(mode="pretrain_mt", batch_size=tc.batch_size,
                      epochs=max(1, math.ceil(steps / per_epoch)),
                      max_steps=steps, seed=tc.seed, val_limit=tc.val_limit)
    # translation pretraining runs regularization-free: the copy circuit it
    # must form is noise-sensitive, and the checkpoint carries no dropout
    result = pretrain_translation(corpus, ptc, mc=replace(mc, dropout=0.0),
                                  vocab=vocab)
    if result.log:
        write_log_csv(result.log, run_dir / "pretrain_log.csv")
        result.params.save(run_dir / "pretrained",
                           [l.code for l in corpus.languages],
                           extra={"stage": "pretrain_mt",
                                  "translation_accuracy": result.best_val})
    return result.params


def cmd_train(args) -> int:
    cfg = resolve(TRAIN_DEFAULTS, args)
    cli_mode = cfg["mode"]
    if cli_mode not in CLI_MODES:
        raise CliError(f"mode must be one of {CLI_MODES}, got {cli_mode!r}")
    corpus, digest = _load_corpus_checked(args.corpus)
    vocab = Vocab(corpus.languages)
    mc, tc = _train_configs(cfg, len(vocab), len(corpus.codes), cli_mode)
    run_dir = out_path(args.out if args.out else
                       f"runs/{cli_mode}-{tc.tuning}-seed{tc.seed}")
    _require_new(run_dir / "config.json", args.force, "run directory")
    run_dir.mkdir(parents=True, exist_ok=True)

    init = None
    if cfg["init"]:
        init, meta = ModelParams.load(cfg["init"])
        if meta.get("corpus_digest") not in (None, digest):
            raise CliError(f"init checkpoint was trained on corpus "
                           f"{meta['corpus_digest']}, not {digest}")
    elif int(cfg["pretrain_steps"]) > 0:
        init = _run_pretrain(corpus, vocab, mc, tc,
                             int(cfg["pretrain_steps"]), run_dir)

    result = train(corpus, tc, mc=mc, init=init, vocab=vocab)
    write_log_csv(result.log, run_dir / "train_log.csv")
    extra = {"mode": cli_mode, "tuning": tc.tuning, "prompted": tc.prompted,
             "corpus_digest": digest, "best_val": result.best_val,
             "best_epoch": result.best_epoch}
    result.params.save(run_dir / "model.best",
                       [l.code for l in corpus.languages], extra=extra)
    _write_json(run_dir / "config.json", {
        "command": "train", "version": __version__, "mode": cli_mode,
        "trainer_mode": tc.mode, "corpus": str(args.corpus),
        "corpus_digest": digest, "model": asdict(mc), "train": asdict(tc),
        "pretrain_steps": int(cfg["pretrain_steps"]),
        "init": cfg["init"], "best_val": result.best_val,
        "best_epoch": result.best_epoch})
    print(f"{cli_mode}: best val {result.best_val:.4f} "
          f"(epoch {result.best_epoch}) -> {run_dir}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

EVAL_DEFAULTS = dict(pairs="all", split="test", max_new=16, batch_size=64,
                     baseline="direct")


def _load_run(run_dir: Path):
    cfg_path = run_dir / "config.json"
    if not cfg_path.exists():
        raise CliError(f"{run_dir} is not a run directory (no config.json)")
    run_cfg = json.loads(cfg_path.read_text())
    mp, meta = ModelParams.load(run_dir / "model.best")
    return run_cfg, mp, meta


def cmd_eval(args) -> int:
    cfg = resolve(EVAL_DEFAULTS, args)
    corpus, digest = _load_corpus_checked(args.corpus)
    vocab = Vocab(corpus.languages)
    pair_sets = {"all": all_ordered_pairs(corpus), "cross": cross_pairs(corpus),
                 "mono": [(c, c) for c in corpus.codes]}
    if cfg["pairs"] not in pair_sets:
        raise CliError(f"pairs must be one of {sorted(pair_sets)}")
    pairs = pair_sets[cfg["pairs"]]
    out_dir = out_path(args.out)
    by_mode: dict[str, list] = {}
    for run in args.run:
        run_dir = out_path(run)
        run_cfg, mp, meta = _load_run(run_dir)
        if meta["corpus_digest"] != digest:
            raise CliError(f"run {run_dir} was trained on corpus "
                           f"{meta['corpus_digest']}, not {digest}")
        mode = run_cfg["mode"]
        report, records = evaluate(
            mp, vocab, corpus, pairs, prompted=meta["prompted"],
            split=cfg["split"], pipeline=(mode == "pipeline-mono"),
            batch_size=int(cfg["batch_size"]), max_new=int(cfg["max_new"]),
            meta={"mode": mode, "run": run_dir.name,
                  "seed": run_cfg["train"]["seed"]})
        dest = out_dir / run_dir.name
        _require_new(dest / "results.csv", args.force, "eval output")
        save_report_csv(report, dest / "results.csv")
        save_records_jsonl(records, dest / "records.jsonl")
        by_mode.setdefault(mode, []).append(report)
        print(f"{run_dir.name}: " + "  ".join(
            f"{s}->{t} mix={p.language_mix_rate:.3f} "
            f"ignore={p.ignore_task_rate:.3f} cf1={p.concept_f1:.3f}"
            for (s, t), p in sorted(report.pairs.items()) if s != t))
    if len(args.run) > 1 and any(s != t for s, t in pairs):
        baseline = cfg["baseline"] if cfg["baseline"] in by_mode \
            else sorted(by_mode)[0]
        compare_report(by_mode, out_dir, baseline_mode=baseline)
        print(f"comparison -> {out_dir / 'compare.csv'}")
    return 0


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

ABLATE_DEFAULTS = dict(
    seeds="0,1,2", poolings="attention,mean,max",
    lambdas="0.1,0.2,0.3,0.4,0.5", tuning="full", epochs=10, batch_size=16,
    learning_rate=None, tau=0.16, sigma=1.0, seed=None, pretrain_steps=0,
    init=None, d_model=64, n_heads=4, enc_layers=2, dec_layers=2,
    ffn_dim=128, task_tokens=8, max_len=128, dropout=0.0, val_limit=None,
    val_max_new=16, split="test", max_new=16)


def _cross_concept_f1(mp, vocab, corpus, prompted, split, max_new) -> float:
    report, _ = evaluate(mp, vocab, corpus, cross_pairs(corpus), prompted,
                         split=split, max_new=max_new)
    return float(np.mean([p.concept_f1 for p in report.pairs.values()]))


def cmd_ablate(args) -> int:
    cfg = resolve(ABLATE_DEFAULTS, args)
    corpus, digest = _load_corpus_checked(args.corpus)
    vocab = Vocab(corpus.languages)
    seeds = [int(s) for s in str(cfg["seeds"]).split(",") if s != ""]
    poolings = [p.strip() for p in cfg["poolings"].split(",") if p.strip()]
    lambdas = [float(x) for x in str(cfg["lambdas"]).split(",") if x != ""]
    out_dir = out_path(args.out)
    _require_new(out_dir / "ablation.csv", args.force, "ablation report")
    out_dir.mkdir(parents=True, exist_ok=True)

    scores: dict[tuple[str, float], dict[int, float]] = {}
    for seed in seeds:
        base = dict(cfg, mode="contrastive", seed=seed, pooling="attention",
                    lam=0.2)
        mc, tc0 = _train_configs(base, len(vocab), len(corpus.codes),
                                 "contrastive")
        init = None
        if cfg["init"]:
            init, meta = ModelParams.load(cfg["init"])
            if meta.get("corpus_digest") not in (None, digest):
                raise CliError(f"init checkpoint was trained on corpus "
                               f"{meta['corpus_digest']}, not {digest}")
        elif int(cfg["pretrain_steps"]) > 0:
            init = _run_pretrain(corpus, vocab, mc, tc0,
                                 int(cfg["pretrain_steps"]),
                                 out_dir / f"pretrain-seed{seed}")
        for pooling in poolings:
            for lam in lambdas:
                mc, tc = _train_configs(
                    dict(base, pooling=pooling, lam=lam), len(vocab),
                    len(corpus.codes), "contrastive")
                result = train(corpus, tc, mc=mc, init=init, vocab=vocab)
                f1 = _cross_concept_f1(result.params, vocab, corpus, True,
                                       cfg["split"], int(cfg["max_new"]))
                scores.setdefault((pooling, lam), {})[seed] = f1
                print(f"pooling={pooling} lam={lam} seed={seed} "
                      f"cross-concept-f1={f1:.4f}")

    lines = ["pooling,lam," + ",".join(f"seed{s}" for s in seeds) + ",median"]
    for pooling in poolings:
        for lam in lambdas:
            per_seed = scores[(pooling, lam)]
            med = float(np.median([per_seed[s] for s in seeds]))
            lines.append(f"{pooling},{lam!r},"
                         + ",".join(repr(per_seed[s]) for s in seeds)
                         + f",{med!r}")
    (out_dir / "ablation.csv").write_text("\n".join(lines) + "\n",
                                          encoding="utf-8", newline="\n")
    _write_json(out_dir / "config.json", {
        "command": "ablate", "version": __version__, "corpus": str(args.corpus),
        "corpus_digest": digest, "seeds": seeds, "poolings": poolings,
        "lambdas": lambdas,
        "settings": {k: cfg[k] for k in sorted(ABLATE_DEFAULTS)}})
    print(f"grid ({len(poolings)}x{len(lambdas)}x{len(seeds)}) -> "
          f"{out_dir / 'ablation.csv'}")
    return 0


# ---------------------------------------------------------------------------
# inspect
# ---------------------------------------------------------------------------


def cmd_inspect(args) -> int:
    corpus, digest = _load_corpus_checked(args.corpus)
    vocab = Vocab(corpus.languages)
    src, tgt = args.source, args.target
    if src not in corpus.codes or tgt not in corpus.codes:
        raise CliError(f"languages must be among {corpus.codes}")
    examples = corpus.examples[src][args.split]
    if args.word:
        matches = [e for e in examples if " ".join(e.word) == args.word]
        if not matches:
            raise CliError(f"word {args.word!r} not in {src}/{args.split}")
        example = matches[0]
    else:
        if not 0 <= args.index < len(examples):
            raise CliError(f"index {args.index} outside 0.."
                           f"{len(examples) - 1}")
        example = examples[args.index]
    reference = trans_lingual_reference(example, corpus.language(tgt))
    print(f"word:       {' '.join(example.word)}  [{src} -> {tgt}]")
    print(f"context:    {' '.join(example.context)}")
    print(f"reference:  {' '.join(reference)}")
    for run in args.run:
        run_dir = out_path(run)
        run_cfg, mp, meta = _load_run(run_dir)
        if meta["corpus_digest"] != digest:
            raise CliError(f"run {run_dir} was trained on corpus "
                           f"{meta['corpus_digest']}, not {digest}")
        if run_cfg["mode"] == "pipeline-mono":
            from .evalkit import pipeline_baseline
            out = pipeline_baseline(mp, vocab, example, tgt, corpus,
                                    prompted=meta["prompted"],
                                    max_new=args.max_new)
        else:
            out = generate(mp, vocab, example.word, example.context, src, tgt,
                           max_new_tokens=args.max_new,
                           prompted=meta["prompted"])
        mixed, _ = language_mix_flag(out, tgt)
        flags = []
        if mixed:
            flags.append("language-mix")
        if ignore_task_flag(out, example):
            flags.append("ignore-task")
        if not out:
            flags.append("degenerate")
        f1 = concept_f1(out, example.def_concepts)
        tag = f"  [{', '.join(flags)}]" if flags else ""
        print(f"{run_cfg['mode']:<14} ({run_dir.name}): "
              f"{' '.join(out) or '<empty>'}  (concept-f1 {f1:.2f}){tag}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_common(sub, config=True):
    if config:
        sub.add_argument("--config", help="flat key=value config file")
    sub.add_argument("--force", action="store_true",
                     help="overwrite existing outputs")


def _add_model_flags(sub):
    sub.add_argument("--d-model", type=int, dest="d_model")
    sub.add_argument("--n-heads", type=int, dest="n_heads")
    sub.add_argument("--enc-layers", type=int, dest="enc_layers")
    sub.add_argument("--dec-layers", type=int, dest="dec_layers")
    sub.add_argument("--ffn-dim", type=int, dest="ffn_dim")
    sub.add_argument("--task-tokens", type=int, dest="task_tokens")
    sub.add_argument("--max-len", type=int, dest="max_len")
    sub.add_argument("--dropout", type=float)


def _add_opt_flags(sub):
    sub.add_argument("--tuning", choices=("full", "prompt-only", "prompt_only"))
    sub.add_argument("--epochs", type=int)
    sub.add_argument("--batch-size", type=int, dest="batch_size")
    sub.add_argument("--lr", type=float, dest="learning_rate")
    sub.add_argument("--tau", type=float)
    sub.add_argument("--sigma", type=float)
    sub.add_argument("--pretrain-steps", type=int, dest="pretrain_steps")
    sub.add_argument("--init", help="checkpoint prefix to initialize from")
    sub.add_argument("--val-limit", type=int, dest="val_limit")
    sub.add_argument("--val-max-new", type=int, dest="val_max_new")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="xlingdef",
        description="Trans-lingual definition generation on synthetic corpora")
    ap.add_argument("--version", action="version", version=__version__)
    subs = ap.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-data", help="generate a synthetic corpus")
    g.add_argument("--preset", choices=sorted(CORPUS_PRESETS))
    g.add_argument("--langs", type=int)
    g.add_argument("--concepts", type=int)
    g.add_argument("--train", type=int)
    g.add_argument("--valid", type=int)
    g.add_argument("--test", type=int)
    g.add_argument("--polysemy", type=float)
    g.add_argument("--phrase", type=float)
    g.add_argument("--templates", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("-o", "--out", default="data")
    _add_common(g)
    g.set_defaults(fn=cmd_gen_data)

    t = subs.add_parser("train", help="train one regime")
    t.add_argument("--corpus", required=True)
    t.add_argument("--mode", choices=CLI_MODES)
    t.add_argument("--lambda", type=float, dest="lam")
    t.add_argument("--pooling", choices=("attention", "mean", "max"))
    t.add_argument("--seed", type=int)
    t.add_argument("-o", "--out")
    _add_opt_flags(t)
    _add_model_flags(t)
    _add_common(t)
    t.set_defaults(fn=cmd_train)

    e = subs.add_parser("eval", help="evaluate run directories")
    e.add_argument("--corpus", required=True)
    e.add_argument("--run", action="append", required=True,
                   help="run directory (repeatable)")
    e.add_argument("--pairs", choices=("all", "cross", "mono"))
    e.add_argument("--split")
    e.add_argument("--max-new", type=int, dest="max_new")
    e.add_argument("--batch-size", type=int, dest="batch_size")
    e.add_argument("--baseline", help="baseline mode for relative changes")
    e.add_argument("-o", "--out", default="eval")
    _add_common(e)
    e.set_defaults(fn=cmd_eval)

    a = subs.add_parser("ablate", help="pooling x lambda grid")
    a.add_argument("--corpus", required=True)
    a.add_argument("--seeds", help="comma-separated seed list")
    a.add_argument("--poolings", help="comma-separated pooling list")
    a.add_argument("--lambdas", help="comma-separated lambda list")
    a.add_argument("--split")
    a.add_argument("--max-new", type=int, dest="max_new")
    a.add_argument("-o", "--out", default="ablation")
    _add_opt_flags(a)
    _add_model_flags(a)
    _add_common(a)
    a.set_defaults(fn=cmd_ablate)

    i = subs.add_parser("inspect",
                        help="show one example's generations across runs")
    i.add_argument("--corpus", required=True)
    i.add_argument("--run", action="append", required=True)
    i.add_argument("--source", default="aa")
    i.add_argument("--target", default="bb")
    i.add_argument("--split", default="test")
    i.add_argument("--index", type=int, default=0)
    i.add_argument("--word")
    i.add_argument("--max-new", type=int, dest="max_new", default=16)
    i.set_defaults(fn=cmd_inspect)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (CliError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
