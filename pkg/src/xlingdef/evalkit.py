"""Output quality measurement: error flags, concept fidelity, reports.

Two failure modes are mechanically detectable on the synthetic corpora.
Language mix: a generated definition contains a token whose spelling
prefix belongs to another language. Task ignoring: the output's concept
set resembles the input context more than it resembles any definition,
which on these corpora means the model translated/echoed its input
instead of defining the word. Concept-F1 scores semantic fidelity
independently of output language, since every surface token names its
concept id.
"""

import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, Vocab, assemble_encoder_input, generate_batch
from .toylang import (SPECIAL_TOKENS, Example, ToyCorpus, corpus_digest,
                      parse_token)


def _multiset_f1(out: list, ref: list) -> float:
    if not ref:
        raise ValueError("empty reference")
    if not out:
        return 0.0
    overlap = sum((Counter(out) & Counter(ref)).values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(out)
    recall = overlap / len(ref)
    return 2.0 * precision * recall / (precision + recall)


def token_f1(output_tokens: list[str], reference_tokens: list[str]) -> float:
    """Multiset F1 over surface tokens (specials excluded from output)."""
    out = [t for t in output_tokens if t not in SPECIAL_TOKENS]
    return _multiset_f1(out, list(reference_tokens))


def output_concepts(output_tokens: list[str]) -> list[int]:
    """Concept ids named by the output, whatever language each token is
    in; specials and unparseable tokens contribute nothing."""
    out = []
    for t in output_tokens:
        if t in SPECIAL_TOKENS:
            continue
        try:
            out.append(parse_token(t)[1])
        except KeyError:
            continue
    return out


def language_mix_flag(output_tokens: list[str],
                      target_code: str) -> tuple[bool, list[str]]:
    """True iff any non-special token is spelled in another language."""
    foreign = []
    for t in output_tokens:
        if t in SPECIAL_TOKENS:
            continue
        try:
            code, _ = parse_token(t)
        except KeyError:
            foreign.append(t)
            continue
        if code != target_code:
            foreign.append(t)
    return bool(foreign), foreign


def _jaccard(a: set, b: set) -> float:
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def ignore_task_flag(output_tokens: list[str], example: Example,
                     threshold: float = 0.5) -> bool:
    """Flag outputs that resemble the (translated) input context more than
    the reference definition. Concept ids are language-invariant, so the
    context comparison is unaffected by which language the output is in."""
    out = set(output_concepts(output_tokens))
    ctx = set(output_concepts(example.context))
    ref = set(example.def_concepts)
    j_ctx = _jaccard(out, ctx)
    j_def = _jaccard(out, ref)
    return j_ctx >= threshold and j_ctx > j_def


def concept_f1(output_tokens: list[str], reference_concepts: list[int]) -> float:
    """Multiset F1 between output concept ids and the reference concepts.
    Foreign-language tokens still count: meaning is scored independently
    of the language-mix axis."""
    return _multiset_f1(output_concepts(output_tokens), list(reference_concepts))


# ---------------------------------------------------------------------------
# evaluation over a corpus
# ---------------------------------------------------------------------------


@dataclass
class PairResult:
    src: str
    tgt: str
    n_examples: int
    language_mix_rate: float
    ignore_task_rate: float
    degenerate_rate: float
    concept_f1: float
    mono_token_f1: float | None  # only when src == tgt


@dataclass
class EvalReport:
    meta: dict
    pairs: dict[tuple[str, str], PairResult] = field(default_factory=dict)


def _generate_for_pair(mp: ModelParams, vocab: Vocab, examples: list[Example],
                       src: str, tgt: str, prompted: bool, batch_size: int,
                       max_new: int) -> list[list[str]]:
    src_row, tgt_row = vocab.lang_rows[src], vocab.lang_rows[tgt]
    outs: list[list[str]] = []
    for lo in range(0, len(examples), batch_size):
        chunk = examples[lo:lo + batch_size]
        enc = [assemble_encoder_input(vocab.encode(e.word),
                                      vocab.encode(e.context), src_row,
                                      mp.config, prompted) for e in chunk]
        ids = generate_batch(mp, enc, [tgt_row] * len(chunk), max_new, prompted)
        outs.extend(vocab.decode(i) for i in ids)
    return outs


def _relabel(tokens: list[str], to_lang) -> list[str]:
    """Re-render every surface token in `to_lang` via its concept id.
    Unlike lexicon_translate this tolerates stray foreign tokens in model
    output: the relabeled result is target-language by construction."""
    out = []
    for t in tokens:
        if t in SPECIAL_TOKENS:
            out.append(t)
            continue
        out.append(to_lang.token(parse_token(t)[1]))
    return out


def pipeline_baseline(mp_mono: ModelParams, vocab: Vocab, example: Example,
                      target_code: str, corpus: ToyCorpus, prompted: bool = False,
                      max_new: int = 16) -> list[str]:
    """Generate a definition in the source language, then map it token by
    token into the target language."""
    out = _generate_for_pair(mp_mono, vocab, [example], example.lang,
                             example.lang, prompted, 1, max_new)[0]
    return _relabel(out, corpus.language(target_code))


def evaluate(mp: ModelParams, vocab: Vocab, corpus: ToyCorpus,
             pairs: list[tuple[str, str]], prompted: bool, split: str = "test",
             pipeline: bool = False, batch_size: int = 64, max_new: int = 16,
             ignore_threshold: float = 0.5,
             meta: dict | None = None) -> tuple[EvalReport, list[dict]]:
    """Greedy-generate over `split` for each ordered language pair and
    score every output. Returns the aggregate report and one record per
    example (JSONL-ready)."""
    report = EvalReport(meta={"corpus": corpus_digest(corpus), "split": split,
                              "pipeline": pipeline, **(meta or {})})
    records: list[dict] = []
    for src, tgt in pairs:
        examples = corpus.examples[src][split]
        if pipeline:
            mono = _generate_for_pair(mp, vocab, examples, src, src, prompted,
                                      batch_size, max_new)
            if src == tgt:
                outputs = mono
            else:
                t = corpus.language(tgt)
                outputs = [_relabel(o, t) for o in mono]
        else:
            outputs = _generate_for_pair(mp, vocab, examples, src, tgt,
                                         prompted, batch_size, max_new)
        n = len(examples)
        mix = ignore = degen = 0
        f1s = []
        tok_f1s = []
        for ex, out in zip(examples, outputs):
            mixed, foreign = language_mix_flag(out, tgt)
            ign = ignore_task_flag(out, ex, ignore_threshold)
            cf1 = concept_f1(out, ex.def_concepts)
            mix += mixed
            ignore += ign
            degen += not out
            f1s.append(cf1)
            rec = {"src": src, "tgt": tgt, "word": ex.word, "output": out,
                   "language_mix": bool(mixed), "foreign": foreign,
                   "ignore_task": bool(ign), "degenerate": not out,
                   "concept_f1": cf1}
            if src == tgt:
                tf1 = token_f1(out, ex.definition)
                tok_f1s.append(tf1)
                rec["token_f1"] = tf1
            records.append(rec)
        report.pairs[(src, tgt)] = PairResult(
            src=src, tgt=tgt, n_examples=n,
            language_mix_rate=mix / n, ignore_task_rate=ignore / n,
            degenerate_rate=degen / n,
            concept_f1=float(np.mean(f1s)) if f1s else 0.0,
            mono_token_f1=float(np.mean(tok_f1s)) if tok_f1s else None)
    return report, records


def mono_validation_f1(mp: ModelParams, vocab: Vocab, corpus: ToyCorpus,
                       prompted: bool, split: str = "valid",
                       batch_size: int = 64, max_new: int = 16,
                       limit: int | None = None) -> float:
    """Mean same-language token-F1 over all languages: the model-selection
    signal (never uses cross-lingual references)."""
    scores = []
    for code in corpus.codes:
        examples = corpus.examples[code][split]
        if limit is not None:
            examples = examples[:limit]
        outs = _generate_for_pair(mp, vocab, examples, code, code, prompted,
                                  batch_size, max_new)
        scores.extend(token_f1(o, e.definition) for e, o in zip(examples, outs))
    return float(np.mean(scores))


def all_ordered_pairs(corpus: ToyCorpus) -> list[tuple[str, str]]:
    return [(a, b) for a in corpus.codes for b in corpus.codes]


def cross_pairs(corpus: ToyCorpus) -> list[tuple[str, str]]:
    return [(a, b) for a in corpus.codes for b in corpus.codes if a != b]


# ---------------------------------------------------------------------------
# serialization and comparison reports
# ---------------------------------------------------------------------------


def save_records_jsonl(records: list[dict], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")))
            f.write("\n")


def report_to_csv_lines(report: EvalReport) -> list[str]:
    lines = ["src,tgt,n,language_mix_rate,ignore_task_rate,degenerate_rate,"
             "concept_f1,mono_token_f1"]
    for key in sorted(report.pairs):
        p = report.pairs[key]
        mono = "" if p.mono_token_f1 is None else repr(p.mono_token_f1)
        lines.append(f"{p.src},{p.tgt},{p.n_examples},{p.language_mix_rate!r},"
                     f"{p.ignore_task_rate!r},{p.degenerate_rate!r},"
                     f"{p.concept_f1!r},{mono}")
    return lines


def save_report_csv(report: EvalReport, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(report_to_csv_lines(report)) + "\n",
                    encoding="utf-8", newline="\n")


_METRICS = ("language_mix_rate", "ignore_task_rate", "concept_f1")


def _cross_median(reports: list[EvalReport], metric: str) -> dict[tuple, float]:
    """Per-pair median over seeds for cross-lingual pairs."""
    out = {}
    keys = [k for k in reports[0].pairs if k[0] != k[1]]
    for k in keys:
        out[k] = float(np.median([getattr(r.pairs[k], metric) for r in reports]))
    return out


def relative_change(ours: float, baseline: float) -> str:
    """Table-style relative change, e.g. -77.8% when ours is far below
    the baseline. Empty when the baseline is zero."""
    if baseline == 0.0:
        return ""
    return f"{(ours - baseline) / baseline * 100.0:+.1f}%"


def compare_report(reports_by_mode: dict[str, list[EvalReport]], out_dir,
                   baseline_mode: str = "direct") -> Path:
    """Side-by-side cross-lingual metrics: per-seed values, medians, and
    relative change vs the baseline mode. Also emits one SVG bar chart
    per metric. Returns the CSV path."""
    digests = {r.meta["corpus"] for rs in reports_by_mode.values() for r in rs}
    if len(digests) > 1:
        raise ValueError(f"reports come from different corpora: {sorted(digests)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    modes = sorted(reports_by_mode)
    n_seeds = {m: len(rs) for m, rs in reports_by_mode.items()}
    lines = ["metric,src,tgt,mode," +
             ",".join(f"seed{i}" for i in range(max(n_seeds.values()))) +
             ",median,rel_vs_baseline"]
    medians: dict[str, dict[str, dict[tuple, float]]] = {}
    for metric in _METRICS:
        medians[metric] = {m: _cross_median(reports_by_mode[m], metric)
                           for m in modes}
        base = medians[metric].get(baseline_mode)
        for src, tgt in sorted(next(iter(medians[metric].values()))):
            for m in modes:
                vals = [getattr(r.pairs[(src, tgt)], metric)
                        for r in reports_by_mode[m]]
                med = medians[metric][m][(src, tgt)]
                rel = ""
                if base is not None and m != baseline_mode:
                    rel = relative_change(med, base[(src, tgt)])
                cells = [repr(v) for v in vals]
                cells += [""] * (max(n_seeds.values()) - len(cells))
                lines.append(f"{metric},{src},{tgt},{m}," + ",".join(cells) +
                             f",{med!r},{rel}")
    csv_path = out_dir / "compare.csv"
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
    for metric in _METRICS:
        pair_keys = sorted(next(iter(medians[metric].values())))
        series = {m: [medians[metric][m][k] for k in pair_keys] for m in modes}
        labels = [f"{a}->{b}" for a, b in pair_keys]
        svg_bar_chart(f"{metric} (median over seeds)", labels, series,
                      out_dir / f"{metric}.svg")
    return csv_path


_PALETTE = ("#4878a8", "#e49444", "#5ba053", "#b65fa0", "#85594c", "#979797")


def svg_bar_chart(title: str, group_labels: list[str],
                  series: dict[str, list[float]], path) -> None:
    """Grouped bar chart, one group per label, one bar per series entry.
    Pure-text SVG so outputs are byte-reproducible."""
    names = list(series)
    n_groups, n_series = len(group_labels), len(names)
    bar_w, gap, group_gap = 18, 2, 24
    group_w = n_series * (bar_w + gap) + group_gap
    width = 80 + n_groups * group_w
    height = 320
    plot_h, base_y = 220, 260
    vmax = max((max(v) for v in series.values()), default=0.0)
    vmax = vmax if vmax > 0 else 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" font-family="monospace" font-size="11">',
             f'<text x="10" y="20">{title}</text>']
    for i, name in enumerate(names):
        color = _PALETTE[i % len(_PALETTE)]
        lx = 10 + i * 150
        parts.append(f'<rect x="{lx}" y="30" width="10" height="10" '
                     f'fill="{color}"/>')
        parts.append(f'<text x="{lx + 14}" y="39">{name}</text>')
    parts.append(f'<line x1="60" y1="{base_y}" x2="{width - 10}" '
                 f'y2="{base_y}" stroke="#000"/>')
    for g, label in enumerate(group_labels):
        gx = 70 + g * group_w
        for i, name in enumerate(names):
            v = series[name][g]
            h = 0 if vmax == 0 else v / vmax * plot_h
            x = gx + i * (bar_w + gap)
            y = base_y - h
            parts.append(f'<rect x="{x}" y="{y:.2f}" width="{bar_w}" '
                         f'height="{h:.2f}" fill="{_PALETTE[i % len(_PALETTE)]}"/>')
            parts.append(f'<text x="{x}" y="{y - 3:.2f}" font-size="8">'
                         f'{v:.3f}</text>')
        parts.append(f'<text x="{gx}" y="{base_y + 16}">{label}</text>')
    parts.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(parts) + "\n", encoding="utf-8", newline="\n")
