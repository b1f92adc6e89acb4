"""Training regimes for the definition model.

Four modes share one optimizer loop. `pretrain_mt` teaches sentence
translation (the backbone skill the other regimes inherit). The three
definition regimes all train on monolingual (word, context) -> definition
examples — cross-lingual references never enter training — and differ in
prompting and loss: `direct` uses language prompts only, `prompt_combo`
adds soft task-prompt tokens, `contrastive` additionally separates the
pooled task-prompt state from the language-prompt states across a
two-language batch. Tuning is either `full` or `prompt_only` (task-prompt
rows are the only parameters that move).
"""

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .evalkit import mono_validation_f1
from .model import (EOS_ID, PAD_ID, ModelConfig, ModelParams, PackedBatch,
                    Vocab, assemble_decoder_input, assemble_encoder_input,
                    encode_packed, generate_batch, pack, token_logits_packed)
from .numcore import (AdamState, Graph, adam_step, backward,
                      clip_global_norm, ops)
from .prompting import (ContrastiveConfig, combined_loss, contrastive_loss,
                        group_prompt_vectors)
from .toylang import Example, ToyCorpus, lexicon_translate

MODES = ("pretrain_mt", "direct", "prompt_combo", "contrastive")
TUNINGS = ("full", "prompt_only")
FULL_LR = 3e-4  # from-scratch full fine-tuning
PROMPT_LR = 1e-2  # prompt_only tuning


class TrainDivergedError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "contrastive"
    tuning: str = "full"
    batch_size: int = 16
    epochs: int = 10
    learning_rate: float | None = None  # None: resolve from tuning mode
    lam: float = 0.2
    sigma: float = 1.0  # contrastive margin
    tau: float = 0.16  # contrastive temperature
    pooling: str = "attention"
    symmetrize_negatives: bool = False
    seed: int = 0
    max_steps: int | None = None  # optimizer-step budget (pretraining knob)
    clip_norm: float = 1.0
    val_max_new: int = 16
    val_limit: int | None = None  # validation examples per language

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tuning not in TUNINGS:
            raise ValueError(f"tuning must be one of {TUNINGS}, got {self.tuning!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be positive, got {self.batch_size}")
        if self.mode == "contrastive" and self.batch_size < 2:
            raise ValueError("contrastive batches need two groups, batch_size >= 2")
        self.contrastive()  # validate lam/sigma/tau/pooling eagerly

    @property
    def prompted(self) -> bool:
        return self.mode in ("prompt_combo", "contrastive")

    @property
    def resolved_lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return PROMPT_LR if self.tuning == "prompt_only" else FULL_LR

    def contrastive(self) -> ContrastiveConfig:
        return ContrastiveConfig(margin=self.sigma, temperature=self.tau,
                                 pooling=self.pooling, lam=self.lam,
                                 symmetrize_negatives=self.symmetrize_negatives)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------


@dataclass
class Group:
    """Packed teacher-forcing inputs for a set of examples. `lang` is the
    shared language code for homogeneous (contrastive) groups, None for
    mixed groups."""

    lang: str | None
    enc: PackedBatch
    dec: PackedBatch
    targets: np.ndarray  # [B, m] next-token ids, PAD-padded
    examples: list = field(repr=False, default_factory=list)

    @property
    def n_tokens(self) -> int:
        return int((self.targets != PAD_ID).sum())


@dataclass
class Batch:
    groups: list[Group]
    pair: tuple[str, str] | None = None  # unordered languages (contrastive)

    @property
    def size(self) -> int:
        return sum(g.enc.batch for g in self.groups)


def _pack_group(enc_inputs, dec_inputs, refs, lang, examples) -> Group:
    m = max(len(d.token_ids) for d in dec_inputs)
    targets = np.full((len(dec_inputs), m), PAD_ID, dtype=np.int64)
    for k, (d, ref) in enumerate(zip(dec_inputs, refs)):
        full = np.concatenate([ref, [EOS_ID]])
        t = len(d.token_ids)  # BOS + (possibly truncated) reference
        targets[k, :t] = full[:t]
    return Group(lang, pack(enc_inputs), pack(dec_inputs), targets, examples)


def make_group(examples: list[Example], vocab: Vocab, mc: ModelConfig,
               prompted: bool, lang: str | None = None) -> Group:
    """Definition-generation group: encoder sees word + context, decoder
    is teacher-forced on the same-language definition."""
    if lang is not None and any(ex.lang != lang for ex in examples):
        raise ValueError(f"group labelled {lang!r} contains other languages")
    enc_inputs, dec_inputs, refs = [], [], []
    for ex in examples:
        row = vocab.lang_rows[ex.lang]
        ref = vocab.encode(ex.definition)
        enc_inputs.append(assemble_encoder_input(
            vocab.encode(ex.word), vocab.encode(ex.context), row, mc, prompted))
        dec_inputs.append(assemble_decoder_input(ref, row, mc, prompted))
        refs.append(ref)
    return _pack_group(enc_inputs, dec_inputs, refs, lang, list(examples))


def make_translation_group(items: list[tuple[Example, str]], corpus: ToyCorpus,
                           vocab: Vocab, mc: ModelConfig) -> Group:
    """Sentence-translation group built over context sentences: encoder
    sees the source-language sentence, decoder is teacher-forced on its
    lexicon translation. No task prompt."""
    enc_inputs, dec_inputs, refs = [], [], []
    for ex, tgt in items:
        translated = lexicon_translate(ex.context, corpus.language(ex.lang),
                                       corpus.language(tgt))
        ref = vocab.encode(translated)
        enc_inputs.append(assemble_encoder_input(
            [], vocab.encode(ex.context), vocab.lang_rows[ex.lang], mc, False))
        dec_inputs.append(assemble_decoder_input(
            ref, vocab.lang_rows[tgt], mc, False))
        refs.append(ref)
    return _pack_group(enc_inputs, dec_inputs, refs, None,
                       [ex for ex, _ in items])


def _permuted(items: list, rng: np.random.Generator) -> list:
    return [items[i] for i in rng.permutation(len(items))]


def _pair_schedule(counts: dict[str, int], half: int,
                   rng: np.random.Generator) -> list[tuple[tuple[str, str], int]]:
    """Per-epoch sequence of (language pair, per-group size). When sizes
    line up (all presets do) every pair appears equally often and every
    example is consumed; otherwise a greedy largest-remaining pairing
    covers as much as possible, keeping the two groups equal and leaving
    a short final batch rather than an unbalanced one."""
    codes = sorted(counts)
    pairs = [(a, b) for i, a in enumerate(codes) for b in codes[i + 1:]]
    total = sum(counts.values())
    n_batches = total // (2 * half)
    if (len(set(counts.values())) == 1 and total % (2 * half) == 0
            and n_batches % len(pairs) == 0):
        schedule = [(p, half) for p in pairs
                    for _ in range(n_batches // len(pairs))]
    else:
        rem = dict(counts)
        schedule = []
        while True:
            live = sorted((c for c in rem if rem[c] > 0),
                          key=lambda c: (-rem[c], c))
            if len(live) < 2:
                break
            a, b = sorted(live[:2])
            take = min(half, rem[a], rem[b])
            schedule.append(((a, b), take))
            rem[a] -= take
            rem[b] -= take
    return _permuted(schedule, rng)


def epoch_batches(corpus: ToyCorpus, vocab: Vocab, mc: ModelConfig,
                  tc: TrainConfig, rng: np.random.Generator,
                  split: str = "train") -> list[Batch]:
    """One epoch of batches, sampled without replacement.

    contrastive: each batch holds two equal same-language groups; the
    language pair is uniform over unordered pairs. Other definition
    modes: uniformly shuffled mixed batches. pretrain_mt: mixed batches
    of (sentence, random other-language target) translation items.
    """
    train = {code: corpus.examples[code][split] for code in corpus.codes}
    if tc.mode == "contrastive":
        if len(corpus.codes) < 2:
            raise ValueError("contrastive mode needs at least 2 languages")
        half = tc.batch_size // 2
        queues = {code: _permuted(exs, rng) for code, exs in train.items()}
        heads = {code: 0 for code in corpus.codes}
        batches = []
        for (a, b), take in _pair_schedule(
                {c: len(x) for c, x in train.items()}, half, rng):
            groups = []
            for code in (a, b):
                lo = heads[code]
                heads[code] = lo + take
                groups.append(make_group(queues[code][lo:lo + take], vocab,
                                         mc, tc.prompted, lang=code))
            batches.append(Batch(groups, pair=(a, b)))
        return batches
    if tc.mode == "pretrain_mt":
        if len(corpus.codes) < 2:
            raise ValueError("translation pretraining needs at least 2 languages")
        items = []
        for code in corpus.codes:
            others = [c for c in corpus.codes if c != code]
            for ex in train[code]:
                items.append((ex, others[rng.integers(len(others))]))
        items = _permuted(items, rng)
        return [Batch([make_translation_group(items[lo:lo + tc.batch_size],
                                              corpus, vocab, mc)])
                for lo in range(0, len(items), tc.batch_size)]
    mixed = [ex for code in corpus.codes for ex in train[code]]
    mixed = _permuted(mixed, rng)
    return [Batch([make_group(mixed[lo:lo + tc.batch_size], vocab, mc,
                              tc.prompted)])
            for lo in range(0, len(mixed), tc.batch_size)]


# ---------------------------------------------------------------------------
# steps and runs
# ---------------------------------------------------------------------------


@dataclass
class StepStats:
    l_mle: float
    l_c: float | None
    l_final: float
    d_p: float | None = None
    d_n: float | None = None
    grad_norm: float = 0.0


def _diagnostics(mp: ModelParams) -> str:
    w = mp.params["out_proj.w"].data
    b = mp.params["out_proj.b"].data
    return (f"out_proj.w norm={np.linalg.norm(w):.4g} "
            f"max|w|={np.abs(w).max():.4g} max|b|={np.abs(b).max():.4g}")


def train_step(mp: ModelParams, batch: Batch, tc: TrainConfig,
               adam: AdamState, trainable: dict,
               drop_rng: np.random.Generator | None = None) -> StepStats:
    """One optimizer step. The MLE term pools teacher-forcing losses over
    all groups (so a two-group contrastive batch at lam=0 reproduces the
    prompt_combo loss on the same examples exactly); contrastive mode adds
    the prompt-separation term computed from the two groups' encoder
    prompt states. drop_rng enables train-time dropout; the contrastive
    extras reuse the cached encoder states, so mask consumption does not
    depend on the mode."""
    if tc.mode == "contrastive" and len(batch.groups) != 2:
        raise ValueError(f"contrastive step needs 2 groups, got {len(batch.groups)}")
    with Graph():
        flats, flat_targets, encodings = [], [], []
        for group in batch.groups:
            h_enc = encode_packed(mp, group.enc, drop_rng)
            logits = token_logits_packed(mp, h_enc, group.enc, group.dec,
                                         drop_rng)
            b, m, v = logits.shape
            flats.append(ops.reshape(logits, (b * m, v)))
            flat_targets.append(group.targets.reshape(-1))
            encodings.append(h_enc)
        flat = flats[0] if len(flats) == 1 else ops.concat(flats, axis=0)
        l_mle = ops.cross_entropy(flat, np.concatenate(flat_targets), PAD_ID)
        c_out = None
        if tc.mode == "contrastive":
            ccfg = tc.contrastive()
            t_i, l_i = group_prompt_vectors(encodings[0],
                                            batch.groups[0].enc.n_task,
                                            ccfg.pooling)
            t_j, l_j = group_prompt_vectors(encodings[1],
                                            batch.groups[1].enc.n_task,
                                            ccfg.pooling)
            c_out = contrastive_loss(t_i, t_j, l_i, l_j, ccfg)
            l_final = combined_loss(l_mle, c_out.loss_t, ccfg.lam)
        else:
            l_final = l_mle
        l_mle_v = l_mle.item()
        l_final_v = (l_mle_v if c_out is None
                     else tc.lam * c_out.loss + (1.0 - tc.lam) * l_mle_v)
        if not np.isfinite(l_final_v):
            raise TrainDivergedError(
                f"non-finite loss at adam step {adam.step_count + 1}: "
                f"l_mle={l_mle_v} l_c={None if c_out is None else c_out.loss}; "
                + _diagnostics(mp))
        for t in mp.params.values():
            t.grad = None
        backward(l_final)
    grads = {n: t.grad for n, t in trainable.items() if t.grad is not None}
    norm = clip_global_norm(grads, tc.clip_norm)
    adam_step(trainable, grads, adam)
    return StepStats(l_mle=l_mle_v,
                     l_c=None if c_out is None else c_out.loss,
                     l_final=l_final_v,
                     d_p=None if c_out is None else c_out.d_p,
                     d_n=None if c_out is None else c_out.d_n,
                     grad_norm=norm)


@dataclass
class LogRow:
    step: int
    epoch: int
    l_mle: float
    l_c: float | None
    l_final: float
    val_token_f1: float | None = None


@dataclass
class TrainResult:
    params: ModelParams
    log: list[LogRow]
    best_val: float
    best_epoch: int


def write_log_csv(rows: list[LogRow], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["step,epoch,l_mle,l_c,l_final,val_token_f1"]
    for r in rows:
        l_c = "" if r.l_c is None else repr(r.l_c)
        val = "" if r.val_token_f1 is None else repr(r.val_token_f1)
        lines.append(f"{r.step},{r.epoch},{r.l_mle!r},{l_c},{r.l_final!r},{val}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def clone_params(src: ModelParams,
                 config: ModelConfig | None = None) -> ModelParams:
    """Deep-copy parameters; config may override non-structural fields
    (dropout), e.g. to fine-tune a regularization-free checkpoint with
    dropout enabled."""
    config = config if config is not None else src.config
    if replace(config, dropout=src.config.dropout) != src.config:
        raise ValueError(
            f"checkpoint architecture {src.config} does not match the "
            f"requested config {config}")
    mp = ModelParams(config, np.random.default_rng(0))
    for name, t in src.params.items():
        mp.params[name].data[...] = t.data
    return mp


def translation_accuracy(mp: ModelParams, vocab: Vocab, corpus: ToyCorpus,
                         split: str = "valid", max_new: int = 24,
                         limit: int | None = None,
                         batch_size: int = 64) -> float:
    """Greedy sentence translation scored per position against the
    lexicon reference; each language translates into the next one."""
    codes = corpus.codes
    scores = []
    for i, code in enumerate(codes):
        tgt = codes[(i + 1) % len(codes)]
        examples = corpus.examples[code][split]
        if limit is not None:
            examples = examples[:limit]
        row_t = vocab.lang_rows[tgt]
        for lo in range(0, len(examples), batch_size):
            chunk = examples[lo:lo + batch_size]
            enc = [assemble_encoder_input([], vocab.encode(ex.context),
                                          vocab.lang_rows[code], mp.config,
                                          False) for ex in chunk]
            outs = generate_batch(mp, enc, [row_t] * len(chunk), max_new,
                                  prompted=False)
            for ex, out in zip(chunk, outs):
                ref = vocab.encode(lexicon_translate(
                    ex.context, corpus.language(code), corpus.language(tgt)))
                hits = sum(int(a == b) for a, b in zip(out, ref))
                scores.append(hits / max(len(out), len(ref)))
    return float(np.mean(scores))


def _validate(mp: ModelParams, vocab: Vocab, corpus: ToyCorpus,
              tc: TrainConfig) -> float:
    if tc.mode == "pretrain_mt":
        return translation_accuracy(mp, vocab, corpus, limit=tc.val_limit)
    return mono_validation_f1(mp, vocab, corpus, tc.prompted,
                              max_new=tc.val_max_new, limit=tc.val_limit)


def train(corpus: ToyCorpus, tc: TrainConfig, mc: ModelConfig | None = None,
          init: ModelParams | None = None,
          vocab: Vocab | None = None) -> TrainResult:
    """Run the configured regime. Deterministic given (corpus, config,
    init). Logs one row per step; the last row of each epoch carries the
    validation score (mono definition token-F1, or translation accuracy
    for pretrain_mt). Returns the best-validation parameters."""
    vocab = vocab if vocab is not None else Vocab(corpus.languages)
    if tc.mode in ("contrastive", "pretrain_mt") and len(corpus.codes) < 2:
        raise ValueError(f"{tc.mode} needs at least 2 languages")
    rng = np.random.default_rng(tc.seed)
    if init is not None:
        mp = clone_params(init, config=mc)
    else:
        if mc is None:
            mc = ModelConfig(vocab_size=len(vocab), n_langs=len(corpus.codes))
        mp = ModelParams(mc, rng)
    if mp.config.vocab_size != len(vocab):
        raise ValueError(f"model vocab {mp.config.vocab_size} != corpus "
                         f"vocab {len(vocab)}")
    trainable = mp.trainable(tc.tuning)
    frozen = [t for n, t in mp.params.items() if n not in trainable]
    adam = AdamState(lr=tc.resolved_lr)
    # dropout masks come from a stream separate from batch scheduling, so
    # mask draws are identical across modes fed the same batch sequence
    drop_rng = (np.random.default_rng([tc.seed, 1])
                if mp.config.dropout > 0.0 else None)
    log: list[LogRow] = []
    best_val, best_epoch, best_arrays = -np.inf, -1, None
    step = 0
    budget = np.inf if tc.max_steps is None else tc.max_steps
    try:
        for t in frozen:
            t.requires_grad = False
        for epoch in range(tc.epochs):
            if step >= budget:
                break
            for batch in epoch_batches(corpus, vocab, mp.config, tc, rng):
                stats = train_step(mp, batch, tc, adam, trainable, drop_rng)
                step += 1
                log.append(LogRow(step, epoch, stats.l_mle, stats.l_c,
                                  stats.l_final))
                if step >= budget:
                    break
            if log:
                val = _validate(mp, vocab, corpus, tc)
                log[-1].val_token_f1 = val
                if val > best_val:
                    best_val, best_epoch = val, epoch
                    best_arrays = mp.copy_arrays()
    finally:
        for t in frozen:
            t.requires_grad = True
    if best_arrays is not None:
        for name, arr in best_arrays.items():
            mp.params[name].data[...] = arr
    return TrainResult(mp, log, float(best_val), best_epoch)


def pretrain_translation(corpus: ToyCorpus, tc: TrainConfig,
                         mc: ModelConfig | None = None,
                         vocab: Vocab | None = None) -> TrainResult:
    """Translation pretraining pass; the returned parameters initialize
    the definition regimes. max_steps=0 returns the untouched random
    initialization (the no-pretraining ablation arm)."""
    if tc.mode != "pretrain_mt":
        tc = replace(tc, mode="pretrain_mt")
    if tc.max_steps == 0:
        vocab = vocab if vocab is not None else Vocab(corpus.languages)
        if mc is None:
            mc = ModelConfig(vocab_size=len(vocab), n_langs=len(corpus.codes))
        return TrainResult(ModelParams(mc, np.random.default_rng(tc.seed)),
                           [], float("-inf"), -1)
    return train(corpus, tc, mc=mc, vocab=vocab)
