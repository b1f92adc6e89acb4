"""Encoder-decoder transformer with language and task prompt slots.

Input layout (encoder):  [LANG] [TASK_1 .. TASK_n] [word] [SEP] [context]
Input layout (decoder):  [LANG] [TASK_1 .. TASK_n] [BOS] [definition]

Slot 0 holds the language prompt (a learned row per language), slots
1..n the shared soft task prompt; both bypass the token embedding table.
The encoder carries the source language's prompt and the decoder the
target language's, so switching the decoder row at inference requests a
definition in another language. Pre-norm residual blocks, fixed sinusoidal
positions, greedy decoding.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numcore import Tensor, load_checkpoint, ops, restore_into, save_checkpoint
from .toylang import SPECIAL_TOKENS, ToyLanguage

PAD_ID, BOS_ID, EOS_ID, SEP_ID = 0, 1, 2, 3

NEG_INF = -1e30


class Vocab:
    """Token string <-> id table: 4 specials, then each language's
    concept tokens in language order."""

    def __init__(self, languages: list[ToyLanguage]):
        self.languages = list(languages)
        self.tokens: list[str] = list(SPECIAL_TOKENS)
        self.lang_rows: dict[str, int] = {}
        self._lang_span: dict[str, tuple[int, int]] = {}
        for row, lang in enumerate(self.languages):
            self.lang_rows[lang.code] = row
            start = len(self.tokens)
            self.tokens.extend(lang.vocab())
            self._lang_span[lang.code] = (start, len(self.tokens))
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, tokens: list[str]) -> np.ndarray:
        try:
            return np.array([self.index[t] for t in tokens], dtype=np.int64)
        except KeyError as e:
            raise KeyError(f"token {e.args[0]!r} not in vocabulary") from None

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]

    def lang_of_id(self, i: int) -> str | None:
        for code, (lo, hi) in self._lang_span.items():
            if lo <= i < hi:
                return code
        return None


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_langs: int
    d_model: int = 64
    n_heads: int = 4
    n_enc_layers: int = 2
    n_dec_layers: int = 2
    ffn_dim: int = 128
    max_len: int = 128
    n_task_tokens: int = 100
    dropout: float = 0.0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by "
                             f"{self.n_heads} heads")
        if self.n_task_tokens < 1:
            raise ValueError("need at least one task prompt token")


def sinusoidal_positions(max_len: int, d_model: int) -> np.ndarray:
    pe = np.zeros((max_len, d_model))
    pos = np.arange(max_len)[:, None]
    div = np.exp(np.arange(0, d_model, 2) * (-math.log(10000.0) / d_model))
    pe[:, 0::2] = np.sin(pos * div)
    pe[:, 1::2] = np.cos(pos * div)
    return pe


PROMPT_PARAM_NAMES = ("task_prompt",)


class ModelParams:
    """Named parameter tensors plus the fixed positional table."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.pe = sinusoidal_positions(config.max_len, config.d_model)
        d, f, v = config.d_model, config.ffn_dim, config.vocab_size
        p: dict[str, Tensor] = {}

        def w(name, shape, scale=0.02):
            p[name] = Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

        def zeros(name, shape):
            p[name] = Tensor(np.zeros(shape), requires_grad=True)

        def norm(prefix):
            p[f"{prefix}.gain"] = Tensor(np.ones(d), requires_grad=True)
            zeros(f"{prefix}.bias", d)

        def attn(prefix):
            for nm in ("wq", "wk", "wv", "wo"):
                w(f"{prefix}.{nm}", (d, d))
            for nm in ("bq", "bk", "bv", "bo"):
                zeros(f"{prefix}.{nm}", d)

        w("tok_emb", (v, d))
        w("lang_prompt", (config.n_langs, d))
        w("task_prompt", (config.n_task_tokens, d))
        for i in range(config.n_enc_layers):
            attn(f"enc{i}.attn")
            norm(f"enc{i}.ln1")
            w(f"enc{i}.ffn.w1", (d, f))
            zeros(f"enc{i}.ffn.b1", f)
            w(f"enc{i}.ffn.w2", (f, d))
            zeros(f"enc{i}.ffn.b2", d)
            norm(f"enc{i}.ln2")
        for i in range(config.n_dec_layers):
            attn(f"dec{i}.self")
            norm(f"dec{i}.ln1")
            attn(f"dec{i}.cross")
            norm(f"dec{i}.ln2")
            w(f"dec{i}.ffn.w1", (d, f))
            zeros(f"dec{i}.ffn.b1", f)
            w(f"dec{i}.ffn.w2", (f, d))
            zeros(f"dec{i}.ffn.b2", d)
            norm(f"dec{i}.ln3")
        norm("enc_ln")
        norm("dec_ln")
        w("out_proj.w", (d, v))
        zeros("out_proj.b", v)
        self.params = p

    def all(self) -> dict[str, Tensor]:
        return self.params

    def trainable(self, tuning: str) -> dict[str, Tensor]:
        if tuning == "full":
            return dict(self.params)
        if tuning == "prompt_only":
            return {n: self.params[n] for n in PROMPT_PARAM_NAMES}
        raise ValueError(f"unknown tuning mode {tuning!r}")

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.params.items()}

    def save(self, prefix, languages: list[str], extra: dict | None = None):
        meta = {"model": asdict(self.config), "languages": languages}
        meta.update(extra or {})
        save_checkpoint(prefix, self.params, meta)

    @classmethod
    def load(cls, prefix) -> tuple["ModelParams", dict]:
        arrays, meta = load_checkpoint(prefix)
        config = ModelConfig(**meta["model"])
        mp = cls(config, np.random.default_rng(0))
        restore_into(mp.params, arrays)
        return mp, meta


# ---------------------------------------------------------------------------
# input assembly
# ---------------------------------------------------------------------------


@dataclass
class AssembledInput:
    """One side's slot layout: prompt slots then real token ids."""

    token_ids: np.ndarray  # [m] ids of the non-prompt region
    lang_row: int
    n_task: int  # 0 in direct (unprompted) layouts
    truncated: bool = False

    @property
    def length(self) -> int:
        return 1 + self.n_task + len(self.token_ids)

    @property
    def lang_pos(self) -> int:
        return 0

    @property
    def task_span(self) -> tuple[int, int]:
        if self.n_task == 0:
            raise ValueError("no task span: input was assembled in direct mode")
        return (1, self.n_task)


def assemble_encoder_input(word_ids, context_ids, lang_row: int,
                           config: ModelConfig, prompted: bool) -> AssembledInput:
    n = config.n_task_tokens if prompted else 0
    word_ids = np.asarray(word_ids, dtype=np.int64)
    context_ids = np.asarray(context_ids, dtype=np.int64)
    budget = config.max_len - 1 - n - len(word_ids) - 1
    truncated = False
    if len(context_ids) > budget:
        context_ids = context_ids[:budget]  # drop context from the right
        truncated = True
    ids = np.concatenate([word_ids, [SEP_ID], context_ids])
    return AssembledInput(ids.astype(np.int64), lang_row, n, truncated)


def assemble_decoder_input(definition_ids, lang_row: int, config: ModelConfig,
                           prompted: bool) -> AssembledInput:
    n = config.n_task_tokens if prompted else 0
    definition_ids = np.asarray(definition_ids, dtype=np.int64)
    budget = config.max_len - 1 - n - 1
    truncated = False
    if len(definition_ids) > budget:
        definition_ids = definition_ids[:budget]
        truncated = True
    ids = np.concatenate([[BOS_ID], definition_ids])
    return AssembledInput(ids.astype(np.int64), lang_row, n, truncated)


@dataclass
class PackedBatch:
    """Right-padded batch of same-mode assembled inputs."""

    ids: np.ndarray  # [B, m] token-region ids, PAD-padded
    lang_rows: np.ndarray  # [B]
    n_task: int
    visible: np.ndarray  # [B, S] 1.0 for live slots (prompts always live)

    @property
    def batch(self) -> int:
        return self.ids.shape[0]

    @property
    def seq_len(self) -> int:
        return self.visible.shape[1]


def pack(inputs: list[AssembledInput]) -> PackedBatch:
    n = inputs[0].n_task
    if any(i.n_task != n for i in inputs):
        raise ValueError("cannot pack prompted and direct inputs together")
    b = len(inputs)
    m = max(len(i.token_ids) for i in inputs)
    ids = np.full((b, m), PAD_ID, dtype=np.int64)
    visible = np.zeros((b, 1 + n + m))
    visible[:, :1 + n] = 1.0
    for k, inp in enumerate(inputs):
        t = len(inp.token_ids)
        ids[k, :t] = inp.token_ids
        visible[k, 1 + n:1 + n + t] = 1.0
    rows = np.array([i.lang_row for i in inputs], dtype=np.int64)
    return PackedBatch(ids, rows, n, visible)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def _embed(mp: ModelParams, packed: PackedBatch) -> Tensor:
    p = mp.params
    parts = [ops.embedding(p["lang_prompt"], packed.lang_rows[:, None])]
    if packed.n_task:
        parts.append(ops.broadcast_rows(p["task_prompt"], packed.batch))
    parts.append(ops.embedding(p["tok_emb"], packed.ids))
    x = ops.concat(parts, axis=1)
    return ops.add_const(x, mp.pe[None, :packed.seq_len])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    b, t, d = x.shape
    return ops.swap_axes(ops.reshape(x, (b, t, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x: Tensor) -> Tensor:
    b, h, t, dh = x.shape
    return ops.reshape(ops.swap_axes(x, 1, 2), (b, t, h * dh))


def _drop(mp: ModelParams, x: Tensor, drop_rng) -> Tensor:
    """Train-time dropout: active only when a generator is supplied."""
    if drop_rng is None or mp.config.dropout <= 0.0:
        return x
    return ops.dropout(x, mp.config.dropout, drop_rng)


def _mha(mp: ModelParams, prefix: str, q_in: Tensor, kv_in: Tensor,
         add_mask: np.ndarray, drop_rng=None) -> Tensor:
    p, h = mp.params, mp.config.n_heads
    q = _split_heads(ops.linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), h)
    k = _split_heads(ops.linear(kv_in, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), h)
    v = _split_heads(ops.linear(kv_in, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), h)
    dh = mp.config.d_model // h
    scores = ops.scale(ops.matmul(q, ops.transpose_last2(k)), 1.0 / math.sqrt(dh))
    w = ops.masked_softmax(scores, add_mask)
    # attention-probability dropout keeps alternative keys trained instead
    # of letting attention collapse onto a single position
    w = _drop(mp, w, drop_rng)
    ctx = _merge_heads(ops.matmul(w, v))
    return ops.linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _ffn(mp: ModelParams, prefix: str, x: Tensor) -> Tensor:
    p = mp.params
    h = ops.relu(ops.linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return ops.linear(h, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _norm(mp: ModelParams, prefix: str, x: Tensor) -> Tensor:
    p = mp.params
    return ops.layer_norm(x, p[f"{prefix}.gain"], p[f"{prefix}.bias"])


def _pad_additive(visible: np.ndarray) -> np.ndarray:
    # [B, S] visibility -> additive key mask broadcastable to [B, h, T, S]
    return ((1.0 - visible) * NEG_INF)[:, None, None, :]


def _causal_additive(t: int) -> np.ndarray:
    m = np.triu(np.full((t, t), NEG_INF), k=1)
    return m[None, None]


def encode_packed(mp: ModelParams, enc: PackedBatch, drop_rng=None) -> Tensor:
    x = _embed(mp, enc)
    mask = _pad_additive(enc.visible)
    for i in range(mp.config.n_enc_layers):
        h = _norm(mp, f"enc{i}.ln1", x)
        x = ops.add(x, _mha(mp, f"enc{i}.attn", h, h, mask, drop_rng))
        h = _norm(mp, f"enc{i}.ln2", x)
        x = ops.add(x, _ffn(mp, f"enc{i}.ffn", h))
    return _norm(mp, "enc_ln", x)


def decode_hidden_packed(mp: ModelParams, h_enc: Tensor, enc: PackedBatch,
                         dec: PackedBatch, drop_rng=None) -> Tensor:
    x = _embed(mp, dec)
    t = dec.seq_len
    self_mask = _causal_additive(t) + _pad_additive(dec.visible)
    cross_mask = _pad_additive(enc.visible)
    for i in range(mp.config.n_dec_layers):
        h = _norm(mp, f"dec{i}.ln1", x)
        x = ops.add(x, _mha(mp, f"dec{i}.self", h, h, self_mask, drop_rng))
        h = _norm(mp, f"dec{i}.ln2", x)
        x = ops.add(x, _mha(mp, f"dec{i}.cross", h, h_enc, cross_mask,
                            drop_rng))
        h = _norm(mp, f"dec{i}.ln3", x)
        x = ops.add(x, _ffn(mp, f"dec{i}.ffn", h))
    return _norm(mp, "dec_ln", x)


def token_logits_packed(mp: ModelParams, h_enc: Tensor, enc: PackedBatch,
                        dec: PackedBatch, drop_rng=None) -> Tensor:
    """Next-token logits for the decoder's token region only: [B, m, V]
    where m counts the [BOS] + definition slots."""
    h = decode_hidden_packed(mp, h_enc, enc, dec, drop_rng)
    region = ops.slice_axis(h, 1, 1 + dec.n_task, dec.seq_len)
    p = mp.params
    return ops.linear(region, p["out_proj.w"], p["out_proj.b"])


# per-example views of the same forward pass


def encode(mp: ModelParams, inp: AssembledInput) -> Tensor:
    h = encode_packed(mp, pack([inp]))
    return ops.reshape(h, (inp.length, mp.config.d_model))


def decode_logits(mp: ModelParams, h_enc: Tensor, enc_inp: AssembledInput,
                  dec_inp: AssembledInput) -> Tensor:
    h3 = ops.reshape(h_enc, (1,) + h_enc.shape)
    h = decode_hidden_packed(mp, h3, pack([enc_inp]), pack([dec_inp]))
    p = mp.params
    logits = ops.linear(h, p["out_proj.w"], p["out_proj.b"])
    return ops.reshape(logits, (dec_inp.length, mp.config.vocab_size))


# ---------------------------------------------------------------------------
# greedy generation
# ---------------------------------------------------------------------------


def generate_batch(mp: ModelParams, enc_inputs: list[AssembledInput],
                   target_rows: list[int], max_new_tokens: int = 16,
                   prompted: bool = True) -> list[list[int]]:
    """Greedy decode for a batch; returns token ids per example, EOS and
    padding stripped."""
    enc = pack(enc_inputs)
    h_enc = encode_packed(mp, enc)
    b = enc.batch
    n = mp.config.n_task_tokens if prompted else 0
    grown = np.full((b, 1 + max_new_tokens), PAD_ID, dtype=np.int64)
    grown[:, 0] = BOS_ID
    done = np.zeros(b, dtype=bool)
    length = 1
    rows = np.asarray(target_rows, dtype=np.int64)
    for _ in range(max_new_tokens):
        ids = grown[:, :length]
        visible = np.zeros((b, 1 + n + length))
        visible[:, :1 + n] = 1.0
        visible[:, 1 + n:] = (ids != PAD_ID).astype(np.float64)
        dec = PackedBatch(ids, rows, n, visible)
        logits = token_logits_packed(mp, h_enc, enc, dec)
        step = np.argmax(logits.data[:, length - 1, :], axis=-1)
        step = np.where(done, PAD_ID, step)
        grown[:, length] = step
        done |= step == EOS_ID
        length += 1
        if done.all():
            break
    outs = []
    for k in range(b):
        row = grown[k, 1:length]
        keep = []
        for i in row:
            if i in (EOS_ID, PAD_ID):
                break
            keep.append(int(i))
        outs.append(keep)
    return outs


def generate(mp: ModelParams, vocab: Vocab, word: list[str], context: list[str],
             source_code: str, target_code: str, max_new_tokens: int = 16,
             prompted: bool = True) -> list[str]:
    """Greedy definition for one (word, context): encoder speaks the source
    language, decoder is asked for target_code."""
    if source_code not in vocab.lang_rows:
        raise KeyError(f"unknown source language {source_code!r}")
    if target_code not in vocab.lang_rows:
        raise KeyError(f"unknown target language {target_code!r}")
    enc_inp = assemble_encoder_input(vocab.encode(word), vocab.encode(context),
                                     vocab.lang_rows[source_code], mp.config,
                                     prompted)
    ids = generate_batch(mp, [enc_inp], [vocab.lang_rows[target_code]],
                         max_new_tokens, prompted)[0]
    return vocab.decode(ids)
