"""Deterministic synthetic multilingual corpora for definition modeling.

A shared interlingua of C concepts underlies K toy languages. Each concept
has a definition template (3-8 other concepts, its meaning) and a set of
context templates (distractor concepts around one HOLE for the target
word). Languages render concepts as prefixed tokens like ``aa_k017``, so
vocabularies are disjoint and any token's language and concept are
recoverable from its spelling alone.

Polysemy: a fraction of surfaces also denote a second concept; which
meaning applies is determined by whose context template surrounds the
word. Phrases: a fraction of words are two-token compounds. Context
distractors never overlap the example's own definition concepts, so a
model that echoes its input context is measurably different from one
that defines the word.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<sep>")
HOLE = -1

FORMAT_TAG = "xlingdef-corpus-v1"


def lang_codes(n: int) -> list[str]:
    if n > 26:
        raise ValueError(f"at most 26 languages supported, got {n}")
    return [chr(97 + i) * 2 for i in range(n)]


def token_width(n_concepts: int) -> int:
    return max(3, len(str(n_concepts - 1)))


@dataclass(frozen=True)
class ToyLanguage:
    """A rendering of the interlingua: concept id <-> prefixed token."""

    code: str
    n_concepts: int

    def token(self, concept: int) -> str:
        if not 0 <= concept < self.n_concepts:
            raise ValueError(f"concept {concept} outside 0..{self.n_concepts - 1}")
        return f"{self.code}_k{concept:0{token_width(self.n_concepts)}d}"

    def concept(self, token: str) -> int:
        code, c = parse_token(token)
        if code != self.code:
            raise KeyError(f"token {token!r} is not in language {self.code}")
        return c

    def vocab(self) -> list[str]:
        return [self.token(c) for c in range(self.n_concepts)]


def parse_token(token: str) -> tuple[str, int]:
    """Split a surface token into (language code, concept id)."""
    code, sep, rest = token.partition("_k")
    if not sep or not rest.isdigit():
        raise KeyError(f"not a surface token: {token!r}")
    return code, int(rest)


@dataclass
class Example:
    lang: str
    word: list[str]
    context: list[str]
    definition: list[str]
    word_concepts: list[int]
    def_concepts: list[int]


@dataclass(frozen=True)
class CorpusConfig:
    n_langs: int = 3
    n_concepts: int = 200
    train: int = 2000
    valid: int = 200
    test: int = 200  # 0 means: reuse the validation split as test
    polysemy_fraction: float = 0.2
    phrase_fraction: float = 0.1
    n_context_templates: int = 12
    seed: int = 0

    @property
    def test_is_valid(self) -> bool:
        return self.test == 0


@dataclass
class Interlingua:
    """Concept-level structure shared by all languages of one corpus."""

    n_concepts: int
    def_templates: list[list[int]]
    ctx_templates: list[list[list[int]]]  # per concept, templates with HOLE
    polysemy: dict[int, int]  # surface concept -> second meaning
    phrase_partner: dict[int, int]  # head concept -> compound partner


@dataclass
class ToyCorpus:
    config: CorpusConfig
    languages: list[ToyLanguage]
    examples: dict[str, dict[str, list[Example]]]  # [lang code][split]
    interlingua: Interlingua | None = field(default=None, compare=False)

    def language(self, code: str) -> ToyLanguage:
        for lang in self.languages:
            if lang.code == code:
                return lang
        raise KeyError(f"no language {code!r} in corpus")

    @property
    def codes(self) -> list[str]:
        return [lang.code for lang in self.languages]


def _unique_template(make, seen: set, tries: int = 100):
    for _ in range(tries):
        t = make()
        key = tuple(t)
        if key not in seen:
            seen.add(key)
            return t
    raise RuntimeError("could not draw a fresh template; concept pool too small")


def _build_interlingua(cfg: CorpusConfig, rng: np.random.Generator) -> Interlingua:
    c_count = cfg.n_concepts
    n_poly = int(round(cfg.polysemy_fraction * c_count))
    n_phrase = int(round(cfg.phrase_fraction * c_count))
    if 2 * n_poly + n_phrase > c_count:
        raise ValueError(
            f"polysemy ({n_poly} pairs) plus phrases ({n_phrase}) need "
            f"{2 * n_poly + n_phrase} distinct concepts but only {c_count} exist")

    seen: set = set()
    def_templates: list[list[int]] = []
    for c in range(c_count):
        pool = np.array([k for k in range(c_count) if k != c])

        def draw(c=c, pool=pool):
            n = int(rng.integers(3, 9))
            return [int(x) for x in rng.choice(pool, size=n, replace=False)]

        def_templates.append(_unique_template(draw, seen))

    perm = [int(x) for x in rng.permutation(c_count)]
    primaries = perm[:n_poly]
    secondaries = perm[n_poly:2 * n_poly]
    polysemy = dict(zip(primaries, secondaries))
    phrase_heads = perm[2 * n_poly:2 * n_poly + n_phrase]
    phrase_partner = {}
    for c in phrase_heads:
        others = np.array([k for k in range(c_count) if k != c])
        phrase_partner[c] = int(rng.choice(others))

    aliases_of = {}  # meaning concept -> surface concepts that alias it
    for c1, c2 in polysemy.items():
        aliases_of.setdefault(c2, []).append(c1)

    ctx_templates: list[list[list[int]]] = []
    ctx_seen: set = set()
    for c in range(c_count):
        # distractors may not collide with the word, its compound partner,
        # its definition, or any alias surface that fills this hole
        banned = {c, *def_templates[c], *aliases_of.get(c, ())}
        if c in phrase_partner:
            banned.add(phrase_partner[c])
        pool = np.array([k for k in range(c_count) if k not in banned])
        templates = []
        for _ in range(cfg.n_context_templates):

            def draw(pool=pool):
                n = int(rng.integers(4, 8))
                body = [int(x) for x in rng.choice(pool, size=n, replace=False)]
                hole = int(rng.integers(0, n + 1))
                body.insert(hole, HOLE)
                return body

            templates.append(_unique_template(draw, ctx_seen))
        ctx_templates.append(templates)
    return Interlingua(c_count, def_templates, ctx_templates, polysemy,
                       phrase_partner)


def _word_surface_ids(inter: Interlingua, concept: int) -> list[int]:
    if concept in inter.phrase_partner:
        return [concept, inter.phrase_partner[concept]]
    return [concept]


def generate_corpus(cfg: CorpusConfig) -> ToyCorpus:
    """Build a deterministic corpus; identical configs give identical data.

    Split structure is shared across languages: the same (word slot,
    context template) pairs land in the same split everywhere, so
    translation pairs for pretraining never leak evaluation content.
    """
    if cfg.n_langs < 2:
        raise ValueError(f"need at least 2 languages, got {cfg.n_langs}")
    if cfg.n_concepts < 50:
        raise ValueError(f"need at least 50 concepts, got {cfg.n_concepts}")
    if cfg.train < cfg.n_concepts:
        raise ValueError(
            f"train size {cfg.train} < {cfg.n_concepts} concepts: every "
            f"concept needs at least one training example")

    rng = np.random.default_rng(cfg.seed)
    inter = _build_interlingua(cfg, rng)

    # a slot is (surface concept ids, meaning concept); the meaning owns
    # the context templates the slot draws from
    slots: list[tuple[list[int], int]] = []
    for c in range(cfg.n_concepts):
        slots.append((_word_surface_ids(inter, c), c))
    for c1, c2 in sorted(inter.polysemy.items()):
        slots.append(([c1], c2))

    pairs = [(si, ti) for si in range(len(slots))
             for ti in range(cfg.n_context_templates)]
    n_test = 0 if cfg.test_is_valid else cfg.test
    needed = cfg.train + cfg.valid + n_test
    if needed > len(pairs):
        raise ValueError(
            f"requested {needed} examples per language but only {len(pairs)} "
            f"distinct (word slot, context template) pairs exist; add "
            f"context templates or concepts")

    order = rng.permutation(len(pairs))
    shuffled = [pairs[int(i)] for i in order]

    taken = [False] * len(shuffled)
    split_pairs = {"train": [], "valid": [], "test": []}
    covered = [False] * cfg.n_concepts
    for i, (si, ti) in enumerate(shuffled):
        surface, meaning = slots[si]
        if si < cfg.n_concepts and not covered[meaning]:
            split_pairs["train"].append((si, ti))
            covered[meaning] = True
            taken[i] = True
            if len(split_pairs["train"]) == cfg.train:
                break
    if not all(covered):
        missing = covered.index(False)
        raise ValueError(
            f"train size {cfg.train} too small to cover every concept "
            f"(first uncovered: {missing})")
    quota = [("train", cfg.train), ("valid", cfg.valid), ("test", n_test)]
    for i, pair in enumerate(shuffled):
        if taken[i]:
            continue
        for name, size in quota:
            if len(split_pairs[name]) < size:
                split_pairs[name].append(pair)
                break

    languages = [ToyLanguage(code, cfg.n_concepts)
                 for code in lang_codes(cfg.n_langs)]
    examples: dict[str, dict[str, list[Example]]] = {}
    for lang in languages:
        per_split: dict[str, list[Example]] = {}
        for split, plist in split_pairs.items():
            out = []
            for si, ti in plist:
                surface, meaning = slots[si]
                word = [lang.token(c) for c in surface]
                context: list[str] = []
                for cid in inter.ctx_templates[meaning][ti]:
                    if cid == HOLE:
                        context.extend(word)
                    else:
                        context.append(lang.token(cid))
                definition = [lang.token(c) for c in inter.def_templates[meaning]]
                out.append(Example(lang.code, word, context, definition,
                                   list(surface), list(inter.def_templates[meaning])))
            per_split[split] = out
        if cfg.test_is_valid:
            per_split["test"] = list(per_split["valid"])
        examples[lang.code] = per_split
    return ToyCorpus(cfg, languages, examples, interlingua=inter)


def lexicon_translate(tokens: list[str], from_lang: ToyLanguage,
                      to_lang: ToyLanguage) -> list[str]:
    """Token-by-token rendering into another language via concept ids.
    Special tokens pass through unchanged."""
    out = []
    for tok in tokens:
        if tok in SPECIAL_TOKENS:
            out.append(tok)
            continue
        try:
            c = from_lang.concept(tok)
        except KeyError:
            raise KeyError(
                f"token {tok!r} is not in language {from_lang.code}") from None
        out.append(to_lang.token(c))
    return out


def trans_lingual_reference(example: Example, target_lang: ToyLanguage) -> list[str]:
    """The definition the example should receive in target_lang. Built
    from ground-truth concept ids; for evaluation only, never training."""
    return [target_lang.token(c) for c in example.def_concepts]


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def corpus_lines(corpus: ToyCorpus) -> list[str]:
    """Canonical serialization: one JSON header line (format, config,
    languages), then one JSON line per example."""
    cfg = corpus.config
    splits = ["train", "valid"] + ([] if cfg.test_is_valid else ["test"])
    lines = [_dump({"format": FORMAT_TAG, "config": asdict(cfg),
                    "languages": corpus.codes})]
    for code in corpus.codes:
        for split in splits:
            for ex in corpus.examples[code][split]:
                lines.append(_dump({
                    "lang": ex.lang, "split": split, "word": ex.word,
                    "context": ex.context, "definition": ex.definition,
                    "word_concepts": ex.word_concepts,
                    "def_concepts": ex.def_concepts}))
    return lines


def corpus_digest(corpus: ToyCorpus) -> str:
    """Content hash of the canonical serialization."""
    import hashlib
    body = "\n".join(corpus_lines(corpus)).encode("utf-8")
    return hashlib.sha256(body).hexdigest()[:16]


def save_corpus(corpus: ToyCorpus, path) -> None:
    """Write the canonical serialization. UTF-8, LF line endings."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(corpus_lines(corpus)) + "\n", encoding="utf-8",
                    newline="\n")


def load_corpus(path) -> ToyCorpus:
    path = Path(path)
    with open(path, encoding="utf-8") as f:
        raw = f.read().splitlines()
    if not raw:
        raise ValueError(f"{path}: empty corpus file")
    try:
        header = json.loads(raw[0])
    except json.JSONDecodeError as e:
        raise ValueError(f"{path}: line 1: bad header: {e}") from None
    if header.get("format") != FORMAT_TAG:
        raise ValueError(f"{path}: not a corpus file (format tag missing)")
    cfg = CorpusConfig(**header["config"])
    languages = [ToyLanguage(code, cfg.n_concepts) for code in header["languages"]]
    examples = {code: {"train": [], "valid": [], "test": []}
                for code in header["languages"]}
    for lineno, line in enumerate(raw[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            ex = Example(rec["lang"], rec["word"], rec["context"],
                         rec["definition"], rec["word_concepts"],
                         rec["def_concepts"])
            split = rec["split"]
        except (json.JSONDecodeError, KeyError, TypeError) as e:
            raise ValueError(f"{path}: line {lineno}: malformed example: {e}") from None
        if ex.lang not in examples or split not in ("train", "valid", "test"):
            raise ValueError(f"{path}: line {lineno}: unknown lang or split")
        examples[ex.lang][split].append(ex)
    if cfg.test_is_valid:
        for code in examples:
            examples[code]["test"] = list(examples[code]["valid"])
    return ToyCorpus(cfg, languages, examples)
