"""CoLA ingestion, prompt templates, tokenization and a synthetic agreement corpus."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, TextIO

import numpy as np

PAD, UNK = 0, 1
N_RESERVED = 2
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"


@dataclass(frozen=True)
class Example:
    sentence: str
    label: int
    source: str = ""

    def __post_init__(self):
        if self.label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {self.label!r}")
        if not self.sentence:
            raise ValueError("sentence is empty")

    def to_dict(self) -> dict:
        return {"sentence": self.sentence, "label": self.label, "source": self.source}


class ColaFormatError(ValueError):
    def __init__(self, lineno: int, msg: str):
        super().__init__(f"line {lineno}: {msg}")
        self.lineno = lineno


def parse_cola_tsv(stream: TextIO | Iterable[str]) -> list[Example]:
    """Parse CoLA-layout lines: source, label, original annotation, sentence."""
    out = []
    for lineno, line in enumerate(stream, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise ColaFormatError(lineno, f"expected 4 tab-separated fields, got {len(fields)}")
        source, label, _annotation, sentence = fields
        if label not in ("0", "1"):
            raise ColaFormatError(lineno, f"label must be 0 or 1, got {label!r}")
        if not sentence.strip():
            raise ColaFormatError(lineno, "empty sentence")
        out.append(Example(sentence=sentence, label=int(label), source=source))
    return out


def read_cola_tsv(path) -> list[Example]:
    with open(path, encoding="utf-8") as f:
        return parse_cola_tsv(f)


def write_jsonl(examples: Iterable[Example], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for ex in examples:
            f.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


def read_jsonl(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if line.strip():
                d = json.loads(line)
                out.append(Example(sentence=d["sentence"], label=int(d["label"]), source=d.get("source", "")))
    return out


def label_stats(examples: Sequence[Example]) -> dict:
    c = Counter(ex.label for ex in examples)
    n = len(examples)
    return {"n": n, "label_0": c[0], "label_1": c[1], "frac_acceptable": (c[1] / n) if n else 0.0}


def balance(examples: Sequence[Example], rng: np.random.Generator) -> list[Example]:
    """Down-sample the majority class to the minority size, keeping original order."""
    by_label = [[i for i, ex in enumerate(examples) if ex.label == y] for y in (0, 1)]
    k = min(len(idx) for idx in by_label)
    keep = set()
    for idx in by_label:
        if k:
            keep.update(int(i) for i in rng.choice(idx, size=k, replace=False))
    return [ex for i, ex in enumerate(examples) if i in keep]


# ---------------------------------------------------------------------------
# templates

GPT3_PREFIX = "Is this sentence grammatically correct? "
SCRATCHPAD = " Let me think about this step by step:"

TEMPLATES = {
    "minimal": lambda s: s + "?",
    "gpt3": lambda s: GPT3_PREFIX + s,
    "eval_harness": lambda s: "Sentence: " + s + "\nQuestion: Is this sentence grammatically acceptable?\nAnswer:",
    "cd_student": lambda s: GPT3_PREFIX + s,
    "cd_teacher": lambda s: GPT3_PREFIX + s + SCRATCHPAD,
}
PBFT_TEMPLATES = ("minimal", "gpt3", "eval_harness")


def apply_template(sentence: str, name: str) -> str:
    try:
        render = TEMPLATES[name]
    except KeyError:
        raise ValueError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}") from None
    return render(sentence)


def render(sentence: str, template: str | None, scratchpad: bool = False) -> str:
    """The prompt for ``sentence``; ``scratchpad`` appends the teacher's reasoning cue."""
    text = sentence if template is None else apply_template(sentence, template)
    return text + SCRATCHPAD if scratchpad else text


def few_shot_sample(examples: Sequence[Example], k_per_class: int, rng: np.random.Generator) -> list[Example]:
    """Exactly ``k_per_class`` examples per label, drawn without replacement, shuffled."""
    if k_per_class < 1:
        raise ValueError("k_per_class must be positive")
    picked = []
    for label in (0, 1):
        idx = [i for i, ex in enumerate(examples) if ex.label == label]
        if len(idx) < k_per_class:
            raise ValueError(f"class {label} has {len(idx)} examples, need {k_per_class}")
        picked.extend(int(i) for i in rng.choice(idx, size=k_per_class, replace=False))
    order = rng.permutation(len(picked))
    return [examples[picked[i]] for i in order]


# ---------------------------------------------------------------------------
# tokenization

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


class Vocab:
    def __init__(self, tokens: Sequence[str]):
        self.itos = [PAD_TOKEN, UNK_TOKEN, *tokens]
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def to_json(self) -> str:
        return json.dumps(self.itos[2:], ensure_ascii=False)

    @classmethod
    def from_json(cls, text: str) -> Vocab:
        return cls(json.loads(text))


def build_vocab(
    examples: Sequence[Example],
    min_freq: int = 1,
    extra_texts: Iterable[str] = (),
    max_size: int | None = None,
) -> Vocab:
    """Vocabulary over training sentences plus any fixed prompt text.

    Tokens are ordered by descending frequency, ties broken alphabetically.
    ``extra_texts`` tokens are kept regardless of ``min_freq`` and ``max_size``;
    ``max_size`` counts the reserved ids and drops the rarest corpus tokens.
    """
    counts = Counter()
    for ex in examples:
        counts.update(tokenize(ex.sentence))
    fixed = {t for text in extra_texts for t in tokenize(text)}
    if max_size is not None and max_size < N_RESERVED + len(fixed):
        raise ValueError(f"max_size {max_size} cannot hold the reserved and prompt tokens")
    order = sorted((t for t, c in counts.items() if c >= min_freq and t not in fixed), key=lambda t: (-counts[t], t))
    if max_size is not None:
        order = order[: max_size - N_RESERVED - len(fixed)]
    keep = set(order) | fixed
    return Vocab(sorted(keep, key=lambda t: (-counts[t], t)))


def template_texts() -> list[str]:
    """Fixed words of every template, so prompts never hit UNK."""
    return [render("", name) for name in TEMPLATES]


def encode(vocab: Vocab, text: str, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Token ids and real-token mask, right-padded or truncated to ``max_len``."""
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    ids = [vocab.stoi.get(t, UNK) for t in tokenize(text)][:max_len]
    out = np.full(max_len, PAD, dtype=np.int64)
    out[: len(ids)] = ids
    mask = np.zeros(max_len, dtype=bool)
    mask[: len(ids)] = True
    return out, mask


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    return " ".join(vocab.itos[i] for i in ids if i != PAD)


def encode_batch(vocab: Vocab, texts: Sequence[str], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Encode and trim trailing all-padding columns."""
    pairs = [encode(vocab, t, max_len) for t in texts]
    ids = np.stack([p[0] for p in pairs])
    mask = np.stack([p[1] for p in pairs])
    width = max(1, int(mask.sum(axis=1).max()))
    return ids[:, :width], mask[:, :width]


# ---------------------------------------------------------------------------
# synthetic subject-verb agreement corpus
#
# Acceptable sentences agree in number between the subject and the verb; the
# unacceptable twin flips the verb's number. Determiners and auxiliaries are
# shared function words; nouns, verbs and adjectives differ between the
# in-domain and out-of-domain lexicons.

DETERMINERS = {"sg": ("this", "that", "every", "each", "a"), "pl": ("these", "those", "many", "several", "two")}
AUX = {
    "prog": {"sg": "is", "pl": "are"},
    "past_prog": {"sg": "was", "pl": "were"},
    "perfect": {"sg": "has", "pl": "have"},
    "neg": {"sg": "does not", "pl": "do not"},
}
PREPOSITIONS = ("in", "near", "behind", "under", "beside")

# noun: (singular, plural); verb: (3sg, base, -ing, participle)
ID_LEXICON = {
    "nouns": [
        ("dog", "dogs"), ("cat", "cats"), ("teacher", "teachers"), ("bird", "birds"), ("farmer", "farmers"),
        ("student", "students"), ("doctor", "doctors"), ("horse", "horses"), ("singer", "singers"), ("baker", "bakers"),
        ("pilot", "pilots"), ("girl", "girls"), ("boy", "boys"), ("king", "kings"), ("nurse", "nurses"),
        ("painter", "painters"), ("writer", "writers"), ("tiger", "tigers"), ("monkey", "monkeys"), ("sailor", "sailors"),
    ],
    "verbs": [
        ("runs", "run", "running", "run"), ("sings", "sing", "singing", "sung"), ("sleeps", "sleep", "sleeping", "slept"),
        ("jumps", "jump", "jumping", "jumped"), ("walks", "walk", "walking", "walked"), ("laughs", "laugh", "laughing", "laughed"),
        ("swims", "swim", "swimming", "swum"), ("waits", "wait", "waiting", "waited"), ("works", "work", "working", "worked"),
        ("plays", "play", "playing", "played"), ("reads", "read", "reading", "read"), ("cooks", "cook", "cooking", "cooked"),
        ("dances", "dance", "dancing", "danced"), ("climbs", "climb", "climbing", "climbed"), ("shouts", "shout", "shouting", "shouted"),
        ("writes", "write", "writing", "written"), ("eats", "eat", "eating", "eaten"), ("smiles", "smile", "smiling", "smiled"),
        ("rests", "rest", "resting", "rested"), ("studies", "study", "studying", "studied"),
    ],
    "adjectives": ["old", "young", "happy", "tall", "small", "quiet", "brave", "busy"],
    "places": [("park", "parks"), ("house", "houses"), ("garden", "gardens"), ("river", "rivers"), ("school", "schools")],
}
OOD_LEXICON = {
    "nouns": [
        ("wolf", "wolves"), ("child", "children"), ("mouse", "mice"), ("goose", "geese"), ("hero", "heroes"),
        ("fox", "foxes"), ("lady", "ladies"), ("thief", "thieves"), ("witch", "witches"), ("puppy", "puppies"),
        ("judge", "judges"), ("chef", "chefs"), ("poet", "poets"), ("clerk", "clerks"), ("guard", "guards"),
    ],
    "verbs": [
        ("cries", "cry", "crying", "cried"), ("flies", "fly", "flying", "flown"), ("hides", "hide", "hiding", "hidden"),
        ("sits", "sit", "sitting", "sat"), ("digs", "dig", "digging", "dug"), ("whistles", "whistle", "whistling", "whistled"),
        ("prays", "pray", "praying", "prayed"), ("yells", "yell", "yelling", "yelled"), ("hums", "hum", "humming", "hummed"),
        ("sneezes", "sneeze", "sneezing", "sneezed"), ("wanders", "wander", "wandering", "wandered"), ("shivers", "shiver", "shivering", "shivered"),
    ],
    "adjectives": ["clever", "angry", "lazy", "gentle", "strange", "proud"],
    "places": [("forest", "forests"), ("castle", "castles"), ("tower", "towers"), ("cave", "caves"), ("meadow", "meadows")],
}
VP_KINDS = ("simple", "prog", "past_prog", "perfect", "neg")
SPLITS = ("train", "id_eval", "ood_eval")


def content_words(lexicon: dict) -> set[str]:
    words = set(lexicon["adjectives"])
    for key in ("nouns", "verbs", "places"):
        for forms in lexicon[key]:
            words.update(w for form in forms for w in form.split())
    return words


def _pick(rng: np.random.Generator, seq):
    return seq[int(rng.integers(len(seq)))]


# Subjects lean singular, as in natural text. Labels stay balanced, but verb
# number alone is then mildly predictive, which gives training a first-order
# signal to follow before the agreement interaction is learned.
SINGULAR_RATE = 0.7


def _sentence(lex: dict, rng: np.random.Generator, acceptable: bool) -> str:
    num = "sg" if rng.random() < SINGULAR_RATE else "pl"
    verb_num = num if acceptable else ("pl" if num == "sg" else "sg")
    words = [_pick(rng, DETERMINERS[num])]
    if rng.random() < 0.4:
        words.append(_pick(rng, lex["adjectives"]))
    noun = _pick(rng, lex["nouns"])
    words.append(noun[0] if num == "sg" else noun[1])
    verb = _pick(rng, lex["verbs"])
    kind = _pick(rng, VP_KINDS)
    if kind == "simple":
        words.append(verb[0] if verb_num == "sg" else verb[1])
    elif kind == "perfect":
        words += [AUX[kind][verb_num], verb[3]]
    elif kind == "neg":
        words += [AUX[kind][verb_num], verb[1]]
    else:
        words += [AUX[kind][verb_num], verb[2]]
    if rng.random() < 0.5:
        place = _pick(rng, lex["places"])
        words += [_pick(rng, PREPOSITIONS), "the", place[0] if rng.random() < 0.5 else place[1]]
    if words[0] == "a" and words[1][0] in "aeiou":
        words[0] = "an"
    text = " ".join(words)
    return text[0].upper() + text[1:] + "."


def generate_synthetic(n: int, rng: np.random.Generator, split: str = "train") -> list[Example]:
    """Label-balanced agreement sentences; ``ood_eval`` uses a disjoint content lexicon."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; choose from {SPLITS}")
    lex = OOD_LEXICON if split == "ood_eval" else ID_LEXICON
    labels = np.array([1] * (n // 2) + [0] * (n - n // 2))
    labels = labels[rng.permutation(n)]
    return [Example(sentence=_sentence(lex, rng, bool(y)), label=int(y), source=f"synthetic-{split}") for y in labels]


@dataclass
class Splits:
    train: list[Example]
    id_eval: list[Example]
    ood_eval: list[Example]

    def items(self):
        return (("train", self.train), ("id_eval", self.id_eval), ("ood_eval", self.ood_eval))


def synthetic_splits(n_train: int, seed: int, n_eval: int | None = None) -> Splits:
    """Train / ID-eval / OOD-eval splits from independent child streams of ``seed``."""
    n_eval = n_train // 4 if n_eval is None else n_eval
    streams = np.random.SeedSequence(seed).spawn(3)
    gens = [np.random.Generator(np.random.PCG64(s)) for s in streams]
    return Splits(
        train=generate_synthetic(n_train, gens[0], "train"),
        id_eval=generate_synthetic(n_eval, gens[1], "id_eval"),
        ood_eval=generate_synthetic(n_eval, gens[2], "ood_eval"),
    )


def write_splits(splits: Splits, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stats = {}
    for name, examples in splits.items():
        write_jsonl(examples, out / f"{name}.jsonl")
        stats[name] = label_stats(examples)
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return stats


def read_splits(data_dir) -> Splits:
    d = Path(data_dir)
    return Splits(*(read_jsonl(d / f"{name}.jsonl") for name in SPLITS))
