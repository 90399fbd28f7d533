"""Vocabulary, preprocessing, triple-file loading and the synthetic toy task."""

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ContractViolation

PAD, BOS, EOS, UNK, SEP, PERSON, NUMBER = (
    "<pad>", "<bos>", "<eos>", "<unk>", "</s>", "<person>", "<number>")
# fixed order; these occupy ids 0..6
RESERVED = (PAD, BOS, EOS, UNK, SEP, PERSON, NUMBER)
FULL_VOCAB_CAP = 20000
VOCAB_HEADER = "# dgirl-vocab reserved(ids 0-6): " + " ".join(RESERVED)

ORACLE_INVALID = float("-inf")

_NUMBER_RE = re.compile(r"^[+-]?\d+([.,:]\d+)*$")


class Vocabulary:
    def __init__(self, tokens):
        tokens = list(tokens)
        if tuple(tokens[:len(RESERVED)]) != RESERVED:
            raise ContractViolation("vocabulary must start with the reserved block")
        if len(set(tokens)) != len(tokens):
            raise ContractViolation("duplicate tokens in vocabulary")
        self.itos = tokens
        self.stoi = {t: i for i, t in enumerate(tokens)}

    pad_id, bos_id, eos_id, unk_id, sep_id, person_id, number_id = range(7)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos

    @property
    def content_ids(self):
        return list(range(len(RESERVED), len(self.itos)))

    def encode(self, tokens):
        unk = self.unk_id
        return [self.stoi.get(t, unk) for t in tokens]

    def decode(self, ids, strip_eos=True):
        out = []
        for i in ids:
            if strip_eos and i == self.eos_id:
                break
            out.append(self.itos[i])
        return out

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(VOCAB_HEADER + "\n")
            for tok in self.itos[len(RESERVED):]:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines and lines[0].startswith("# dgirl-vocab"):
            lines = lines[1:]
        if lines and lines[-1] == "":
            lines = lines[:-1]
        return cls(list(RESERVED) + lines)


def build_vocab(utterances, cap=FULL_VOCAB_CAP):
    """Keep the ``cap - 7`` most frequent tokens; ties break lexicographically."""
    if cap <= len(RESERVED):
        raise ContractViolation(f"vocab cap must exceed {len(RESERVED)} reserved tokens")
    counts = Counter()
    n_utts = 0
    for utt in utterances:
        n_utts += 1
        counts.update(t for t in utt if t not in RESERVED)
    if n_utts == 0:
        raise ContractViolation("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[:cap - len(RESERVED)]]
    return Vocabulary(list(RESERVED) + keep)


def normalize_utterance(tokens, name_lexicon=frozenset()):
    """Lowercase, then map lexicon names to <person> and numerals to <number>."""
    out = []
    for tok in tokens:
        low = tok.lower()
        if low in RESERVED:
            out.append(low)
        elif low in name_lexicon:
            out.append(PERSON)
        elif _NUMBER_RE.match(low):
            out.append(NUMBER)
        else:
            out.append(low)
    return out


@dataclass(frozen=True)
class Dialogue:
    """One or two context utterances and a reply, all as token ids.

    The reply always ends with ``EOS``; no utterance contains ``PAD``.
    """

    context: tuple
    reply: tuple

    def __post_init__(self):
        ctx = tuple(tuple(int(i) for i in u) for u in self.context)
        reply = tuple(int(i) for i in self.reply)
        object.__setattr__(self, "context", ctx)
        object.__setattr__(self, "reply", reply)
        if len(ctx) not in (1, 2):
            raise ContractViolation(f"context must hold 1 or 2 utterances, got {len(ctx)}")
        if not reply or reply[-1] != Vocabulary.eos_id:
            raise ContractViolation("reply must end with EOS")
        for u in ctx + (reply,):
            if Vocabulary.pad_id in u:
                raise ContractViolation("PAD inside an utterance")
        if any(len(u) == 0 for u in ctx):
            raise ContractViolation("empty context utterance")


def make_dialogue(context_tokens, reply_tokens, vocab):
    ctx = tuple(tuple(vocab.encode(u)) for u in context_tokens)
    return Dialogue(ctx, tuple(vocab.encode(reply_tokens)) + (vocab.eos_id,))


def encode_context(dialogue, vocab):
    """Flatten the context into one id sequence with SEP between the two turns."""
    ctx = dialogue.context if isinstance(dialogue, Dialogue) else tuple(dialogue)
    if len(ctx) not in (1, 2):
        raise ContractViolation(f"context must hold 1 or 2 utterances, got {len(ctx)}")
    n = len(vocab)
    encoded = []
    for utt in ctx:
        if utt and isinstance(utt[0], str):
            encoded.append(vocab.encode(utt))
        else:
            encoded.append([i if 0 <= i < n else vocab.unk_id for i in utt])
    if len(encoded) == 1:
        return list(encoded[0])
    return encoded[0] + [vocab.sep_id] + encoded[1]


# triple files ----------------------------------------------------------------

class TripleFormatError(ContractViolation):
    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.lineno = lineno


@dataclass
class TripleLoad:
    dialogues: list
    dropped: int
    vocab: Vocabulary


def read_triples(path, name_lexicon=frozenset()):
    """Tokenised, normalised ``(turn1, turn2, turn3)`` per line.

    ``turn1`` may be empty, which denotes a single-turn context.
    """
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n").rstrip("\r")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise TripleFormatError(path, lineno, f"expected 3 tab-separated turns, got {len(parts)}")
            turns = [normalize_utterance(p.split(), name_lexicon) for p in parts]
            if not turns[1] or not turns[2]:
                raise TripleFormatError(path, lineno, "turns 2 and 3 must be non-empty")
            rows.append(turns)
    return rows


def load_triples(path, vocab=None, min_len=4, max_len=80, name_lexicon=frozenset(),
                 vocab_cap=FULL_VOCAB_CAP):
    """Load a triple file as Dialogues (context = turns 1-2, reply = turn 3 + EOS).

    Triples with any non-empty turn outside ``[min_len, max_len]`` tokens are
    dropped and counted.  Without ``vocab`` one is built from the kept rows.
    """
    rows = read_triples(path, name_lexicon)
    kept = []
    dropped = 0
    for turns in rows:
        if any(t and not (min_len <= len(t) <= max_len) for t in turns):
            dropped += 1
            continue
        kept.append(turns)
    if vocab is None:
        vocab = build_vocab([t for turns in kept for t in turns if t], vocab_cap) if kept \
            else Vocabulary(RESERVED)
    dialogues = []
    for t1, t2, t3 in kept:
        ctx = [t1, t2] if t1 else [t2]
        dialogues.append(make_dialogue(ctx, t3, vocab))
    return TripleLoad(dialogues, dropped, vocab)


def write_triples(path, dialogues, vocab):
    with open(path, "w", encoding="utf-8") as fh:
        for d in dialogues:
            ctx = [" ".join(vocab.decode(u, strip_eos=False)) for u in d.context]
            if len(ctx) == 1:
                ctx = [""] + ctx
            fh.write("\t".join(ctx + [" ".join(vocab.decode(d.reply))]) + "\n")


# toy task ------------------------------------------------------------------------

TOY_RULES = ("echo", "echo_or_next")


@dataclass(frozen=True)
class ToyTaskSpec:
    """Synthetic dialogue task whose reply distribution is known exactly.

    ``echo``: the reply repeats the last context token ``repeat`` times.
    ``echo_or_next``: with probability 1/2 as ``echo``; otherwise the next
    content token (cyclically) repeated ``repeat - 1`` times.
    """

    n_content: int = 20
    rule: str = "echo"
    repeat: int = 3
    turns: tuple = (1, 2)
    utterance_len: tuple = (3, 6)
    n_train: int = 2000
    n_valid: int = 200
    n_test: int = 200
    seed: int = 0
    length_bounds: tuple = (1, 12)

    def __post_init__(self):
        if self.rule not in TOY_RULES:
            raise ContractViolation(f"unknown toy rule {self.rule!r}")
        if self.n_content < 2 or self.repeat < 2:
            raise ContractViolation("toy task needs >= 2 content tokens and repeat >= 2")

    @property
    def max_reply_len(self):
        return self.repeat + 1

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text):
        raw = json.loads(text)
        for k in ("turns", "utterance_len", "length_bounds"):
            raw[k] = tuple(raw[k])
        return cls(**raw)


TOY_PRESETS = {
    "default": ToyTaskSpec(),
    "stochastic": ToyTaskSpec(rule="echo_or_next"),
}


def toy_vocab(spec):
    width = len(str(spec.n_content - 1))
    return Vocabulary(list(RESERVED) + [f"w{i:0{width}d}" for i in range(spec.n_content)])


class ToyOracle:
    """Exact reply distribution of a :class:`ToyTaskSpec`."""

    def __init__(self, spec, vocab):
        self.spec = spec
        self.vocab = vocab
        self._first = len(RESERVED)

    def _anchor(self, context):
        last = context[-1]
        if not last:
            raise ContractViolation("empty utterance in context")
        return last[-1]

    def replies(self, context):
        """All replies with non-zero probability as ``[(reply_ids, logprob)]``."""
        x = self._anchor(context)
        eos = self.vocab.eos_id
        echo = (x,) * self.spec.repeat + (eos,)
        if self.spec.rule == "echo":
            return [(echo, 0.0)]
        nxt = self._first + (x - self._first + 1) % self.spec.n_content
        shifted = (nxt,) * (self.spec.repeat - 1) + (eos,)
        return [(echo, math.log(0.5)), (shifted, math.log(0.5))]

    def logprob(self, context, reply):
        reply = tuple(reply)
        for cand, lp in self.replies(context):
            if cand == reply:
                return lp
        return ORACLE_INVALID

    def sample(self, context, rng):
        options = self.replies(context)
        if len(options) == 1:
            return options[0][0]
        probs = np.exp([lp for _, lp in options])
        return options[int(rng.choice(len(options), p=probs / probs.sum()))][0]


@dataclass
class ToyCorpus:
    spec: ToyTaskSpec
    vocab: Vocabulary
    oracle: ToyOracle
    train: list = field(default_factory=list)
    valid: list = field(default_factory=list)
    test: list = field(default_factory=list)


def gen_toy_corpus(spec=TOY_PRESETS["default"]):
    """Sample disjoint train/valid/test splits (no context appears twice)."""
    vocab = toy_vocab(spec)
    oracle = ToyOracle(spec, vocab)
    rng = np.random.default_rng(spec.seed)
    first = len(RESERVED)
    total = spec.n_train + spec.n_valid + spec.n_test
    seen = set()
    dialogues = []
    attempts = 0
    while len(dialogues) < total:
        attempts += 1
        if attempts > 50 * total + 1000:
            raise ContractViolation("toy context space too small for the requested splits")
        n_turns = int(rng.integers(spec.turns[0], spec.turns[1] + 1))
        ctx = tuple(
            tuple(int(v) for v in first + rng.integers(
                0, spec.n_content, size=int(rng.integers(spec.utterance_len[0], spec.utterance_len[1] + 1))))
            for _ in range(n_turns))
        if ctx in seen:
            continue
        seen.add(ctx)
        dialogues.append(Dialogue(ctx, oracle.sample(ctx, rng)))
    a, b = spec.n_train, spec.n_train + spec.n_valid
    return ToyCorpus(spec, vocab, oracle, dialogues[:a], dialogues[a:b], dialogues[b:])
