"""Synthetic multiple-choice knowledge corpus with JSONL persistence.

Each topic owns a disjoint token range holding its entities, relations and
attributes, plus a random injective fact table ``(entity, relation) -> attribute``.
An example asks for the attribute of one entity and offers four options, one
correct and three distractors drawn from the same topic.

Prompt layout (token ids, fixed length 16)::

    INSTRUCTION CHOOSE LETTER | INPUT entity relation ? A o1 B o2 C o3 D o4 | RESPONSE

and the supervised answer is the option-label token that follows RESPONSE.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CapacityError, InvalidInputError, ParseError
from .nanomodel.model import Batch

PAD, INSTRUCTION, CHOOSE, LETTER, INPUT, QMARK, RESPONSE = 0, 1, 2, 3, 4, 5, 6
LABELS = ("A", "B", "C", "D")
LABEL_TOKENS = (8, 9, 10, 11)
FIRST_TOPIC_TOKEN = 16
SPLITS = ("train", "test", "attack")
DEFAULT_TOPIC_NAMES = (
    "physics", "chemistry", "biology", "earth_science", "language_science", "social_science",
)
INSTRUCTION_TOKENS = (INSTRUCTION, CHOOSE, LETTER)
SCHEMA_FIELDS = ("topic", "split", "instruction", "input", "options", "answer")


@dataclass(frozen=True)
class QaExample:
    topic: str
    split: str
    instruction: tuple[int, ...]
    input: tuple[int, ...]
    options: tuple[tuple[int, ...], ...]
    answer: str

    def __post_init__(self):
        if self.split not in SPLITS:
            raise InvalidInputError(f"split must be one of {SPLITS}, got {self.split!r}")
        if len(self.options) != 4:
            raise InvalidInputError("an example needs exactly 4 options")
        if self.answer not in LABELS:
            raise InvalidInputError(f"answer must be one of {LABELS}, got {self.answer!r}")

    @property
    def entity(self) -> int:
        return self.input[1]

    @property
    def relation(self) -> int:
        return self.input[2]

    @property
    def answer_index(self) -> int:
        return LABELS.index(self.answer)

    @property
    def correct_option(self) -> tuple[int, ...]:
        return self.options[self.answer_index]

    def prompt(self) -> list[int]:
        return [*self.instruction, *self.input, RESPONSE]

    def with_split(self, split: str) -> "QaExample":
        return QaExample(self.topic, split, self.instruction, self.input, self.options, self.answer)

    def to_json(self) -> dict:
        return {
            "topic": self.topic,
            "split": self.split,
            "instruction": list(self.instruction),
            "input": list(self.input),
            "options": [list(o) for o in self.options],
            "answer": self.answer,
        }


@dataclass
class TopicCorpus:
    """All examples of one topic; entity, attribute and fact sets derive from them."""

    topic: str
    examples: list[QaExample] = field(default_factory=list)

    def split(self, name: str) -> list[QaExample]:
        return [e for e in self.examples if e.split == name]

    @property
    def entities(self) -> list[int]:
        return sorted({e.entity for e in self.examples})

    @property
    def attributes(self) -> list[int]:
        return sorted({t for e in self.examples for o in e.options for t in o})

    @property
    def facts(self) -> dict[tuple[int, int], int]:
        return {(e.entity, e.relation): e.correct_option[0] for e in self.examples}

    def tokens(self) -> set[int]:
        return set(self.entities) | {e.relation for e in self.examples} | set(self.attributes)

    def __eq__(self, other):
        if not isinstance(other, TopicCorpus):
            return NotImplemented
        return self.topic == other.topic and self.examples == other.examples


# ---------------------------------------------------------------- generation


def _topic_name(i: int, topics: int) -> str:
    return DEFAULT_TOPIC_NAMES[i] if topics <= len(DEFAULT_TOPIC_NAMES) else f"topic{i}"


def _balanced_positions(n: int, rng: np.random.Generator) -> np.ndarray:
    pos = np.tile(np.arange(4), math.ceil(n / 4))[:n]
    return rng.permutation(pos)


def generate_corpus(
    seed: int = 0,
    topics: int = 6,
    entities_per_topic: int = 24,
    facts_per_entity: int = 1,
    examples_per_split: dict[str, int] | int | None = None,
    attributes_per_topic: int | None = None,
    vocab: int = 512,
) -> list[TopicCorpus]:
    """Deterministic corpus of ``topics`` topics with train and test splits.

    ``examples_per_split`` maps split name to count (default 600 train, 200 test);
    an int applies the same count to train and test. Train and test never share
    an identical (fact, option arrangement) item.
    """
    if examples_per_split is None:
        examples_per_split = {"train": 600, "test": 200}
    elif isinstance(examples_per_split, int):
        examples_per_split = {"train": examples_per_split, "test": examples_per_split}
    for name, val in (("topics", topics), ("entities_per_topic", entities_per_topic),
                      ("facts_per_entity", facts_per_entity)):
        if val < 1:
            raise InvalidInputError(f"{name} must be >= 1")
    if any(s not in ("train", "test") for s in examples_per_split):
        raise InvalidInputError("examples_per_split keys must be 'train' or 'test'")
    if any(n < 1 for n in examples_per_split.values()):
        raise InvalidInputError("example counts must be >= 1")

    n_facts = entities_per_topic * facts_per_entity
    n_attr = attributes_per_topic if attributes_per_topic is not None else max(4, n_facts + 8)
    if n_attr < max(4, n_facts):
        raise CapacityError(f"{n_attr} attributes cannot hold {n_facts} injective facts with 3 distractors")
    budget = (vocab - FIRST_TOPIC_TOKEN) // topics
    needed = entities_per_topic + facts_per_entity + n_attr
    if needed > budget:
        raise CapacityError(f"topic needs {needed} tokens but vocab {vocab} leaves {budget} per topic")
    per_pos_capacity = n_facts * math.perm(n_attr - 1, 3)
    total = sum(examples_per_split.values())
    if math.ceil(total / 4) > per_pos_capacity:
        raise CapacityError(
            f"{total} examples exceed capacity {4 * per_pos_capacity} of {n_facts} facts x {n_attr} attributes"
        )

    corpora = []
    for t in range(topics):
        rng = np.random.default_rng([seed, t])
        base = FIRST_TOPIC_TOKEN + t * budget
        entities = list(range(base, base + entities_per_topic))
        relations = list(range(base + entities_per_topic, base + entities_per_topic + facts_per_entity))
        attr_lo = base + entities_per_topic + facts_per_entity
        attributes = np.arange(attr_lo, attr_lo + n_attr)
        fact_keys = [(e, r) for e in entities for r in relations]
        fact_vals = rng.permutation(attributes)[:n_facts]
        facts = dict(zip(fact_keys, (int(v) for v in fact_vals)))

        splits = list(examples_per_split.items())
        positions = np.concatenate([_balanced_positions(n, rng) for _, n in splits])
        items = _sample_items(rng, fact_keys, facts, attributes, positions, per_pos_capacity)
        name = _topic_name(t, topics)
        examples, start = [], 0
        for split, count in splits:
            for (fact_key, opts, pos) in items[start:start + count]:
                ent, rel = fact_key
                inp = [INPUT, ent, rel, QMARK]
                for lab, o in zip(LABEL_TOKENS, opts):
                    inp += [lab, o]
                examples.append(QaExample(name, split, INSTRUCTION_TOKENS, tuple(inp),
                                          tuple((o,) for o in opts), LABELS[pos]))
            start += count
        corpora.append(TopicCorpus(name, examples))
    return corpora


def _sample_items(rng, fact_keys, facts, attributes, positions, per_pos_capacity):
    """Unique (fact, options, correct position) triples, one per requested position."""
    need = np.bincount(positions, minlength=4)
    enumerate_all = per_pos_capacity <= 20000
    pools: dict[int, list] = {}
    if enumerate_all:
        for pos in range(4):
            cands = []
            for key in fact_keys:
                others = [int(a) for a in attributes if a != facts[key]]
                for d in itertools.permutations(others, 3):
                    cands.append((key, d))
            pick = rng.choice(len(cands), size=need[pos], replace=False)
            pools[pos] = [cands[i] for i in pick]
    used = set()
    out = []
    for pos in positions:
        pos = int(pos)
        if enumerate_all:
            key, d = pools[pos].pop()
        else:
            while True:
                key = fact_keys[rng.integers(len(fact_keys))]
                correct = facts[key]
                others = attributes[attributes != correct]
                d = tuple(int(x) for x in rng.choice(others, size=3, replace=False))
                if (key, d, pos) not in used:
                    break
        used.add((key, d, pos))
        opts = list(d)
        opts.insert(pos, facts[key])
        out.append((key, opts, pos))
    return out


def related_attack_split(corpus: TopicCorpus, fraction: float = 0.25, seed: int = 0):
    """Partition a topic by entity into an unlearn part and a held-out attack part.

    ``fraction`` of the entities (rounded, at least one on each side) go to the
    attack part; all their examples are relabelled with split ``attack``. Both
    parts keep drawing options from the same attribute vocabulary.
    """
    if not 0.0 < fraction < 1.0:
        raise InvalidInputError(f"fraction must lie in (0, 1), got {fraction}")
    entities = corpus.entities
    if len(entities) < 2:
        raise InvalidInputError("related_attack_split needs at least 2 entities")
    n_attack = min(max(int(round(fraction * len(entities))), 1), len(entities) - 1)
    rng = np.random.default_rng([seed, len(entities)])
    attack_set = {entities[i] for i in rng.permutation(len(entities))[:n_attack]}
    unlearn = TopicCorpus(corpus.topic, [e for e in corpus.examples if e.entity not in attack_set])
    attack = TopicCorpus(corpus.topic,
                         [e.with_split("attack") for e in corpus.examples if e.entity in attack_set])
    return unlearn, attack


# ---------------------------------------------------------------- batching


def to_batch(examples) -> Batch:
    """Right-padded prompts with the answer label supervised at the last prompt token."""
    examples = list(examples)
    if not examples:
        raise InvalidInputError("cannot batch zero examples")
    prompts = [e.prompt() for e in examples]
    L = max(len(p) for p in prompts)
    tokens = np.full((len(prompts), L), PAD, dtype=np.int64)
    labels = np.zeros_like(tokens)
    mask = np.zeros(tokens.shape, dtype=bool)
    for i, (p, e) in enumerate(zip(prompts, examples)):
        tokens[i, :len(p)] = p
        labels[i, len(p) - 1] = LABEL_TOKENS[e.answer_index]
        mask[i, len(p) - 1] = True
    return Batch(tokens, labels, mask)


def option_label_tokens(examples) -> np.ndarray:
    """Per-example option-label token ids, shape ``(n, 4)``."""
    return np.tile(np.asarray(LABEL_TOKENS), (len(list(examples)), 1))


# ---------------------------------------------------------------- JSONL


def write_jsonl(path, corpora) -> None:
    lines = [
        json.dumps(e.to_json(), separators=(",", ":"))
        for c in corpora
        for e in c.examples
    ]
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8"))


def _int_list(value, name, lineno):
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ParseError(f"field {name!r} must be a list of integers", lineno)
    return tuple(value)


def _parse_line(line: str, lineno: int) -> QaExample:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed JSON ({exc.msg} at column {exc.colno})", lineno) from None
    if not isinstance(obj, dict):
        raise ParseError("record must be a JSON object", lineno)
    unknown = sorted(set(obj) - set(SCHEMA_FIELDS))
    if unknown:
        raise ParseError(f"unknown field(s) {unknown}", lineno)
    missing = [f for f in SCHEMA_FIELDS if f not in obj]
    if missing:
        raise ParseError(f"missing field(s) {missing}", lineno)
    if not isinstance(obj["topic"], str):
        raise ParseError("field 'topic' must be a string", lineno)
    if obj["split"] not in SPLITS:
        raise ParseError(f"field 'split' must be one of {SPLITS}", lineno)
    if obj["answer"] not in LABELS:
        raise ParseError(f"field 'answer' must be one of {LABELS}, got {obj['answer']!r}", lineno)
    opts = obj["options"]
    if not isinstance(opts, list) or len(opts) != 4:
        raise ParseError("field 'options' must hold exactly 4 options", lineno)
    return QaExample(
        obj["topic"], obj["split"],
        _int_list(obj["instruction"], "instruction", lineno),
        _int_list(obj["input"], "input", lineno),
        tuple(_int_list(o, "options", lineno) for o in opts),
        obj["answer"],
    )


def read_jsonl(path) -> list[TopicCorpus]:
    """Parse a corpus file; topics keep their order of first appearance."""
    raw = Path(path).read_bytes().decode("utf-8")
    lines = raw.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    by_topic: dict[str, TopicCorpus] = {}
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            raise ParseError("blank line", lineno)
        ex = _parse_line(line, lineno)
        by_topic.setdefault(ex.topic, TopicCorpus(ex.topic)).examples.append(ex)
    return list(by_topic.values())
