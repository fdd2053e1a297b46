"""Synthetic corpora with planted token roles, relations and paired segments.

Sentences are built from templates of slot symbols:

    S  subject phrase: one SUBJECT_MARK token followed by 0..3 NOUN modifiers
    V  optional NEGATION (with the grammar's negation probability) then a VERB
    O  OBJECT_MARK followed by a NOUN
    F  FILLER token
    P  PRONOUN token

Each sentence carries one ground-truth link between the verb and the subject
phrase, the analogue of a predicate and its core frame element.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from attnatlas.encoder import CLS_ID, MASK_ID, SEP_ID, TokenSequence
from attnatlas.errors import DataError
from attnatlas.numerics import Rng


class TokenRole(str, enum.Enum):
    NOUN = "NOUN"
    VERB = "VERB"
    PRONOUN = "PRONOUN"
    SUBJECT_MARK = "SUBJECT_MARK"
    OBJECT_MARK = "OBJECT_MARK"
    NEGATION = "NEGATION"
    FILLER = "FILLER"
    CLS = "CLS"
    SEP = "SEP"


CONTENT_ROLES = (
    TokenRole.NOUN, TokenRole.VERB, TokenRole.PRONOUN, TokenRole.SUBJECT_MARK,
    TokenRole.OBJECT_MARK, TokenRole.NEGATION, TokenRole.FILLER,
)
# relative share of the content vocabulary per role
_ROLE_WEIGHTS = {
    TokenRole.NOUN: 14, TokenRole.VERB: 10, TokenRole.PRONOUN: 6, TokenRole.SUBJECT_MARK: 4,
    TokenRole.OBJECT_MARK: 4, TokenRole.NEGATION: 6, TokenRole.FILLER: 17,
}
_NAME_PREFIX = {
    TokenRole.NOUN: "noun", TokenRole.VERB: "verb", TokenRole.PRONOUN: "pron",
    TokenRole.SUBJECT_MARK: "subj", TokenRole.OBJECT_MARK: "obj",
    TokenRole.NEGATION: "neg", TokenRole.FILLER: "fill",
}
SPECIAL_NAMES = {CLS_ID: "[CLS]", SEP_ID: "[SEP]", MASK_ID: "[MASK]"}
N_SPECIAL = 3
MIN_PER_ROLE = 4

DEFAULT_TEMPLATES = (
    "S V O",
    "F S V O",
    "S F V O",
    "S F F V O P",
    "F S F V O F",
    "P S V O F",
    "S P F V O",
    "F S F F V O F P",
)


def partition_vocab(vocab_size: int) -> dict:
    """Split ids [3, vocab_size) into contiguous, disjoint role blocks."""
    n_content = vocab_size - N_SPECIAL
    if n_content < MIN_PER_ROLE * len(CONTENT_ROLES):
        raise ValueError(f"vocab_size {vocab_size} too small for {MIN_PER_ROLE} tokens per role")
    total_w = sum(_ROLE_WEIGHTS.values())
    sizes = {r: max(MIN_PER_ROLE, n_content * _ROLE_WEIGHTS[r] // total_w) for r in CONTENT_ROLES}
    # hand leftovers (or overdraft) to FILLER
    sizes[TokenRole.FILLER] += n_content - sum(sizes.values())
    if sizes[TokenRole.FILLER] < MIN_PER_ROLE:
        raise ValueError(f"vocab_size {vocab_size} too small for the role weights")
    out, start = {}, N_SPECIAL
    for r in CONTENT_ROLES:
        out[r] = tuple(range(start, start + sizes[r]))
        start += sizes[r]
    return out


@dataclass(frozen=True)
class SyntheticGrammar:
    vocab_size: int = 64
    templates: tuple = DEFAULT_TEMPLATES
    negation_prob: float = 0.5
    corruption_rate: float = 0.5
    shuffle_prob: float = 0.5
    corrupt_fraction: float = 1.0
    max_subject_modifiers: int = 3
    seed: int = 0
    partition: dict = field(default=None, compare=False)

    def __post_init__(self):
        for name in ("negation_prob", "corruption_rate", "shuffle_prob", "corrupt_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.partition is None:
            object.__setattr__(self, "partition", partition_vocab(self.vocab_size))
        seen = set()
        for ids in self.partition.values():
            if seen & set(ids):
                raise ValueError("role vocabularies overlap")
            seen |= set(ids)
        for t in self.templates:
            if not set(t.split()) <= set("SVOFP"):
                raise ValueError(f"unknown slot in template {t!r}")
        object.__setattr__(self, "_role_of", {i: r for r, ids in self.partition.items() for i in ids})

    def role_of(self, token_id: int) -> TokenRole:
        if token_id == CLS_ID:
            return TokenRole.CLS
        if token_id == SEP_ID:
            return TokenRole.SEP
        try:
            return self._role_of[token_id]
        except KeyError:
            raise DataError(f"token id {token_id} has no role in this grammar") from None

    def token_name(self, token_id: int) -> str:
        if token_id in SPECIAL_NAMES:
            return SPECIAL_NAMES[token_id]
        role = self.role_of(token_id)
        return f"{_NAME_PREFIX[role]}{self.partition[role].index(token_id)}"

    def token_id(self, name: str) -> int:
        name = name.strip()
        for i, n in SPECIAL_NAMES.items():
            if n == name:
                return i
        if name.isdigit():
            return int(name)
        for role, prefix in _NAME_PREFIX.items():
            if name.startswith(prefix) and name[len(prefix):].isdigit():
                idx = int(name[len(prefix):])
                if idx < len(self.partition[role]):
                    return self.partition[role][idx]
        raise DataError(f"unknown token {name!r}")

    def tokenize(self, tokens) -> list[int]:
        return [self.token_id(t) for t in tokens]


@dataclass(frozen=True)
class Example:
    seq: TokenSequence
    roles: tuple
    label: int = 0
    relation_pairs: tuple = ()  # ((pred_start, pred_stop), (elem_start, elem_stop)), half-open

    def __post_init__(self):
        object.__setattr__(self, "roles", tuple(TokenRole(r) for r in self.roles))
        object.__setattr__(
            self, "relation_pairs",
            tuple((tuple(map(int, a)), tuple(map(int, b))) for a, b in self.relation_pairs),
        )
        if len(self.roles) != self.seq.length:
            raise DataError(f"{len(self.roles)} roles for a sequence of length {self.seq.length}")
        for span_pair in self.relation_pairs:
            for start, stop in span_pair:
                if not 0 <= start < stop <= self.seq.length:
                    raise DataError(f"span ({start}, {stop}) outside a sequence of length {self.seq.length}")

    @property
    def segments(self) -> int:
        return self.seq.n_segments

    @property
    def n_words(self) -> int:
        """Sentence length, special tokens excluded."""
        return self.seq.length - len(self.seq.special_positions)

    def positions_with_role(self, role) -> list[int]:
        role = TokenRole(role)
        return [i for i, r in enumerate(self.roles) if r is role]


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------


def _sentence(grammar: SyntheticGrammar, rng: Rng):
    """One sentence: (ids, roles, verb_span, subject_span), spans local and half-open."""
    part = grammar.partition
    ids, roles = [], []
    verb_span = subj_span = None

    def emit(role):
        ids.append(rng.choice(part[role]))
        roles.append(role)

    template = rng.choice(grammar.templates)
    for slot in template.split():
        if slot == "S":
            start = len(ids)
            emit(TokenRole.SUBJECT_MARK)
            for _ in range(rng.integer(grammar.max_subject_modifiers + 1)):
                emit(TokenRole.NOUN)
            subj_span = (start, len(ids))
        elif slot == "V":
            if rng.bernoulli(grammar.negation_prob):
                emit(TokenRole.NEGATION)
            verb_span = (len(ids), len(ids) + 1)
            emit(TokenRole.VERB)
        elif slot == "O":
            emit(TokenRole.OBJECT_MARK)
            emit(TokenRole.NOUN)
        elif slot == "F":
            emit(TokenRole.FILLER)
        elif slot == "P":
            emit(TokenRole.PRONOUN)
    return ids, roles, verb_span, subj_span


def _shift(span, by):
    return (span[0] + by, span[1] + by)


def _rng_for(grammar: SyntheticGrammar, stream: int, seed: int | None) -> Rng:
    return Rng(grammar.seed if seed is None else seed).spawn(stream)


def generate_single_task(grammar: SyntheticGrammar, n: int, seed: int | None = None) -> list[Example]:
    """One-segment examples labelled 1 iff a NEGATION token is present."""
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng_for(grammar, 1, seed)
    out = []
    for _ in range(n):
        ids, roles, verb, subj = _sentence(grammar, rng)
        full = [CLS_ID] + ids + [SEP_ID]
        label = int(TokenRole.NEGATION in roles)
        out.append(
            Example(
                TokenSequence(full, [0] * len(full)),
                [TokenRole.CLS] + roles + [TokenRole.SEP],
                label,
                ((_shift(verb, 1), _shift(subj, 1)),),
            )
        )
    return out


def _corrupt(grammar, ids, roles, rng):
    """Replace a fraction (at least one) of tokens by other tokens of the same role."""
    ids = list(ids)
    k = max(1, int(round(grammar.corrupt_fraction * len(ids))))
    for pos in rng.sample_without_replacement(len(ids), k):
        pool = [t for t in grammar.partition[roles[pos]] if t != ids[pos]]
        ids[pos] = rng.choice(pool)
    return ids


def generate_pair_task(grammar: SyntheticGrammar, n: int, seed: int | None = None) -> list[Example]:
    """Two-segment duplicate detection.

    Segment B is a copy of segment A (label 1) or, with probability
    ``corruption_rate``, a corrupted copy (label 0). Either is shuffled with
    probability ``shuffle_prob``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = _rng_for(grammar, 2, seed)
    out = []
    for _ in range(n):
        a_ids, a_roles, verb, subj = _sentence(grammar, rng)
        corrupted = rng.bernoulli(grammar.corruption_rate)
        b_ids = _corrupt(grammar, a_ids, a_roles, rng) if corrupted else list(a_ids)
        b_roles = list(a_roles)
        if rng.bernoulli(grammar.shuffle_prob):
            order = rng.shuffle(list(range(len(b_ids))))
            b_ids = [b_ids[i] for i in order]
            b_roles = [b_roles[i] for i in order]
        # a corruption that happens to reproduce A is still a duplicate
        label = int(sorted(b_ids) == sorted(a_ids)) if corrupted else 1
        full = [CLS_ID] + a_ids + [SEP_ID] + b_ids + [SEP_ID]
        segs = [0] * (len(a_ids) + 2) + [1] * (len(b_ids) + 1)
        out.append(
            Example(
                TokenSequence(full, segs),
                [TokenRole.CLS] + a_roles + [TokenRole.SEP] + b_roles + [TokenRole.SEP],
                label,
                ((_shift(verb, 1), _shift(subj, 1)),),
            )
        )
    return out


def generate_relation_annotations(grammar: SyntheticGrammar, n: int, seed: int | None = None) -> list[Example]:
    """Single sentences whose relation_pairs link each verb to its subject phrase."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if not all("S" in t.split() and "V" in t.split() for t in grammar.templates):
        raise DataError("every template needs a subject (S) and a verb (V) slot")
    rng = _rng_for(grammar, 3, seed)
    out = []
    for _ in range(n):
        ids, roles, verb, subj = _sentence(grammar, rng)
        full = [CLS_ID] + ids + [SEP_ID]
        out.append(
            Example(
                TokenSequence(full, [0] * len(full)),
                [TokenRole.CLS] + roles + [TokenRole.SEP],
                0,
                ((_shift(verb, 1), _shift(subj, 1)),),
            )
        )
    return out


def mask_tokens(example: Example, mask_rate: float, rng: Rng):
    """Mask non-special positions independently at ``mask_rate``.

    If the draw masks nothing, one position chosen uniformly is masked
    instead, so tiny rates mask exactly one token. Returns
    ``(masked_seq, target_ids, positions)``.
    """
    if not 0.0 < mask_rate < 1.0:
        raise ValueError("mask_rate must be in (0, 1)")
    seq = example.seq
    special = set(seq.special_positions)
    candidates = [i for i in range(seq.length) if i not in special]
    if not candidates:
        raise DataError("sequence has no maskable positions")
    draws = rng.uniform(len(candidates))
    positions = [p for p, u in zip(candidates, draws) if u < mask_rate]
    if not positions:
        positions = [rng.choice(candidates)]
    ids = list(seq.ids)
    targets = [ids[p] for p in positions]
    for p in positions:
        ids[p] = MASK_ID
    return seq.with_ids(ids), targets, positions


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def metric(kind: str, predictions, labels) -> float:
    """``accuracy`` or positive-class ``f1`` (0 when precision + recall is 0)."""
    pred = np.asarray(predictions, dtype=int)
    gold = np.asarray(labels, dtype=int)
    if pred.shape != gold.shape:
        raise DataError(f"{pred.size} predictions for {gold.size} labels")
    if pred.size == 0:
        raise DataError("metric of an empty set")
    if kind == "accuracy":
        return float((pred == gold).mean())
    if kind == "f1":
        tp = int(((pred == 1) & (gold == 1)).sum())
        fp = int(((pred == 1) & (gold != 1)).sum())
        fn = int(((pred != 1) & (gold == 1)).sum())
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        if precision + recall == 0:
            return 0.0
        return 2 * precision * recall / (precision + recall)
    raise ValueError(f"unknown metric {kind!r}")


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------


def example_to_json(ex: Example) -> dict:
    return {
        "ids": list(ex.seq.ids),
        "segment_ids": list(ex.seq.segment_ids),
        "roles": [r.value for r in ex.roles],
        "label": ex.label,
        "relation_pairs": [[list(a), list(b)] for a, b in ex.relation_pairs],
    }


def example_from_json(obj: dict) -> Example:
    try:
        return Example(
            TokenSequence(obj["ids"], obj["segment_ids"]),
            obj["roles"],
            int(obj.get("label", 0)),
            tuple((tuple(a), tuple(b)) for a, b in obj.get("relation_pairs", [])),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"bad dataset record: {exc}") from None


def write_dataset(path, examples) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(example_to_json(ex), sort_keys=True) + "\n")


def read_dataset(path) -> list[Example]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            out.append(example_from_json(obj))
    return out


def read_feature_list(path, grammar: SyntheticGrammar) -> list[int]:
    """One token per line (name such as ``neg3`` or a bare integer id)."""
    tokens = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    ids = grammar.tokenize(t for t in tokens if t and not t.startswith("#"))
    if not ids:
        raise DataError(f"{path}: empty feature list")
    return ids
