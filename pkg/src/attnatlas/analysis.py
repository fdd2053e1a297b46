"""Measurements over captured attention maps.

Every checkpoint-level function has a tensor-level twin taking a list of
``(n_layers, n_heads, L, L)`` arrays aligned with the examples, so the
procedures can be checked on hand-built tensors.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import dataclass, field

import numpy as np

from attnatlas.encoder import NO_ABLATION, AblationSpec, Checkpoint, HeadCoord, capture_attention
from attnatlas.errors import DataError
from attnatlas.numerics import Rng, softmax_rows
from attnatlas.tasks import CONTENT_ROLES, Example, TokenRole


class PatternClass(str, enum.Enum):
    VERTICAL = "Vertical"
    DIAGONAL = "Diagonal"
    VERTICAL_DIAGONAL = "VerticalDiagonal"
    BLOCK = "Block"
    HETEROGENEOUS = "Heterogeneous"


PATTERN_CLASSES = tuple(PatternClass)


@dataclass(frozen=True)
class PatternStats:
    diag_mass: float
    vert_mass: float
    block_mass: float
    L: int
    n_segments: int


@dataclass(frozen=True)
class Thresholds:
    vertical: float = 0.5
    diagonal: float = 0.5
    mixed: float = 0.25  # lower bound for both masses in VerticalDiagonal, upper bound for the other mass otherwise
    block: float = 0.5
    width: int = 1


@dataclass
class HeadScoreMap:
    scores: np.ndarray  # (n_layers, n_heads)
    n_examples: int

    def ranked(self) -> list:
        """``(HeadCoord, score)`` pairs, highest score first, ties by coordinate."""
        items = [(HeadCoord(l, h), float(s)) for (l, h), s in np.ndenumerate(self.scores)]
        return sorted(items, key=lambda t: (-t[1], t[0]))

    def layer_means(self) -> np.ndarray:
        return self.scores.mean(axis=1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "head", "score"])
            for (l, h), s in np.ndenumerate(self.scores):
                w.writerow([l, h, repr(float(s))])


def attention_tensors(ck: Checkpoint, dataset, ablation: AblationSpec = NO_ABLATION) -> list:
    return [capture_attention(ck.config, ck.params, ex.seq, ablation) for ex in dataset]


# ---------------------------------------------------------------------------
# pattern taxonomy
# ---------------------------------------------------------------------------


def pattern_features(amap, special_positions, segment_ids, width: int = 1) -> PatternStats:
    """Geometric masses of one map, each normalised by the total mass L."""
    amap = np.asarray(amap, dtype=np.float64)
    L = amap.shape[0]
    if amap.shape != (L, L) or len(segment_ids) != L:
        raise DataError(f"map of shape {amap.shape} does not fit {len(segment_ids)} segment ids")
    idx = np.arange(L)
    band = np.abs(idx[:, None] - idx[None, :]) <= width
    diag = amap[band].sum() / L
    vert = amap[:, list(special_positions)].sum() / L if len(special_positions) else 0.0
    segs = np.asarray(segment_ids)
    same = segs[:, None] == segs[None, :]
    within = amap[same].sum()
    block = (within - (amap.sum() - within)) / L
    return PatternStats(float(diag), float(vert), float(block), L, len(set(segment_ids)))


def classify_pattern(stats: PatternStats, thresholds: Thresholds = Thresholds()) -> PatternClass:
    t = thresholds
    if stats.vert_mass >= t.vertical and stats.diag_mass < t.mixed:
        return PatternClass.VERTICAL
    if stats.diag_mass >= t.diagonal and stats.vert_mass < t.mixed:
        return PatternClass.DIAGONAL
    if stats.vert_mass >= t.mixed and stats.diag_mass >= t.mixed:
        return PatternClass.VERTICAL_DIAGONAL
    if stats.n_segments >= 2 and stats.block_mass >= t.block:
        return PatternClass.BLOCK
    return PatternClass.HETEROGENEOUS


def classify_map(amap, special_positions, segment_ids, thresholds: Thresholds = Thresholds()) -> PatternClass:
    return classify_pattern(pattern_features(amap, special_positions, segment_ids, thresholds.width), thresholds)


@dataclass
class PatternDistribution:
    """Class counts per (example, layer, head) map."""

    counts: np.ndarray  # (n_layers, n_heads, n_classes)
    n_examples: int

    @property
    def n_maps(self) -> int:
        return int(self.counts.sum())

    def fractions(self) -> dict:
        total = self.counts.sum()
        per_class = self.counts.sum(axis=(0, 1))
        return {c: float(per_class[i] / total) for i, c in enumerate(PATTERN_CLASSES)}

    def head_fractions(self) -> np.ndarray:
        return self.counts / self.counts.sum(axis=2, keepdims=True)

    def to_csv(self, overall_path, per_head_path) -> None:
        with open(overall_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "fraction"])
            for c, f in self.fractions().items():
                w.writerow([c.value, repr(f)])
        with open(per_head_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["layer", "head", "class", "count"])
            for (l, h, i), n in np.ndenumerate(self.counts):
                w.writerow([l, h, PATTERN_CLASSES[i].value, int(n)])


def distribution_from_tensors(tensors, examples, thresholds: Thresholds = Thresholds()) -> PatternDistribution:
    if not examples:
        raise DataError("pattern distribution of an empty dataset")
    n_layers, n_heads = tensors[0].shape[:2]
    counts = np.zeros((n_layers, n_heads, len(PATTERN_CLASSES)), dtype=np.int64)
    index = {c: i for i, c in enumerate(PATTERN_CLASSES)}
    for att, ex in zip(tensors, examples):
        for l in range(n_layers):
            for h in range(n_heads):
                c = classify_map(att[l, h], ex.seq.special_positions, ex.seq.segment_ids, thresholds)
                counts[l, h, index[c]] += 1
    return PatternDistribution(counts, len(examples))


def pattern_distribution(ck: Checkpoint, dataset, limit: int = 1000, thresholds: Thresholds = Thresholds(),
                         ablation: AblationSpec = NO_ABLATION) -> PatternDistribution:
    """Classify every map of the first ``limit`` examples."""
    examples = list(dataset)[:limit]
    return distribution_from_tensors(attention_tensors(ck, examples, ablation), examples, thresholds)


# canonical maps -------------------------------------------------------------


@dataclass(frozen=True)
class MapLayout:
    special_positions: tuple
    segment_ids: tuple

    @property
    def L(self) -> int:
        return len(self.segment_ids)


def make_layout(words_a: int, words_b: int = 0) -> MapLayout:
    """[CLS] a-words [SEP] (b-words [SEP])."""
    if words_b:
        L = words_a + words_b + 3
        special = (0, words_a + 1, L - 1)
        segs = (0,) * (words_a + 2) + (1,) * (words_b + 1)
    else:
        L = words_a + 2
        special = (0, L - 1)
        segs = (0,) * L
    return MapLayout(special, segs)


def canonical_map(cls: PatternClass, layout: MapLayout, rng: Rng | None = None) -> np.ndarray:
    """Noise-free prototype of a class.

    Vertical: every row on the special columns. Diagonal: every row on its
    previous and following token. VerticalDiagonal: the average of the two.
    Block: every row uniform over the words of its own segment (needs two
    segments). Heterogeneous: rows are softmax of N(0, 1.5^2) logits
    (needs ``rng``). Splits between columns are even unless ``rng`` is
    given, in which case they are uniform random.
    """
    L = layout.L
    special = list(layout.special_positions)
    m = np.zeros((L, L))

    def split(k):
        if rng is None:
            return np.full(k, 1.0 / k)
        w = rng.uniform(k) + 0.05
        return w / w.sum()

    if cls is PatternClass.VERTICAL:
        for i in range(L):
            m[i, special] = split(len(special))
    elif cls is PatternClass.DIAGONAL:
        for i in range(L):
            nbrs = [j for j in (i - 1, i + 1) if 0 <= j < L]
            m[i, nbrs] = split(len(nbrs))
    elif cls is PatternClass.VERTICAL_DIAGONAL:
        m = 0.5 * canonical_map(PatternClass.VERTICAL, layout, rng) + 0.5 * canonical_map(PatternClass.DIAGONAL, layout, rng)
    elif cls is PatternClass.BLOCK:
        segs = np.asarray(layout.segment_ids)
        if len(set(layout.segment_ids)) < 2:
            raise ValueError("a block map needs two segments")
        words = np.ones(L, dtype=bool)
        words[special] = False
        for i in range(L):
            cols = np.flatnonzero((segs == segs[i]) & words)
            m[i, cols] = split(len(cols))
    elif cls is PatternClass.HETEROGENEOUS:
        if rng is None:
            raise ValueError("heterogeneous maps are random; pass an rng")
        m = softmax_rows(1.5 * rng.normal(L * L).reshape(L, L))
    return m


def synthetic_pattern_set(n: int, seed: int = 0, max_noise: float = 0.4):
    """Labelled noisy maps, classes in round-robin order.

    Each map is ``(1 - eta) * prototype + eta * noise`` with eta uniform in
    [0, max_noise) and noise rows softmax of N(0, 1) logits. Segment lengths
    are 10..13 words (single) or 7..13 words each (pairs). Block maps always
    use pairs; other classes use pairs half the time.

    Returns a list of ``(map, layout, label)``.
    """
    rng = Rng(seed)
    out = []
    for i in range(n):
        cls = PATTERN_CLASSES[i % len(PATTERN_CLASSES)]
        if cls is PatternClass.BLOCK or rng.bernoulli(0.5):
            layout = make_layout(7 + rng.integer(7), 7 + rng.integer(7))
        else:
            layout = make_layout(10 + rng.integer(4))
        proto = canonical_map(cls, layout, rng)
        eta = max_noise * rng.random()
        noise = softmax_rows(rng.normal(layout.L**2).reshape(layout.L, layout.L))
        out.append(((1.0 - eta) * proto + eta * noise, layout, cls))
    return out


# ---------------------------------------------------------------------------
# relation-specific heads
# ---------------------------------------------------------------------------


def _pair_distance(a, b) -> int:
    return min(abs(i - j) for i in range(*a) for j in range(*b))


def filter_annotations(annos, max_elem_tokens: int = 3, max_sent_tokens: int = 12,
                       min_pair_distance: int = 2) -> list:
    """Keep annotations whose sentence has at most ``max_sent_tokens`` words,
    whose element spans are at most ``max_elem_tokens`` long, and whose
    linked spans are at least ``min_pair_distance`` tokens apart."""
    kept = []
    for ex in annos:
        if not ex.relation_pairs or ex.n_words > max_sent_tokens:
            continue
        ok = all(
            (elem[1] - elem[0]) <= max_elem_tokens and _pair_distance(pred, elem) >= min_pair_distance
            for pred, elem in ex.relation_pairs
        )
        if ok:
            kept.append(ex)
    return kept


def relation_scores_from_tensors(tensors, annotations) -> HeadScoreMap:
    """Per head: mean over examples of the largest weight, in either
    direction, between any predicate token and any linked element token."""
    if not annotations:
        raise DataError("no annotations to score")
    n_layers, n_heads = tensors[0].shape[:2]
    total = np.zeros((n_layers, n_heads))
    for att, ex in zip(tensors, annotations):
        best = np.zeros((n_layers, n_heads))
        for pred, elem in ex.relation_pairs:
            fwd = att[:, :, pred[0]:pred[1], elem[0]:elem[1]]
            bwd = att[:, :, elem[0]:elem[1], pred[0]:pred[1]]
            best = np.maximum(best, np.maximum(fwd.max(axis=(2, 3)), bwd.max(axis=(2, 3))))
        total += best
    return HeadScoreMap(total / len(annotations), len(annotations))


def relation_head_scores(ck: Checkpoint, annotations, ablation: AblationSpec = NO_ABLATION) -> HeadScoreMap:
    annotations = list(annotations)
    if not annotations:
        raise DataError("no annotations to score")
    return relation_scores_from_tensors(attention_tensors(ck, annotations, ablation), annotations)


def detect_relation_heads(scores: HeadScoreMap, percentile: float = 99) -> list:
    """Heads scoring strictly above the given percentile of all head scores.

    The percentile interpolates linearly between order statistics.
    """
    flat = scores.scores.ravel()
    threshold = np.percentile(flat, percentile, method="linear")
    return [c for c, s in scores.ranked() if s > threshold]


# ---------------------------------------------------------------------------
# cross-checkpoint similarity
# ---------------------------------------------------------------------------


def cosine_from_tensors(tensors_a, tensors_b) -> HeadScoreMap:
    """Mean over examples of the per-head cosine between flattened maps."""
    if not tensors_a:
        raise DataError("no examples to compare")
    total = None
    for a, b in zip(tensors_a, tensors_b):
        if a.shape != b.shape:
            raise DataError(f"attention shapes differ: {a.shape} vs {b.shape}")
        fa = a.reshape(a.shape[0], a.shape[1], -1)
        fb = b.reshape(b.shape[0], b.shape[1], -1)
        # one square root of the product keeps simple cases exact (1 / sqrt(4) == 0.5)
        cos = (fa * fb).sum(axis=2) / np.sqrt((fa * fa).sum(axis=2) * (fb * fb).sum(axis=2))
        total = cos if total is None else total + cos
    return HeadScoreMap(total / len(tensors_a), len(tensors_a))


def sample_examples(dataset, limit: int, seed: int = 0) -> list:
    """All examples if there are at most ``limit``, else a seeded random subset in original order."""
    dataset = list(dataset)
    if len(dataset) <= limit:
        return dataset
    return [dataset[i] for i in sorted(Rng(seed).sample_without_replacement(len(dataset), limit))]


def head_cosine_similarity(ck_a: Checkpoint, ck_b: Checkpoint, dataset, limit: int = 1000,
                           seed: int = 0) -> HeadScoreMap:
    if ck_a.config != ck_b.config:
        raise DataError("checkpoints have different model configs")
    examples = sample_examples(dataset, limit, seed)
    return cosine_from_tensors(attention_tensors(ck_a, examples), attention_tensors(ck_b, examples))


# ---------------------------------------------------------------------------
# feature attention, [CLS] profile, token-to-token
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    """A token class of interest: ``role``, ``tokens`` (explicit ids), ``cls`` or ``sep``."""

    kind: str
    role: TokenRole | None = None
    token_ids: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in ("role", "tokens", "cls", "sep"):
            raise ValueError(f"unknown feature kind {self.kind!r}")
        if self.kind == "role" and self.role is None:
            raise ValueError("role feature needs a role")
        if self.kind == "tokens" and not self.token_ids:
            raise ValueError("token feature needs at least one id")

    @classmethod
    def of_role(cls, role) -> "FeatureSpec":
        role = TokenRole(role)
        if role is TokenRole.CLS:
            return cls("cls")
        if role is TokenRole.SEP:
            return cls("sep")
        return cls("role", role=role)

    @classmethod
    def of_tokens(cls, ids) -> "FeatureSpec":
        return cls("tokens", token_ids=tuple(int(i) for i in ids))

    @property
    def name(self) -> str:
        if self.kind == "role":
            return self.role.value
        if self.kind == "tokens":
            return "tokens"
        return f"[{self.kind.upper()}]"

    def positions(self, ex: Example) -> list:
        if self.kind == "cls":
            return ex.positions_with_role(TokenRole.CLS)
        if self.kind == "sep":
            return ex.positions_with_role(TokenRole.SEP)
        if self.kind == "role":
            return ex.positions_with_role(self.role)
        wanted = set(self.token_ids)
        return [i for i, t in enumerate(ex.seq.ids) if t in wanted]


def feature_scores_from_tensors(tensors, examples, feature: FeatureSpec) -> HeadScoreMap:
    """Column sums into each feature position over L; max over positions;
    mean over the examples that contain the feature."""
    total = None
    used = 0
    for att, ex in zip(tensors, examples):
        pos = feature.positions(ex)
        if not pos:
            continue
        L = att.shape[-1]
        col = att[:, :, :, pos].sum(axis=2) / L  # (n_layers, n_heads, n_pos)
        best = col.max(axis=2)
        total = best if total is None else total + best
        used += 1
    if not used:
        raise DataError(f"no example contains feature {feature.name} (count 0)")
    return HeadScoreMap(total / used, used)


def feature_attention_map(ck: Checkpoint, dataset, feature: FeatureSpec,
                          ablation: AblationSpec = NO_ABLATION) -> HeadScoreMap:
    examples = [ex for ex in dataset if feature.positions(ex)]
    if not examples:
        raise DataError(f"no example contains feature {feature.name} (count 0)")
    return feature_scores_from_tensors(attention_tensors(ck, examples, ablation), examples, feature)


PROFILE_CATEGORIES = ("[CLS]", "[SEP]") + tuple(
    r.value for r in CONTENT_ROLES if r is not TokenRole.FILLER
) + ("other",)


def _category(role: TokenRole) -> str:
    if role is TokenRole.CLS:
        return "[CLS]"
    if role is TokenRole.SEP:
        return "[SEP]"
    if role is TokenRole.FILLER:
        return "other"
    return role.value


@dataclass
class ClsProfile:
    shares: np.ndarray  # (n_heads, n_categories), rows sum to 1
    n_examples: int
    categories: tuple = PROFILE_CATEGORIES

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["head", "category", "share"])
            for (h, c), s in np.ndenumerate(self.shares):
                w.writerow([h, self.categories[c], repr(float(s))])


def cls_profile_from_tensors(tensors, examples) -> ClsProfile:
    """Final-layer [CLS] row mass by target category, averaged over examples."""
    if not examples:
        raise DataError("[CLS] profile of an empty dataset")
    index = {c: i for i, c in enumerate(PROFILE_CATEGORIES)}
    n_heads = tensors[0].shape[1]
    total = np.zeros((n_heads, len(PROFILE_CATEGORIES)))
    for att, ex in zip(tensors, examples):
        row = att[-1, :, 0, :]  # (n_heads, L); row 0 is [CLS]
        onehot = np.zeros((ex.seq.length, len(PROFILE_CATEGORIES)))
        for pos, role in enumerate(ex.roles):
            onehot[pos, index[_category(role)]] = 1.0
        total += row @ onehot
    return ClsProfile(total / len(examples), len(examples))


def cls_attention_profile(ck: Checkpoint, dataset, ablation: AblationSpec = NO_ABLATION) -> ClsProfile:
    examples = list(dataset)
    return cls_profile_from_tensors(attention_tensors(ck, examples, ablation), examples)


def token_scores_from_tensors(tensors, examples, source_role, target_role, min_distance: int = 2) -> HeadScoreMap:
    """Mean weight from source-role to target-role positions at least
    ``min_distance`` apart; averaged per example, then over examples with
    at least one eligible pair."""
    source_role, target_role = TokenRole(source_role), TokenRole(target_role)
    total = None
    used = 0
    for att, ex in zip(tensors, examples):
        src = ex.positions_with_role(source_role)
        tgt = ex.positions_with_role(target_role)
        pairs = [(i, j) for i in src for j in tgt if abs(i - j) >= min_distance]
        if not pairs:
            continue
        rows, cols = zip(*pairs)
        mean = att[:, :, list(rows), list(cols)].mean(axis=2)
        total = mean if total is None else total + mean
        used += 1
    if not used:
        raise DataError(
            f"no {source_role.value}->{target_role.value} pairs at distance >= {min_distance}"
        )
    return HeadScoreMap(total / used, used)


def token_to_token_scores(ck: Checkpoint, dataset, source_role, target_role, min_distance: int = 2,
                          ablation: AblationSpec = NO_ABLATION) -> HeadScoreMap:
    source_role, target_role = TokenRole(source_role), TokenRole(target_role)
    examples = [
        ex for ex in dataset
        if any(
            abs(i - j) >= min_distance
            for i in ex.positions_with_role(source_role)
            for j in ex.positions_with_role(target_role)
        )
    ]
    if not examples:
        raise DataError(
            f"no {source_role.value}->{target_role.value} pairs at distance >= {min_distance}"
        )
    return token_scores_from_tensors(attention_tensors(ck, examples, ablation), examples,
                                     source_role, target_role, min_distance)


def macro_f1(predicted, gold, classes=PATTERN_CLASSES) -> float:
    f1s = []
    for c in classes:
        tp = sum(p is c and g is c for p, g in zip(predicted, gold))
        fp = sum(p is c and g is not c for p, g in zip(predicted, gold))
        fn = sum(p is not c and g is c for p, g in zip(predicted, gold))
        denom = 2 * tp + fp + fn
        f1s.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(f1s))

