from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attnatlas.encoder import CLS_ID, MASK_ID, SEP_ID, ModelConfig, TokenSequence
from attnatlas.errors import DataError
from attnatlas.numerics import Rng
from attnatlas.tasks import (
    CONTENT_ROLES, Example, SyntheticGrammar, TokenRole, generate_pair_task, generate_relation_annotations,
    generate_single_task, mask_tokens, metric, partition_vocab, read_dataset, read_feature_list, write_dataset,
)

seeds = st.integers(0, 2**31)


def test_partition_disjoint_and_covering():
    part = partition_vocab(64)
    ids = [i for r in CONTENT_ROLES for i in part[r]]
    assert sorted(ids) == list(range(3, 64))
    assert all(len(part[r]) >= 4 for r in CONTENT_ROLES)
    with pytest.raises(ValueError):
        partition_vocab(20)


def test_grammar_names_round_trip(grammar):
    for i in range(64):
        if i == MASK_ID:
            continue
        assert grammar.token_id(grammar.token_name(i)) == i
    assert grammar.token_name(CLS_ID) == "[CLS]"
    assert grammar.role_of(SEP_ID) is TokenRole.SEP
    with pytest.raises(DataError):
        grammar.token_id("banana")
    with pytest.raises(ValueError):
        SyntheticGrammar(negation_prob=1.5)
    with pytest.raises(ValueError):
        SyntheticGrammar(templates=("S X",))


def _check_roles(grammar, ex):
    for t, r in zip(ex.seq.ids, ex.roles):
        assert grammar.role_of(t) is r


@settings(max_examples=30)
@given(seeds)
def test_single_task_labels_and_roles(seed):
    g = SyntheticGrammar(seed=seed)
    for ex in generate_single_task(g, 20):
        _check_roles(g, ex)
        assert ex.label == int(TokenRole.NEGATION in ex.roles)
        assert ex.segments == 1
        ex.seq.validate(ModelConfig())


@settings(max_examples=30)
@given(seeds)
def test_pair_task_labels_follow_multisets(seed):
    g = SyntheticGrammar(seed=seed)
    for ex in generate_pair_task(g, 20):
        _check_roles(g, ex)
        sep = ex.seq.ids.index(SEP_ID)
        a, b = ex.seq.ids[1:sep], ex.seq.ids[sep + 1:-1]
        assert len(a) == len(b)
        assert ex.label == int(Counter(a) == Counter(b))
        assert ex.seq.segment_ids == (0,) * (sep + 1) + (1,) * (len(b) + 1)
        ex.seq.validate(ModelConfig())


def test_pair_task_balance(grammar):
    labels = [ex.label for ex in generate_pair_task(grammar, 2000)]
    assert 0.45 < np.mean(labels) < 0.55


def test_generators_deterministic(grammar):
    for gen in (generate_single_task, generate_pair_task, generate_relation_annotations):
        assert gen(grammar, 30) == gen(grammar, 30)
        assert gen(grammar, 30, seed=5) != gen(grammar, 30, seed=6)


@settings(max_examples=30)
@given(seeds)
def test_relation_annotations_link_verb_and_subject(seed):
    g = SyntheticGrammar(seed=seed)
    for ex in generate_relation_annotations(g, 10):
        ((pred, elem),) = ex.relation_pairs
        assert [ex.roles[i] for i in range(*pred)] == [TokenRole.VERB]
        assert ex.roles[elem[0]] is TokenRole.SUBJECT_MARK
        assert all(ex.roles[i] is TokenRole.NOUN for i in range(elem[0] + 1, elem[1]))


def test_relations_need_subject_and_verb():
    with pytest.raises(DataError):
        generate_relation_annotations(SyntheticGrammar(templates=("F V O",)), 3)


@given(seeds, st.floats(0.01, 0.99))
def test_mask_tokens_contract(seed, rate):
    ex = generate_pair_task(SyntheticGrammar(seed=1), 1)[0]
    masked, targets, positions = mask_tokens(ex, rate, Rng(seed))
    assert positions
    assert not set(positions) & set(ex.seq.special_positions)
    assert targets == [ex.seq.ids[p] for p in positions]
    for i, t in enumerate(masked.ids):
        assert t == (MASK_ID if i in positions else ex.seq.ids[i])


def test_mask_rate_near_zero_masks_exactly_one():
    ex = generate_single_task(SyntheticGrammar(), 1)[0]
    for s in range(20):
        assert len(mask_tokens(ex, 1e-9, Rng(s))[2]) == 1


def test_mask_rate_bounds():
    ex = generate_single_task(SyntheticGrammar(), 1)[0]
    with pytest.raises(ValueError):
        mask_tokens(ex, 0.0, Rng(0))


def test_metric():
    assert metric("accuracy", [1, 0, 1, 1], [1, 1, 1, 0]) == 0.5
    assert metric("f1", [1, 0, 1, 1], [1, 1, 1, 0]) == pytest.approx(2 / 3)
    assert metric("f1", [0, 0], [0, 0]) == 0.0
    with pytest.raises(DataError):
        metric("accuracy", [1], [1, 0])
    with pytest.raises(ValueError):
        metric("mcc", [1], [1])


def test_example_validation():
    seq = TokenSequence((0, 5, 1), (0, 0, 0))
    with pytest.raises(DataError):
        Example(seq, ("CLS", "NOUN"))
    with pytest.raises(DataError):
        Example(seq, ("CLS", "NOUN", "SEP"), relation_pairs=(((1, 2), (2, 5)),))


def test_dataset_round_trip(tmp_path, grammar):
    data = generate_pair_task(grammar, 25) + generate_relation_annotations(grammar, 5)
    write_dataset(tmp_path / "d.jsonl", data)
    assert read_dataset(tmp_path / "d.jsonl") == data


def test_dataset_bad_record(tmp_path):
    (tmp_path / "bad.jsonl").write_text('{"ids": [0, 5, 1]}\n')
    with pytest.raises(DataError):
        read_dataset(tmp_path / "bad.jsonl")
    (tmp_path / "bad2.jsonl").write_text("{not json\n")
    with pytest.raises(DataError, match="bad2.jsonl:1"):
        read_dataset(tmp_path / "bad2.jsonl")


def test_feature_list(tmp_path, grammar):
    (tmp_path / "f.txt").write_text("# negations\nneg0\nneg1\n\n7\n")
    assert read_feature_list(tmp_path / "f.txt", grammar) == [grammar.partition[TokenRole.NEGATION][0],
                                                             grammar.partition[TokenRole.NEGATION][1], 7]
    (tmp_path / "e.txt").write_text("# nothing\n")
    with pytest.raises(DataError):
        read_feature_list(tmp_path / "e.txt", grammar)


def test_mask_count_statistic():
    # 18 maskable positions at rate 0.15: about 2.7 masks per draw (floor adds ~0.05)
    seq = TokenSequence((0,) + (5,) * 18 + (1,), (0,) * 20)
    ex = Example(seq, ("CLS",) + ("NOUN",) * 18 + ("SEP",))
    rng = Rng(11)
    counts = [len(mask_tokens(ex, 0.15, rng)[2]) for _ in range(10_000)]
    assert abs(np.mean(counts) - 2.7) < 0.2 * 2.7


@pytest.mark.parametrize("prob,label", [(0.0, 0), (1.0, 1)])
def test_negation_probability_extremes(prob, label):
    assert {ex.label for ex in generate_single_task(SyntheticGrammar(negation_prob=prob), 50)} == {label}


def test_corruption_rate_zero_all_duplicates():
    assert {ex.label for ex in generate_pair_task(SyntheticGrammar(corruption_rate=0.0), 50)} == {1}


def test_single_task_balance(grammar):
    assert 0.45 <= np.mean([ex.label for ex in generate_single_task(grammar, 1000)]) <= 0.55


def test_special_token_counts(grammar):
    assert all(ex.seq.ids.count(SEP_ID) == 1 for ex in generate_single_task(grammar, 50))
    assert all(ex.seq.ids.count(SEP_ID) == 2 and ex.segments == 2 for ex in generate_pair_task(grammar, 50))


def test_relation_corpus_size_473(grammar):
    assert len(generate_relation_annotations(grammar, 473)) == 473
