from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from attrdiff.data import (PAD, CorpusConfig, DatasetFormatError, StyledExample, generate_corpus, load_corpus,
                           load_dataset, make_grammar, save_corpus, save_dataset, token_array, transfer_markers)
from attrdiff.metrics import style_accuracy, train_oracle

SMALL = CorpusConfig(n_train=200, n_val=50, n_test=50, seed=11)


@pytest.fixture(scope="module")
def small():
    return generate_corpus(SMALL)


def test_same_seed_same_corpus(small):
    again = generate_corpus(SMALL)
    assert again.splits() == small.splits()
    other = generate_corpus(CorpusConfig(n_train=200, n_val=50, n_test=50, seed=12))
    assert other.train != small.train


def test_every_generated_sentence_is_valid(small):
    g = small.grammar
    for ex in small.train + small.val + small.test:
        assert g.is_valid(ex.src) and g.is_valid(ex.tgt)


def test_parallel_pairs_share_content(small):
    cfg = small.config
    for ex in small.train:
        content = lambda toks: [t for t in toks if t > 2 * cfg.n_markers]
        assert content(ex.src) == content(ex.tgt)
        assert Counter(content(ex.src)) == Counter(content(ex.tgt))
        src_m = [t for t in ex.src if 1 <= t <= 2 * cfg.n_markers]
        tgt_m = [t for t in ex.tgt if 1 <= t <= 2 * cfg.n_markers]
        assert len(src_m) == len(tgt_m) == cfg.markers_per_sentence
        assert set(src_m) <= set(cfg.markers(ex.src_label).tolist())
        assert set(tgt_m) <= set(cfg.markers(ex.tgt_label).tolist())
        assert ex.tgt_label == 1 - ex.src_label


def test_labels_balanced_and_splits_disjoint(small):
    for split in small.splits().values():
        labels = [e.src_label for e in split]
        assert abs(labels.count(0) - labels.count(1)) <= 1
    seen = [e.src for split in small.splits().values() for e in split]
    assert len(seen) == len(set(seen))


def test_nonparallel_has_no_targets():
    c = generate_corpus(CorpusConfig(parallel=False, n_train=40, n_val=4, n_test=4))
    assert all(e.tgt is None for e in c.train)


def test_transfer_is_an_involution_on_labels_and_content(small):
    cfg = small.config
    rng = np.random.default_rng(0)
    for ex in small.train[:50]:
        there = transfer_markers(cfg, ex.src, ex.src_label, rng)
        back = transfer_markers(cfg, there, ex.tgt_label, rng)
        is_m = lambda t: 1 <= t <= 2 * cfg.n_markers
        assert [t for t in back if not is_m(t)] == [t for t in ex.src if not is_m(t)]
        assert sum(map(is_m, back)) == sum(map(is_m, ex.src))
        assert set(t for t in back if is_m(t)) <= set(cfg.markers(ex.src_label).tolist())


@pytest.mark.parametrize("bad", [
    dict(markers_per_sentence=16), dict(markers_per_sentence=0), dict(min_len=3),
    dict(vocab_size=13), dict(successors=0), dict(marker_overlap=1.5),
])
def test_infeasible_configs(bad):
    with pytest.raises(ValueError):
        generate_corpus(CorpusConfig(**bad))


def test_validity_edge_cases(small):
    g = small.grammar
    assert not g.is_valid([PAD] * 16)
    ex = list(small.train[0].src)
    content = [i for i, t in enumerate(ex) if t > 12]
    # break one licensed bigram
    a = ex[content[0]]
    unlicensed = next(c for c in SMALL.content if not g.licensed[a, c])
    ex[content[1]] = unlicensed
    assert not g.is_valid(ex)
    too_many = [1] * 7 + [PAD] * 9
    assert not g.is_valid(too_many)


def test_random_validity_matches_exact_probability():
    # dense grammar so the probability is far from zero
    cfg = CorpusConfig(successors=17, seed=5)
    g = make_grammar(cfg)
    exact = g.random_valid_probability(cfg.seq_len)
    rng = np.random.default_rng(0)
    draws = rng.integers(0, cfg.vocab_size, size=(20000, cfg.seq_len))
    mc = np.mean([g.is_valid(row) for row in draws])
    assert abs(mc - exact) < 0.05
    assert 0.05 < exact < 0.95
    # content-only sequences reduce to the bigram-density power
    content_only = rng.choice(cfg.content, size=(20000, cfg.seq_len))
    content_only[:, 0] = 1  # one marker so the count rule passes
    mc_c = np.mean([g.is_valid(row) for row in content_only])
    assert abs(mc_c - g.density ** (cfg.seq_len - 2)) < 0.05


def test_exact_probability_tiny_brute_force():
    cfg = CorpusConfig(vocab_size=16, n_markers=2, markers_per_sentence=1, seq_len=3, min_len=2,
                       successors=5, seed=1)
    g = make_grammar(cfg)
    grid = np.stack(np.meshgrid(*[np.arange(16)] * 3, indexing="ij"), -1).reshape(-1, 3)
    brute = np.mean([g.is_valid(r) for r in grid])
    assert g.random_valid_probability(3) == pytest.approx(brute, abs=1e-12)


def test_oracle_separates_styles(small):
    oracle = train_oracle(small.train, SMALL.vocab_size)
    test = small.test
    assert style_accuracy(token_array(test, "src"), [e.src_label for e in test], oracle) >= 0.99
    # unchanged sources scored against the target label: about zero
    assert style_accuracy(token_array(test, "src"), [e.tgt_label for e in test], oracle) <= 0.01


def test_save_load_round_trip(tmp_path, small):
    path = tmp_path / "d.jsonl"
    save_dataset(small.train, path)
    assert load_dataset(path) == small.train
    save_dataset([], tmp_path / "empty")
    assert (tmp_path / "empty").read_text() == ""
    assert load_dataset(tmp_path / "empty") == []
    save_corpus(small, tmp_path / "c" / "corpus")
    assert load_corpus(tmp_path / "c" / "corpus").splits() == small.splits()


def test_load_errors_name_the_line(tmp_path, small):
    path = tmp_path / "d.jsonl"
    save_dataset(small.train[:3], path)
    lines = path.read_text().splitlines()
    lines[1] = '{"src": [1, 2], "src_label": 0, "tgt_label": 1}'
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=":2:"):
        load_dataset(path, parallel=True)
    lines[1] = "{not json"
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match=":2:"):
        load_dataset(path)


@settings(max_examples=40, deadline=None)
@given(src=st.lists(st.integers(0, 31), min_size=16, max_size=16), label=st.integers(0, 1),
       tgt=st.none() | st.lists(st.integers(0, 31), min_size=16, max_size=16))
def test_dataset_round_trip_property(tmp_path_factory, src, label, tgt):
    ex = StyledExample(src=tuple(src), src_label=label, tgt_label=1 - label,
                       tgt=None if tgt is None else tuple(tgt))
    path = tmp_path_factory.mktemp("rt") / "one.jsonl"
    save_dataset([ex], path)
    assert load_dataset(path) == [ex]
