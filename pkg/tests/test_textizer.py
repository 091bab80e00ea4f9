"""Window rendering, vocabulary, and pair encoding."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from tnli.errors import ConfigError, CorpusError
from tnli.ontology import parse_ontology
from tnli.textizer import (
    CLS_ID,
    PAD_ID,
    SEGMENT_EARLIER,
    SEGMENT_LATER,
    SEGMENT_SPECIAL,
    SEP_ID,
    UNK_ID,
    TokenSequence,
    Vocab,
    _truncate_budget,
    decode,
    encode_pair,
    pad_batch,
    render_window,
    tokenize,
)

from conftest import ev_lab, ev_med_start, ev_med_stop, ev_stage, window

TWO_LAB_ONT = """
[system]
id = s1
name = system one

[condition]
id = c1
system = s1

[stage]
id = c1-a
condition = c1
rank = 1
phrase = c one a

[lab]
id = alpha
condition = c1
edges = 10 20
direction = higher-sicker
normal_band = 0

[lab]
id = beta
condition = c1
edges = 5
direction = higher-sicker
normal_band = 0
"""


class TestRendering:
    def test_full_window(self, ont):
        w = window(
            0.0, 7.0,
            [
                ev_stage(1.0, "ckd-2"),
                ev_lab(2.0, "gfr", 65.0),
                ev_lab(3.0, "gfr", 40.0),
                ev_med_start(4.0, "antibiotic"),
                ev_med_stop(5.0, "antibiotic"),
            ],
        )
        assert render_window(w, ont) == (
            "diagnosis ckd stage 2 . lab gfr band 3 steady . "
            "lab gfr band 2 falling . medication antibiotic start . "
            "medication antibiotic stop"
        )

    def test_first_observation_is_steady(self, ont):
        w = window(0.0, 7.0, [ev_lab(1.0, "gfr", 95.0)])
        assert render_window(w, ont) == "lab gfr band 4 steady"

    def test_rising_trend(self, ont):
        w = window(0.0, 7.0, [ev_lab(1.0, "gfr", 20.0), ev_lab(2.0, "gfr", 65.0)])
        assert render_window(w, ont) == "lab gfr band 1 steady . lab gfr band 3 rising"

    def test_equal_band_is_steady(self, ont):
        w = window(0.0, 7.0, [ev_lab(1.0, "gfr", 61.0), ev_lab(2.0, "gfr", 89.0)])
        assert render_window(w, ont) == "lab gfr band 3 steady . lab gfr band 3 steady"

    def test_trend_tracked_per_lab(self):
        ont2 = parse_ontology(TWO_LAB_ONT)
        w = window(
            0.0, 7.0,
            [
                ev_lab(1.0, "alpha", 15.0),
                ev_lab(2.0, "beta", 1.0),
                ev_lab(3.0, "alpha", 25.0),
            ],
        )
        # beta's observation must not reset alpha's trend
        assert render_window(w, ont2) == (
            "lab alpha band 1 steady . lab beta band 0 steady . lab alpha band 2 rising"
        )

    def test_trend_resets_between_windows(self, ont):
        w1 = window(0.0, 7.0, [ev_lab(1.0, "gfr", 20.0)])
        w2 = window(7.0, 14.0, [ev_lab(8.0, "gfr", 65.0)])
        # rendered separately, each window starts with a fresh trend state
        assert render_window(w2, ont).endswith("steady")
        assert render_window(w1, ont).endswith("steady")


class TestVocab:
    def test_build_puts_specials_first(self):
        v = Vocab.build(["b a", "c a"])
        assert v.tokens == ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "b", "c")
        assert len(v) == 7

    def test_special_ids_fixed(self):
        v = Vocab.build(["x"])
        assert v.id_of("[PAD]") == PAD_ID == 0
        assert v.id_of("[UNK]") == UNK_ID == 1
        assert v.id_of("[CLS]") == CLS_ID == 2
        assert v.id_of("[SEP]") == SEP_ID == 3

    def test_unknown_token_maps_to_unk(self):
        v = Vocab.build(["alpha"])
        assert v.id_of("alpha") == 4
        assert v.id_of("omega") == UNK_ID

    def test_specials_in_text_not_duplicated(self):
        v = Vocab.build(["[CLS] alpha"])
        assert v.tokens.count("[CLS]") == 1

    def test_token_of_range_check(self):
        v = Vocab.build(["x"])
        with pytest.raises(ConfigError):
            v.token_of(99)

    def test_save_load_round_trip(self, tmp_path):
        v = Vocab.build(["the quick brown fox"])
        path = tmp_path / "vocab.txt"
        v.save(path)
        assert Vocab.load(path) == v

    def test_load_empty_file(self, tmp_path):
        path = tmp_path / "vocab.txt"
        path.write_text("")
        with pytest.raises(CorpusError):
            Vocab.load(path)

    def test_rejects_missing_specials(self):
        with pytest.raises(ConfigError, match="specials"):
            Vocab(tokens=("a", "b", "c", "d"))

    def test_rejects_duplicates(self):
        with pytest.raises(ConfigError, match="duplicate"):
            Vocab(tokens=("[PAD]", "[UNK]", "[CLS]", "[SEP]", "a", "a"))


class TestEncoding:
    def test_layout(self):
        v = Vocab.build(["a b", "c"])
        seq = encode_pair("a b", "c", gap_days=9.0, vocab=v, max_len=16)
        assert seq.ids.tolist() == [CLS_ID, v.id_of("a"), v.id_of("b"), SEP_ID, v.id_of("c")]
        assert seq.segment_marks.tolist() == [
            SEGMENT_SPECIAL, SEGMENT_EARLIER, SEGMENT_EARLIER,
            SEGMENT_SPECIAL, SEGMENT_LATER,
        ]
        assert seq.gap_days == 9.0

    def test_unknown_tokens_become_unk(self):
        v = Vocab.build(["a"])
        seq = encode_pair("a mystery", "a", 1.0, v, 16)
        assert seq.ids.tolist() == [CLS_ID, v.id_of("a"), UNK_ID, SEP_ID, v.id_of("a")]

    def test_decode_inverse(self):
        v = Vocab.build(["alpha beta", "gamma"])
        seq = encode_pair("alpha beta", "gamma", 2.0, v, 16)
        assert decode(seq, v) == "[CLS] alpha beta [SEP] gamma"

    def test_max_len_too_small(self):
        v = Vocab.build(["a"])
        with pytest.raises(ConfigError):
            encode_pair("a", "a", 1.0, v, 2)

    def test_truncation_caps_length(self):
        v = Vocab.build(["w"])
        seq = encode_pair("w " * 40, "w " * 40, 1.0, v, 20)
        assert len(seq) == 20

    def test_truncation_proportional(self):
        v = Vocab.build(["w"])
        seq = encode_pair("w " * 30, "w " * 10, 1.0, v, 22)
        # budget 20 over 30:10 keeps the 3:1 ratio
        n_a = int((seq.segment_marks == SEGMENT_EARLIER).sum())
        n_b = int((seq.segment_marks == SEGMENT_LATER).sum())
        assert (n_a, n_b) == (15, 5)

    def test_truncation_keeps_both_sides(self):
        v = Vocab.build(["w"])
        seq = encode_pair("w " * 50, "w", 1.0, v, 10)
        assert int((seq.segment_marks == SEGMENT_LATER).sum()) >= 1

    def test_empty_side_encodes(self):
        v = Vocab.build(["a"])
        seq = encode_pair("", "a", 1.0, v, 8)
        assert seq.ids.tolist() == [CLS_ID, SEP_ID, v.id_of("a")]

    @given(
        n_a=st.integers(min_value=0, max_value=80),
        n_b=st.integers(min_value=0, max_value=80),
        budget=st.integers(min_value=2, max_value=60),
    )
    def test_budget_split_properties(self, n_a, n_b, budget):
        keep_a, keep_b = _truncate_budget(n_a, n_b, budget)
        assert 0 <= keep_a <= n_a
        assert 0 <= keep_b <= n_b
        assert keep_a + keep_b <= budget
        if n_a + n_b <= budget:
            assert (keep_a, keep_b) == (n_a, n_b)
        else:
            assert keep_a + keep_b == budget
            if n_a > 0:
                assert keep_a >= 1
            if n_b > 0:
                assert keep_b >= 1


class TestBatching:
    def test_pad_and_marks(self):
        v = Vocab.build(["a b c"])
        s1 = encode_pair("a", "b", 3.0, v, 16)
        s2 = encode_pair("a b c", "a b", 11.0, v, 16)
        ids, marks, gaps = pad_batch([s1, s2], max_len=16)
        assert ids.shape == (2, 7)
        assert ids[0, len(s1):].tolist() == [PAD_ID] * (7 - len(s1))
        assert marks[0, len(s1):].tolist() == [SEGMENT_SPECIAL] * (7 - len(s1))
        assert gaps.tolist() == [3.0, 11.0]

    def test_width_capped_by_max_len(self):
        v = Vocab.build(["a"])
        s = encode_pair("a a a a", "a a a", 1.0, v, 32)
        with pytest.raises(CorpusError, match="max_len"):
            pad_batch([s], max_len=4)

    def test_empty_batch(self):
        with pytest.raises(CorpusError):
            pad_batch([], max_len=8)

    def test_mismatched_shapes_rejected(self):
        with pytest.raises(CorpusError):
            TokenSequence(
                ids=np.array([1, 2]), segment_marks=np.array([0]), gap_days=1.0
            )


def test_tokenize_is_whitespace_split():
    assert tokenize("a  b\nc") == ["a", "b", "c"]
    assert tokenize("") == []
