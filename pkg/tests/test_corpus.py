import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgirl.corpus import (NUMBER, FULL_VOCAB_CAP, PERSON, RESERVED, SEP, TOY_PRESETS, UNK,
                          Dialogue, ORACLE_INVALID, ToyTaskSpec, TripleFormatError, Vocabulary,
                          build_vocab, encode_context, gen_toy_corpus, load_triples,
                          make_dialogue, normalize_utterance, read_triples, toy_vocab,
                          write_triples)
from dgirl.errors import ContractViolation

R = len(RESERVED)


def _write(tmp_path, lines, name="d.tsv"):
    p = tmp_path / name
    p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    return str(p)


class TestVocabulary:
    def test_reserved_block_order(self):
        v = build_vocab([["a"]], cap=R + 1)
        assert v.itos[:R] == list(RESERVED)
        assert (v.pad_id, v.bos_id, v.eos_id, v.unk_id, v.sep_id) == (0, 1, 2, 3, 4)
        assert v.stoi[PERSON] == v.person_id and v.stoi[NUMBER] == v.number_id

    def test_frequency_cut_hand_count(self):
        corpus = [["a", "a", "b"], ["a", "b", "c"]]
        v = build_vocab(corpus, cap=R + 2)
        assert "a" in v and "b" in v and "c" not in v
        assert v.encode(["c"]) == [v.unk_id]

    def test_ties_broken_lexicographically(self):
        v = build_vocab([["zz", "yy", "xx"]], cap=R + 2)
        assert v.itos[R:] == ["xx", "yy"]

    def test_no_unk_when_cap_is_large(self):
        corpus = [["p", "q"], ["r", "p"]]
        v = build_vocab(corpus, cap=R + 10)
        assert v.unk_id not in v.encode(["p", "q", "r"])
        assert len(v) == R + 3

    def test_full_scale_cap(self):
        assert FULL_VOCAB_CAP == 20000

    def test_errors(self):
        with pytest.raises(ContractViolation):
            build_vocab([], cap=100)
        with pytest.raises(ContractViolation):
            build_vocab([["a"]], cap=R)

    def test_size_bounded_by_cap(self):
        corpus = [[f"t{i}" for i in range(50)]]
        assert len(build_vocab(corpus, cap=20)) == 20

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.lists(st.sampled_from("abcdefg"), min_size=1, max_size=6),
                    min_size=1, max_size=12), st.randoms())
    def test_permutation_invariant(self, corpus, rnd):
        shuffled = list(corpus)
        rnd.shuffle(shuffled)
        assert build_vocab(corpus, cap=R + 4) == build_vocab(shuffled, cap=R + 4)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from(["a", "b", "c", "d"]), min_size=1, max_size=10))
    def test_round_trip(self, utt):
        v = build_vocab([["a", "b", "c", "d"]], cap=R + 4)
        assert v.decode(v.encode(utt)) == utt

    def test_save_load(self, tmp_path):
        v = build_vocab([["hello", "world"]], cap=R + 5)
        path = str(tmp_path / "vocab.txt")
        v.save(path)
        assert Vocabulary.load(path) == v
        assert open(path, encoding="utf-8").readline().startswith("#")


class TestNormalize:
    def test_names_and_numbers(self):
        out = normalize_utterance(["hi", "john", "i", "am", "25"], {"john"})
        assert out == ["hi", PERSON, "i", "am", NUMBER]

    def test_unchanged_and_lowercased(self):
        assert normalize_utterance(["how", "are", "you"]) == ["how", "are", "you"]
        assert normalize_utterance(["Hello"]) == ["hello"]

    def test_idempotent(self):
        once = normalize_utterance([PERSON, "3.5", "Mary"], {"mary"})
        assert normalize_utterance(once, {"mary"}) == once == [PERSON, NUMBER, PERSON]


class TestDialogue:
    def test_reply_must_end_with_eos(self):
        with pytest.raises(ContractViolation):
            Dialogue(((7, 8),), (7, 8))

    def test_context_arity(self):
        with pytest.raises(ContractViolation):
            Dialogue((), (2,))
        with pytest.raises(ContractViolation):
            Dialogue(((7,), (8,), (9,)), (2,))

    def test_no_pad(self):
        with pytest.raises(ContractViolation):
            Dialogue(((7, 0, 8),), (7, 2))

    def test_encode_context_sep(self):
        v = build_vocab([["a", "b", "c"]], cap=R + 3)
        two = make_dialogue([["a", "b"], ["c", "zzz"]], ["a"], v)
        ids = encode_context(two, v)
        assert ids == v.encode(["a", "b"]) + [v.sep_id] + [v.stoi["c"], v.unk_id]
        one = make_dialogue([["c"]], ["a"], v)
        assert encode_context(one, v) == [v.stoi["c"]]
        assert v.sep_id not in encode_context(one, v)
        assert SEP == RESERVED[v.sep_id] and UNK == RESERVED[v.unk_id]


class TestTriples:
    def test_well_formed_fixture(self, tmp_path):
        lines = ["one two three four\tfive six seven eight\tnine ten eleven twelve"] * 3
        out = load_triples(_write(tmp_path, lines))
        assert len(out.dialogues) == 3 and out.dropped == 0
        d = out.dialogues[0]
        assert len(d.context) == 2 and d.reply[-1] == out.vocab.eos_id

    def test_short_turn_dropped(self, tmp_path):
        lines = ["one two three four\tfive six\tnine ten eleven twelve",
                 "one two three four\tfive six seven eight\tnine ten eleven twelve"]
        out = load_triples(_write(tmp_path, lines))
        assert len(out.dialogues) == 1 and out.dropped == 1

    def test_empty_file(self, tmp_path):
        out = load_triples(_write(tmp_path, []))
        assert out.dialogues == [] and out.dropped == 0

    def test_malformed_line_number(self, tmp_path):
        lines = ["a b c d\te f g h\ti j k l", "only\ttwo"]
        with pytest.raises(TripleFormatError) as err:
            read_triples(_write(tmp_path, lines))
        assert err.value.lineno == 2

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError):
            load_triples(str(tmp_path / "absent.tsv"))

    def test_single_turn_context(self, tmp_path):
        out = load_triples(_write(tmp_path, ["\tfive six seven eight\tnine ten eleven twelve"]))
        assert len(out.dialogues[0].context) == 1

    def test_write_read_round_trip(self, tmp_path):
        corpus = gen_toy_corpus(ToyTaskSpec(n_train=30, n_valid=1, n_test=1))
        path = str(tmp_path / "toy.tsv")
        write_triples(path, corpus.train, corpus.vocab)
        back = load_triples(path, corpus.vocab, min_len=1, max_len=100)
        assert back.dialogues == corpus.train


class TestToyTask:
    def test_echo_rule(self):
        corpus = gen_toy_corpus(TOY_PRESETS["default"])
        for d in corpus.train[:50]:
            x = d.context[-1][-1]
            assert d.reply == (x, x, x, corpus.vocab.eos_id)
            assert corpus.oracle.logprob(d.context, d.reply) == 0.0

    def test_invalid_reply_sentinel(self):
        corpus = gen_toy_corpus(TOY_PRESETS["default"])
        d = corpus.train[0]
        wrong = (d.reply[0] + 1 if d.reply[0] + 1 < len(corpus.vocab) else R,) + d.reply[1:]
        assert corpus.oracle.logprob(d.context, wrong) == ORACLE_INVALID == -math.inf

    def test_stochastic_rule_half(self):
        corpus = gen_toy_corpus(TOY_PRESETS["stochastic"])
        d = corpus.train[0]
        opts = corpus.oracle.replies(d.context)
        assert len(opts) == 2
        for reply, lp in opts:
            assert lp == pytest.approx(math.log(0.5))
            assert corpus.oracle.logprob(d.context, reply) == pytest.approx(math.log(0.5))

    def test_deterministic_and_disjoint(self):
        a = gen_toy_corpus(TOY_PRESETS["default"])
        b = gen_toy_corpus(TOY_PRESETS["default"])
        assert a.train == b.train and a.valid == b.valid and a.test == b.test
        ctx = [{d.context for d in split} for split in (a.train, a.valid, a.test)]
        assert not (ctx[0] & ctx[1]) and not (ctx[0] & ctx[2]) and not (ctx[1] & ctx[2])

    def test_sizes_and_vocab(self):
        spec = TOY_PRESETS["default"]
        corpus = gen_toy_corpus(spec)
        assert (len(corpus.train), len(corpus.valid), len(corpus.test)) == (2000, 200, 200)
        assert len(toy_vocab(spec)) == R + spec.n_content
        lens = {len(u) for d in corpus.train for u in d.context}
        assert min(lens) >= spec.utterance_len[0] and max(lens) <= spec.utterance_len[1]

    def test_oracle_sampling_frequency(self):
        corpus = gen_toy_corpus(TOY_PRESETS["stochastic"])
        d = corpus.train[0]
        rng = np.random.default_rng(0)
        echo = corpus.oracle.replies(d.context)[0][0]
        hits = sum(corpus.oracle.sample(d.context, rng) == echo for _ in range(4000))
        assert abs(hits / 4000 - 0.5) < 0.03

    def test_spec_json_round_trip(self):
        spec = ToyTaskSpec(rule="echo_or_next", seed=4)
        assert ToyTaskSpec.from_json(spec.to_json()) == spec
