import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgirl.corpus import EOS, PERSON, SEP, UNK, Dialogue, TOY_PRESETS, gen_toy_corpus
from dgirl.errors import ContractViolation
from dgirl.evaluation import (METRIC_SKIP, METRICS, EmbeddingSource, avg_embedding_metric,
                              distinct_ratio, evaluate_pairs, extrema_embedding_metric,
                              extrema_vector, greedy_embedding_metric, mean_ci,
                              oracle_log_likelihood, random_replies, ranking_auc, reply_length,
                              response_stats, reward_ranking_auc, write_plot_data)
from dgirl.policy import EOS_ID, GeneratorModel

FUNCS = (avg_embedding_metric, greedy_embedding_metric, extrema_embedding_metric)


def source(vectors):
    return EmbeddingSource(vectors, "external-file")


TOKENS = [f"t{i}" for i in range(6)]
vec_st = st.lists(st.floats(-3, 3, allow_nan=False).filter(lambda x: abs(x) > 1e-3),
                  min_size=3, max_size=3)
emb_st = st.lists(vec_st, min_size=6, max_size=6).map(lambda vs: source(dict(zip(TOKENS, vs))))
utt_st = st.lists(st.sampled_from(TOKENS), min_size=1, max_size=5)


class TestHandExamples:
    def test_average(self):
        emb = source({"v1": [1, 0], "v2": [0, 1], "v3": [1, 1]})
        assert avg_embedding_metric(["v1", "v2"], ["v3"], emb) == 1.0

    def test_average_orthogonal(self):
        emb = source({"a": [1, 0], "b": [0, 1]})
        assert avg_embedding_metric(["a"], ["b"], emb) == 0.0

    def test_greedy(self):
        emb = source({"x": [1, 0], "y": [0, 1]})
        assert greedy_embedding_metric(["x"], ["x", "y"], emb) == 0.75

    def test_extrema_vector(self):
        np.testing.assert_array_equal(extrema_vector(np.array([[1.0, -2.0], [0.0, 3.0]])),
                                      [1.0, 3.0])

    def test_extrema_tie_prefers_positive(self):
        np.testing.assert_array_equal(extrema_vector(np.array([[2.0], [-2.0]])), [2.0])

    @pytest.mark.parametrize("fn", FUNCS)
    def test_single_tokens_are_plain_cosine(self, fn):
        emb = source({"a": [1.0, 2.0], "b": [3.0, -1.0]})
        expected = (1 * 3 - 2) / math.sqrt(5 * 10)
        assert fn(["a"], ["b"], emb) == pytest.approx(expected, abs=1e-15)


class TestUndefined:
    @pytest.mark.parametrize("fn", FUNCS)
    def test_special_and_missing_tokens(self, fn):
        emb = source({"a": [1.0, 0.0], EOS: [1.0, 1.0], SEP: [0.0, 1.0]})
        assert fn([EOS, SEP, "zz"], ["a"], emb) is None
        assert fn(["a", EOS], ["a"], emb) == 1.0

    @pytest.mark.parametrize("fn", FUNCS)
    def test_zero_vector(self, fn):
        emb = source({"z": [0.0, 0.0], "a": [1.0, 0.0]})
        assert fn(["z"], ["a"], emb) is None

    def test_skip_set(self):
        assert {EOS, SEP, UNK} <= METRIC_SKIP and PERSON not in METRIC_SKIP

    def test_report_counts_undefined(self):
        emb = source({"a": [1.0, 0.0], "b": [0.0, 1.0]})
        report = evaluate_pairs([["a"], [EOS]], [["a"], ["b"]], emb)
        assert report.undefined == {m: 1 for m in METRICS}
        assert report.means["average"] == 1.0 and report.ci["average"] == 0.0


class TestProperties:
    @settings(max_examples=60, deadline=None)
    @given(emb_st, utt_st)
    def test_identical_is_exactly_one(self, emb, utt):
        for fn in FUNCS:
            assert fn(utt, list(utt), emb) == 1.0

    @settings(max_examples=60, deadline=None)
    @given(emb_st, utt_st, utt_st)
    def test_symmetric_and_bounded(self, emb, a, b):
        for fn in FUNCS:
            ab, ba = fn(a, b, emb), fn(b, a, emb)
            assert ab == pytest.approx(ba, abs=1e-12)
            assert -1.0 <= ab <= 1.0

    @settings(max_examples=60, deadline=None)
    @given(emb_st, utt_st, utt_st, st.floats(0.01, 100.0))
    def test_scale_invariant(self, emb, a, b, c):
        scaled = source({t: c * v for t, v in emb.vectors.items()})
        for fn in FUNCS:
            assert fn(a, b, scaled) == pytest.approx(fn(a, b, emb), abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(emb_st, utt_st, utt_st, st.randoms())
    def test_permutation_invariant(self, emb, a, b, rnd):
        pa, pb = list(a), list(b)
        rnd.shuffle(pa)
        rnd.shuffle(pb)
        for fn in FUNCS:
            assert fn(pa, pb, emb) == fn(a, b, emb)


class TestStatistics:
    def test_mean_ci(self):
        mean, half = mean_ci([1.0, 2.0, 3.0, None])
        assert mean == 2.0 and half == pytest.approx(1.96 * 1.0 / math.sqrt(3))
        assert mean_ci([None]) == (None, None)

    def test_reply_length(self):
        assert reply_length(["a", "b", EOS]) == 2 and reply_length(["a"]) == 1

    def test_distinct_ratio(self):
        assert distinct_ratio([("a",)] * 4) == 0.25
        assert distinct_ratio([("a",), ("b",), ("c",)]) == 1.0
        with pytest.raises(ContractViolation):
            distinct_ratio([])

    def test_response_stats_with_oracle(self):
        corpus = gen_toy_corpus(TOY_PRESETS["default"])
        dialogues = corpus.test[:4]
        replies = [d.reply for d in dialogues[:3]] + [(7, EOS_ID)]
        stats = response_stats([d.context for d in dialogues], replies, corpus.oracle)
        assert stats["mean_length"] == pytest.approx((3 + 3 + 3 + 1) / 4)
        assert stats["oracle_valid"] == 0.75 and stats["oracle_mean_logprob"] == 0.0
        assert stats["distinct_ratio"] == len(set(replies)) / 4

    def test_oracle_log_likelihood_uniform_model(self):
        corpus = gen_toy_corpus(TOY_PRESETS["default"])
        V = len(corpus.vocab)
        gen = GeneratorModel(V, max_len=8, seed=0)
        gen.params["out.W"].value[...] = 0.0
        gen.params["out.b"].value[...] = 0.0
        contexts = [d.context for d in corpus.test[:5]]
        # echo replies have four actions, each uniform over V - 2 free ids
        expected = -4 * math.log(V - 2)
        assert oracle_log_likelihood(gen, corpus.oracle, contexts) == pytest.approx(expected)

    def test_report_serialisation(self):
        emb = source({"a": [1.0, 0.0], "b": [0.5, 0.5]})
        report = evaluate_pairs([["a", EOS], ["b", EOS]], [["a"], ["a"]], emb)
        lines = report.to_records().splitlines()
        assert len(lines) == 3 and json.loads(lines[-1])["summary"] is True
        assert json.loads(lines[0]) == {"pair": 0, "average": 1.0, "greedy": 1.0,
                                        "extrema": 1.0}
        assert "greedy" in report.table() and report.mean_length == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ContractViolation):
            evaluate_pairs([["a"]], [], source({"a": [1.0]}))


class TestAuc:
    def test_hand_values(self):
        assert ranking_auc([2.0, 3.0], [1.0]) == 1.0
        assert ranking_auc([1.0], [1.0]) == 0.5
        assert ranking_auc([1.0, 3.0], [2.0]) == 0.5
        with pytest.raises(ContractViolation):
            ranking_auc([], [1.0])

    def test_random_replies_match_length(self):
        dialogues = [Dialogue(((7,),), (8, 8, EOS_ID)), Dialogue(((9,),), (EOS_ID,))]
        out = random_replies(dialogues, [7, 8, 9], np.random.default_rng(0))
        assert [len(r) for r in out] == [3, 1] and all(r[-1] == EOS_ID for r in out)

    def test_reward_ranking_auc_with_oracle_score(self):
        corpus = gen_toy_corpus(TOY_PRESETS["default"])

        def score(contexts, replies):
            return [corpus.oracle.logprob(c, r) for c, r in zip(contexts, replies)]

        content = list(range(7, len(corpus.vocab)))
        auc = reward_ranking_auc(score, corpus.test[:50], content, np.random.default_rng(0))
        assert auc > 0.99


class TestEmbeddingSource:
    def test_from_file(self, tmp_path):
        path = tmp_path / "vec.txt"
        path.write_text("2 3\nhello 1 0 0\nworld 0 1 0\n", encoding="utf-8")
        emb = EmbeddingSource.from_file(str(path))
        assert emb.dim == 3 and emb.provenance == "external-file" and "hello" in emb
        assert greedy_embedding_metric(["hello"], ["world"], emb) == 0.0

    @pytest.mark.parametrize("text", ["a 1 2\nb 1\n", "a x y\n", "a\n", ""])
    def test_bad_files(self, tmp_path, text):
        path = tmp_path / "vec.txt"
        path.write_text(text, encoding="utf-8")
        with pytest.raises(ContractViolation):
            EmbeddingSource.from_file(str(path))

    def test_from_generator(self):
        corpus = gen_toy_corpus(TOY_PRESETS["default"])
        gen = GeneratorModel(len(corpus.vocab), seed=0)
        emb = EmbeddingSource.from_generator(gen, corpus.vocab)
        assert emb.provenance == "generator-embedding" and emb.dim == gen.params["emb"].shape[1]
        np.testing.assert_array_equal(emb.get("w00"), gen.params["emb"].value[7])


def test_plot_data(tmp_path):
    path = tmp_path / "plot.tsv"
    write_plot_data(str(path), [{"iteration": 1, "d_loss": 0.5, "samples": ["x"]},
                                {"iteration": 2}], ["d_loss", "samples"])
    rows = path.read_text(encoding="utf-8").splitlines()
    assert rows == ["iteration\td_loss\tsamples", "1\t0.5\t", "2\t\t"]
