"""Embedding metrics, response statistics and toy-task oracle evaluation.

Utterances are token-string sequences.  Special tokens never contribute to
an embedding metric; a pair whose reply or target has no embeddable token is
*undefined* (``None``), excluded from corpus means and counted.
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .corpus import BOS, EOS, PAD, SEP, UNK
from .errors import ContractViolation
from .policy import EOS_ID

METRIC_SKIP = frozenset({PAD, BOS, EOS, UNK, SEP})
METRICS = ("average", "greedy", "extrema")
Z_95 = 1.96


class EmbeddingSource:
    """Token -> vector map of one fixed dimension, tagged with where it came from."""

    PROVENANCES = ("generator-embedding", "external-file")

    def __init__(self, vectors, provenance):
        if provenance not in self.PROVENANCES:
            raise ContractViolation(f"unknown provenance {provenance!r}")
        self.vectors = {}
        dim = None
        for tok, vec in vectors.items():
            vec = np.asarray(vec, dtype=np.float64).reshape(-1)
            if dim is None:
                dim = vec.size
            elif vec.size != dim:
                raise ContractViolation(f"vector for {tok!r} has dim {vec.size}, expected {dim}")
            self.vectors[tok] = vec
        if dim is None:
            raise ContractViolation("embedding source is empty")
        self.dim = dim
        self.provenance = provenance

    def __contains__(self, token):
        return token in self.vectors

    def get(self, token):
        return self.vectors.get(token)

    @classmethod
    def from_generator(cls, generator, vocab):
        table = generator.params["emb"].value
        return cls({tok: table[i].copy() for i, tok in enumerate(vocab.itos)},
                   "generator-embedding")

    @classmethod
    def from_file(cls, path):
        """Word-vector text format: token then whitespace-separated reals, one per line.

        A leading ``<count> <dim>`` header line is tolerated.
        """
        vectors = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                parts = line.split()
                if not parts:
                    continue
                if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                    continue
                try:
                    vectors[parts[0]] = [float(x) for x in parts[1:]]
                except ValueError:
                    raise ContractViolation(f"{path}:{lineno}: non-numeric vector entry") from None
                if not vectors[parts[0]]:
                    raise ContractViolation(f"{path}:{lineno}: token without a vector")
        return cls(vectors, "external-file")


def _matrix(tokens, emb):
    rows = [emb.get(t) for t in tokens if t not in METRIC_SKIP]
    rows = [r for r in rows if r is not None]
    return np.stack(rows) if rows else None


def _cosine(a, b):
    denom = math.sqrt(float(np.dot(a, a)) * float(np.dot(b, b)))
    if denom == 0.0:
        return None
    return min(1.0, max(-1.0, float(np.dot(a, b)) / denom))


def _fsum_mean(m):
    # exactly rounded column sums, so token order cannot change the result
    return np.array([math.fsum(col) for col in m.T]) / m.shape[0]


def avg_embedding_metric(reply, target, emb):
    """Cosine between mean token vectors; ``None`` when undefined."""
    a, b = _matrix(reply, emb), _matrix(target, emb)
    if a is None or b is None:
        return None
    return _cosine(_fsum_mean(a), _fsum_mean(b))


def _greedy_direction(a, b):
    best = []
    for u in a:
        sims = [_cosine(u, v) for v in b]
        sims = [s for s in sims if s is not None]
        if not sims:
            return None
        best.append(max(sims))
    return math.fsum(best) / len(best)


def greedy_embedding_metric(reply, target, emb):
    """Greedy token matching, averaged over both directions."""
    a, b = _matrix(reply, emb), _matrix(target, emb)
    if a is None or b is None:
        return None
    fwd, bwd = _greedy_direction(a, b), _greedy_direction(b, a)
    if fwd is None or bwd is None:
        return None
    return 0.5 * (fwd + bwd)


def extrema_vector(m):
    """Per dimension, the entry of largest magnitude (positive wins a tie)."""
    hi, lo = m.max(axis=0), m.min(axis=0)
    return np.where(hi >= -lo, hi, lo)


def extrema_embedding_metric(reply, target, emb):
    a, b = _matrix(reply, emb), _matrix(target, emb)
    if a is None or b is None:
        return None
    return _cosine(extrema_vector(a), extrema_vector(b))


METRIC_FUNCS = {"average": avg_embedding_metric, "greedy": greedy_embedding_metric,
                "extrema": extrema_embedding_metric}


def mean_ci(values):
    """``(mean, 95% half-width)`` from the normal approximation; ``None`` when empty."""
    vals = np.asarray([v for v in values if v is not None], dtype=np.float64)
    if vals.size == 0:
        return None, None
    if vals.size == 1:
        return float(vals[0]), 0.0
    return float(vals.mean()), float(Z_95 * vals.std(ddof=1) / math.sqrt(vals.size))


def reply_length(tokens):
    """Tokens before the first EOS."""
    tokens = list(tokens)
    return tokens.index(EOS) if EOS in tokens else len(tokens)


def distinct_ratio(replies):
    """Unique replies divided by the number of replies (one per context)."""
    replies = [tuple(r) for r in replies]
    if not replies:
        raise ContractViolation("need at least one reply")
    return len(set(replies)) / len(replies)


@dataclass
class MetricReport:
    per_pair: list = field(default_factory=list)   # {metric: score or None}
    means: dict = field(default_factory=dict)
    ci: dict = field(default_factory=dict)
    undefined: dict = field(default_factory=dict)
    mean_length: float = 0.0
    distinct_ratio: float = 0.0
    n_pairs: int = 0

    def to_records(self):
        """Structured text: one record per pair, then one summary record."""
        lines = [json.dumps({"pair": i, **scores}, sort_keys=True)
                 for i, scores in enumerate(self.per_pair)]
        lines.append(json.dumps({"summary": True, "means": self.means, "ci95": self.ci,
                                 "undefined": self.undefined, "mean_length": self.mean_length,
                                 "distinct_ratio": self.distinct_ratio,
                                 "n_pairs": self.n_pairs}, sort_keys=True))
        return "\n".join(lines) + "\n"

    def table(self):
        rows = [f"{'metric':<10}{'mean':>10}{'ci95':>10}{'undefined':>11}"]
        for m in METRICS:
            mean, ci = self.means.get(m), self.ci.get(m)
            fmt = (lambda x: f"{x:10.4f}" if x is not None else f"{'n/a':>10}")
            rows.append(f"{m:<10}{fmt(mean)}{fmt(ci)}{self.undefined.get(m, 0):>11d}")
        rows.append(f"mean reply length {self.mean_length:.2f}; "
                    f"distinct-reply ratio {self.distinct_ratio:.4f}; pairs {self.n_pairs}")
        return "\n".join(rows) + "\n"


def evaluate_pairs(replies, targets, emb):
    """Score aligned reply/target token lists with all three metrics."""
    if len(replies) != len(targets):
        raise ContractViolation("replies and targets differ in count")
    if not replies:
        raise ContractViolation("nothing to evaluate")
    per_pair = [{m: METRIC_FUNCS[m](r, t, emb) for m in METRICS}
                for r, t in zip(replies, targets)]
    report = MetricReport(per_pair=per_pair, n_pairs=len(replies))
    for m in METRICS:
        scores = [p[m] for p in per_pair]
        report.means[m], report.ci[m] = mean_ci(scores)
        report.undefined[m] = sum(s is None for s in scores)
    report.mean_length = float(np.mean([reply_length(r) for r in replies]))
    report.distinct_ratio = distinct_ratio(replies)
    return report


def response_stats(contexts, replies, oracle=None):
    """Length, distinct-reply ratio and, with an oracle, its log-likelihood of the replies.

    ``replies`` are id sequences (one per context).  ``oracle_valid`` is the
    fraction the oracle assigns non-zero probability; ``oracle_mean_logprob``
    averages over those valid replies only.
    """
    if not contexts or len(contexts) != len(replies):
        raise ContractViolation("need one reply per context and at least one context")
    lens = [list(r).index(EOS_ID) if EOS_ID in r else len(r) for r in replies]
    out = {"n_contexts": len(contexts), "mean_length": float(np.mean(lens)),
           "distinct_ratio": distinct_ratio(replies)}
    if oracle is not None:
        lps = [oracle.logprob(c, r) for c, r in zip(contexts, replies)]
        valid = [lp for lp in lps if math.isfinite(lp)]
        out["oracle_valid"] = len(valid) / len(lps)
        out["oracle_mean_logprob"] = float(np.mean(valid)) if valid else None
    return out


def oracle_log_likelihood(generator, oracle, contexts):
    """Mean over contexts of ``sum_y p_oracle(y | x) log pi(y | x)`` (exact)."""
    if not contexts:
        raise ContractViolation("no contexts")
    flat_ctx, flat_rep, flat_p, owner = [], [], [], []
    for i, c in enumerate(contexts):
        for reply, lp in oracle.replies(c):
            flat_ctx.append(c)
            flat_rep.append(reply)
            flat_p.append(math.exp(lp))
            owner.append(i)
    logq = generator.sequence_logprobs(flat_ctx, flat_rep)
    per_ctx = np.zeros(len(contexts))
    np.add.at(per_ctx, owner, np.asarray(flat_p) * logq)
    return float(per_ctx.mean())


def ranking_auc(positive, negative):
    """P(score(pos) > score(neg)) over all pairs, ties counting one half."""
    pos = np.asarray(positive, dtype=np.float64)
    neg = np.asarray(negative, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ContractViolation("AUC needs both positive and negative scores")
    diff = pos[:, None] - neg[None, :]
    return float(((diff > 0).sum() + 0.5 * (diff == 0).sum()) / diff.size)


def random_replies(dialogues, content_ids, rng):
    """Uniformly random content tokens, each matching its expert reply's length."""
    content_ids = np.asarray(content_ids)
    return [tuple(int(x) for x in rng.choice(content_ids, size=len(d.reply) - 1)) + (d.reply[-1],)
            for d in dialogues]


def reward_ranking_auc(score_fn, dialogues, content_ids, rng):
    """AUC of ``score_fn(contexts, replies)`` for expert vs. random replies, same contexts."""
    ctx = [d.context for d in dialogues]
    pos = score_fn(ctx, [d.reply for d in dialogues])
    neg = score_fn(ctx, random_replies(dialogues, content_ids, rng))
    return ranking_auc(pos, neg)


def write_plot_data(path, rows, columns):
    """Tab-separated ``iteration`` plus metric columns; missing cells are empty."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["iteration"] + list(columns)) + "\n")
        for r in rows:
            cells = [str(r["iteration"])]
            for c in columns:
                v = r.get(c)
                cells.append("" if v is None or isinstance(v, (list, dict)) else repr(v)
                             if isinstance(v, float) else str(v))
            fh.write("\t".join(cells) + "\n")
