"""Encoder-decoder generator with attention: the token-level policy.

A reply is a sequence of actions ending in EOS.  The state after ``t``
actions is the decoder's recurrent state having consumed BOS and those
actions; the transition is deterministic token appending.  At position
``max_len - 1`` the policy emits EOS with probability one, so every reply has
at most ``max_len`` actions and the sequence distribution sums to one.
"""

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .corpus import Vocabulary
from .errors import ContractViolation, UsageError
from .numerics import ParamStore, attention, backward, gru_encode, gru_stack_step, init_gru
from .numerics import tensor as T

PAD_ID, BOS_ID, EOS_ID, SEP_ID = (Vocabulary.pad_id, Vocabulary.bos_id,
                                  Vocabulary.eos_id, Vocabulary.sep_id)


def flatten_context(context):
    """Accept a flat id list or 1-2 utterances; join two turns with SEP."""
    context = tuple(context)
    if not context:
        raise ContractViolation("empty context")
    if isinstance(context[0], (int, np.integer)):
        return [int(i) for i in context]
    if len(context) == 1:
        return [int(i) for i in context[0]]
    if len(context) == 2:
        return [int(i) for i in context[0]] + [SEP_ID] + [int(i) for i in context[1]]
    raise ContractViolation(f"context must hold 1 or 2 utterances, got {len(context)}")


def pad_batch(seqs, pad=PAD_ID):
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), pad, dtype=np.int64)
    mask = np.zeros((len(seqs), width), dtype=bool)
    for i, s in enumerate(seqs):
        ids[i, :len(s)] = s
        mask[i, :len(s)] = True
    return ids, mask


def sample_categorical(logp, rng):
    """One draw per row of a ``(B, V)`` log-probability matrix (inverse CDF)."""
    probs = np.exp(logp)
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(len(probs)) * cdf[:, -1]
    idx = (cdf < u[:, None]).sum(axis=1)
    return np.minimum(idx, probs.shape[1] - 1)


@dataclass(frozen=True)
class Trajectory:
    context: tuple
    actions: tuple
    logprobs: tuple

    @property
    def total_logprob(self):
        return float(sum(self.logprobs))

    def __len__(self):
        return len(self.actions)


@dataclass(frozen=True)
class EncoderOutput:
    states: np.ndarray   # (L, H): top-layer state per context position
    hidden: tuple        # per-layer final state, the decoder's initial state


@dataclass(frozen=True)
class DecoderState:
    """Recurrent state plus the token to be consumed next (``None`` once consumed)."""

    enc: np.ndarray
    enc_mask: np.ndarray
    hidden: tuple
    pending: object
    t: int

    def feed(self, action):
        if self.pending is not None:
            raise UsageError("state already has a pending token; call step_logprobs first")
        return replace(self, pending=int(action), t=self.t + 1)


@dataclass(frozen=True)
class EntropyEstimate:
    per_trajectory: float
    per_step: float
    stderr: float
    n_samples: int


class GeneratorModel:
    def __init__(self, vocab_size, emb_dim=16, hidden=32, n_layers=2, max_len=8,
                 blocked_ids=(PAD_ID, BOS_ID), seed=0, dropout=0.0):
        if vocab_size <= EOS_ID or max_len < 1:
            raise ContractViolation("vocab must contain the reserved ids; max_len >= 1")
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden = hidden
        self.n_layers = n_layers
        self.max_len = max_len
        self.dropout = dropout
        self.blocked_ids = tuple(sorted(set(int(i) for i in blocked_ids) | {PAD_ID}))
        self.logit_mask = np.zeros(vocab_size)
        self.logit_mask[list(self.blocked_ids)] = -np.inf
        if np.all(np.isinf(self.logit_mask)):
            raise ContractViolation("every token is blocked")
        self._forced = np.full(vocab_size, -np.inf)
        self._forced[EOS_ID] = 0.0

        self.params = ParamStore(seed)
        p = self.params
        p.add("emb", (vocab_size, emb_dim))
        for split in ("enc", "dec"):
            for layer in range(n_layers):
                init_gru(p, f"{split}.l{layer}.", emb_dim if layer == 0 else hidden, hidden)
        p.add("out.W", (2 * hidden, vocab_size))
        p.add("out.b", (vocab_size,))

    def config(self):
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim, "hidden": self.hidden,
                "n_layers": self.n_layers, "max_len": self.max_len,
                "blocked_ids": list(self.blocked_ids), "dropout": self.dropout}

    @classmethod
    def from_config(cls, cfg, params):
        model = cls(cfg["vocab_size"], cfg["emb_dim"], cfg["hidden"], cfg["n_layers"],
                    cfg["max_len"], cfg["blocked_ids"], params.rng_seed, cfg.get("dropout", 0.0))
        model.params.restore(params.snapshot())
        return model

    # core computations ------------------------------------------------------
    def _views(self, grad):
        p = self.params
        return {
            "emb": p["emb"] if grad else p["emb"].value,
            "enc": [p.view(f"enc.l{i}.", grad) for i in range(self.n_layers)],
            "dec": [p.view(f"dec.l{i}.", grad) for i in range(self.n_layers)],
            "W": p["out.W"] if grad else p["out.W"].value,
            "b": p["out.b"] if grad else p["out.b"].value,
        }

    def _encode(self, P, ids, mask, rng=None):
        drop = self.dropout if rng is not None else 0.0
        inputs = [P["emb"][ids[:, t]] for t in range(ids.shape[1])]
        top, hid = gru_encode(inputs, mask, P["enc"], self.hidden, dropout=drop, rng=rng)
        return T.stack(top, axis=1), hid

    def _decode_step(self, P, tokens, hid, enc, enc_mask, rng=None):
        drop = self.dropout if rng is not None else 0.0
        x = P["emb"][tokens]
        hid = gru_stack_step(x, hid, P["dec"], self.n_layers, drop, rng)
        ctx, _ = attention(hid[-1], enc, enc_mask)
        logits = T.concat([hid[-1], ctx], axis=-1) @ P["W"] + P["b"] + self.logit_mask
        return T.log_softmax(logits, axis=-1), hid

    def _teacher_forced(self, contexts, replies, grad, rng=None):
        """Per-position log-probs of ``replies``.

        Returns ``(tok_logp, valid, forced)``, each ``(B, T)``.  ``tok_logp`` is
        the raw model log-prob (no EOS forcing).  Padding positions, and forced
        positions whose raw log-prob is -inf, hold a finite placeholder so that
        masking never multiplies an infinity.
        """
        P = self._views(grad)
        ids, mask = pad_batch([flatten_context(c) for c in contexts])
        enc, hid = self._encode(P, ids, mask, rng)
        width = max(len(r) for r in replies)
        tgt, valid = pad_batch([list(r) for r in replies])
        for r in replies:
            if any(not 0 <= a < self.vocab_size for a in r):
                raise ContractViolation("reply id outside the vocabulary")
        inputs = np.concatenate([np.full((len(replies), 1), BOS_ID), tgt[:, :-1]], axis=1)
        inputs = np.where(valid, inputs, EOS_ID)
        forced = np.zeros_like(valid)
        if width >= self.max_len:
            forced[:, self.max_len - 1] = valid[:, self.max_len - 1]
        cols = []
        for t in range(width):
            logp, hid = self._decode_step(P, inputs[:, t], hid, enc, mask, rng)
            lp = logp.value if isinstance(logp, T.Tensor) else logp
            real = lp[np.arange(len(lp)), tgt[:, t]]
            usable = valid[:, t] & (~forced[:, t] | np.isfinite(real))
            target = np.where(usable, tgt[:, t], np.argmax(lp, axis=1))
            cols.append(T.pick(logp, target))
        return T.stack(cols, axis=1), valid, forced

    # single-context API ---------------------------------------------------------
    def encode(self, context):
        ids = flatten_context(context)
        P = self._views(False)
        enc, hid = self._encode(P, np.array([ids]), np.ones((1, len(ids)), bool))
        return EncoderOutput(enc[0], tuple(h[0] for h in hid))

    def initial_state(self, context):
        ids = flatten_context(context)
        P = self._views(False)
        mask = np.ones((1, len(ids)), bool)
        enc, hid = self._encode(P, np.array([ids]), mask)
        return DecoderState(enc, mask, tuple(hid), BOS_ID, 0)

    def step_logprobs(self, state):
        """Log-distribution over the next action, and the advanced state.

        Feed the chosen action into the returned state with ``state.feed(a)``.
        """
        if state.pending is None:
            raise UsageError("no pending token: feed an action before stepping")
        P = self._views(False)
        logp, hid = self._decode_step(P, np.array([state.pending]), list(state.hidden),
                                      state.enc, state.enc_mask)
        out = self._forced.copy() if state.t >= self.max_len - 1 else logp[0]
        return out, replace(state, hidden=tuple(hid), pending=None)

    def sequence_logprob(self, context, reply):
        return float(self.sequence_logprobs([context], [reply])[0])

    def sequence_logprobs(self, contexts, replies):
        """Exact log pi(reply | context) including the EOS step, as an array."""
        for r in replies:
            if not r or r[-1] != EOS_ID:
                raise ContractViolation("reply must end with EOS")
        tok, valid, forced = self._teacher_forced(contexts, replies, grad=False)
        tok = np.where(forced, 0.0, tok)
        out = np.where(valid, tok, 0.0).sum(axis=1)
        for i, r in enumerate(replies):
            if len(r) > self.max_len or EOS_ID in r[:-1]:
                out[i] = -np.inf
        return out

    # sampling --------------------------------------------------------------------
    def rollout(self, contexts, prefixes, rng, max_len=None):
        """Complete each prefix by ancestral sampling; one Trajectory per row.

        Row ``i`` conditions on ``contexts[i]`` and copies ``prefixes[i]``
        verbatim before sampling.  Recorded log-probs cover every action,
        prefix included.
        """
        max_len = self.max_len if max_len is None else max_len
        if max_len < 1:
            raise ContractViolation("max_len must be >= 1")
        n = len(contexts)
        prefixes = [tuple(int(a) for a in p) for p in prefixes]
        for p in prefixes:
            if EOS_ID in p:
                raise ContractViolation("prefix already contains EOS")
            if len(p) >= max_len:
                raise ContractViolation("prefix leaves no room for EOS within max_len")
        P = self._views(False)
        flat = [tuple(flatten_context(c)) for c in contexts]
        uniq = sorted(set(flat))
        where = {c: i for i, c in enumerate(uniq)}
        ids, mask = pad_batch([list(c) for c in uniq])
        enc_u, hid_u = self._encode(P, ids, mask)
        row_ctx = np.array([where[c] for c in flat], dtype=np.int64)

        actions = [list(p) for p in prefixes]
        logps = [[] for _ in range(n)]
        active = np.arange(n)
        hid = [h[row_ctx] for h in hid_u]
        tokens = np.full(n, BOS_ID, dtype=np.int64)
        for t in range(max_len):
            enc = enc_u[row_ctx[active]]
            emask = mask[row_ctx[active]]
            logp, hid = self._decode_step(P, tokens, hid, enc, emask)
            if t == max_len - 1:
                chosen = np.full(len(active), EOS_ID, dtype=np.int64)
                step_lp = np.zeros(len(active))
            else:
                chosen = sample_categorical(logp, rng)
                for j, row in enumerate(active):
                    if t < len(prefixes[row]):
                        chosen[j] = prefixes[row][t]
                step_lp = logp[np.arange(len(active)), chosen]
            for j, row in enumerate(active):
                if t >= len(prefixes[row]):
                    actions[row].append(int(chosen[j]))
                logps[row].append(float(step_lp[j]))
            keep = chosen != EOS_ID
            if not keep.any():
                break
            active = active[keep]
            hid = [h[keep] for h in hid]
            tokens = chosen[keep]
        return [Trajectory(tuple(contexts[i]), tuple(actions[i]), tuple(logps[i]))
                for i in range(n)]

    def sample_reply(self, context, max_len=None, seed=0):
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self.rollout([context], [()], rng, max_len)[0]

    def sample_replies(self, contexts, rng, max_len=None):
        return self.rollout(contexts, [()] * len(contexts), rng, max_len)

    def mc_rollouts(self, context, prefix, n_rollouts, seed=0):
        if n_rollouts < 1:
            raise ContractViolation("n_rollouts must be >= 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return self.rollout([context] * n_rollouts, [tuple(prefix)] * n_rollouts, rng)

    def beam_search(self, context, beam_size, max_len=None, length_normalize=False):
        """Best completed reply among those the beam explores.

        Without length normalisation the search stops once the best finished
        hypothesis outscores every live one (scores only decrease).
        """
        if beam_size < 1:
            raise ContractViolation("beam_size must be >= 1")
        max_len = self.max_len if max_len is None else max_len
        P = self._views(False)
        ids = flatten_context(context)
        emask = np.ones((1, len(ids)), bool)
        enc, hid = self._encode(P, np.array([ids]), emask)

        def rank(score, length):
            return score / length if length_normalize else score

        live = [((), (), 0.0)]   # actions, step logps, score
        finished = []
        for t in range(max_len):
            k = len(live)
            tokens = np.array([a[-1] if a else BOS_ID for a, _, _ in live])
            logp, new_hid = self._decode_step(P, tokens, hid, np.repeat(enc, k, axis=0),
                                              np.repeat(emask, k, axis=0))
            if t == max_len - 1:
                logp = np.tile(self._forced, (k, 1))
            scores = np.array([s for _, _, s in live])[:, None] + logp
            flat = scores.reshape(-1)
            order = np.argsort(-flat, kind="stable")
            next_live, parents = [], []
            for pos in order:
                if not np.isfinite(flat[pos]) or len(next_live) == beam_size:
                    break
                row, tok = divmod(int(pos), self.vocab_size)
                acts, lps, _ = live[row]
                cand = (acts + (tok,), lps + (float(logp[row, tok]),), float(flat[pos]))
                if tok == EOS_ID:
                    finished.append(cand)
                else:
                    next_live.append(cand)
                    parents.append(row)
            if not next_live:
                break
            live = next_live
            hid = [h[np.array(parents)] for h in new_hid]
            if finished and not length_normalize:
                if max(f[2] for f in finished) >= max(s for _, _, s in live):
                    break
        best = max(finished, key=lambda f: (rank(f[2], len(f[0]))))
        return Trajectory(tuple(context), best[0], best[1])

    def causal_entropy_estimate(self, contexts, n_samples, seed=0):
        """Monte Carlo estimate of E[-sum_t log pi(a_t | s_t)] over sampled replies."""
        if n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        ctxs = [contexts[i % len(contexts)] for i in range(n_samples)]
        trajs = self.sample_replies(ctxs, rng)
        per_traj = np.array([-sum(t.logprobs) for t in trajs])
        steps = sum(len(t) for t in trajs)
        stderr = float(per_traj.std(ddof=1) / math.sqrt(n_samples)) if n_samples > 1 else 0.0
        return EntropyEstimate(float(per_traj.mean()), float(per_traj.sum() / steps), stderr,
                               n_samples)

    # maximum likelihood -----------------------------------------------------------
    def mle_loss(self, batch, rng=None):
        """Mean per-token NLL of the replies, teacher forced (recorded)."""
        if not batch:
            raise ContractViolation("empty batch")
        tok, valid, _ = self._teacher_forced([d.context for d in batch],
                                             [d.reply for d in batch], grad=True, rng=rng)
        return -(tok * valid.astype(np.float64)).sum() * (1.0 / valid.sum())

    def mle_step(self, batch, rng=None):
        """Populate grads with the MLE loss gradient; returns the loss value."""
        self.params.zero_grad()
        loss = self.mle_loss(batch, rng)
        backward(loss)
        return loss.item()

    def validation_metrics(self, batch):
        """``(mean token NLL, next-token accuracy)`` under teacher forcing."""
        P = self._views(False)
        contexts = [d.context for d in batch]
        replies = [d.reply for d in batch]
        ids, mask = pad_batch([flatten_context(c) for c in contexts])
        enc, hid = self._encode(P, ids, mask)
        tgt, valid = pad_batch([list(r) for r in replies])
        inputs = np.concatenate([np.full((len(batch), 1), BOS_ID), tgt[:, :-1]], axis=1)
        inputs = np.where(valid, inputs, EOS_ID)
        nll, correct = 0.0, 0
        for t in range(tgt.shape[1]):
            logp, hid = self._decode_step(P, inputs[:, t], hid, enc, mask)
            v = valid[:, t]
            nll -= logp[np.arange(len(batch)), tgt[:, t]][v].sum()
            correct += int((np.argmax(logp, axis=1) == tgt[:, t])[v].sum())
        n = int(valid.sum())
        return nll / n, correct / n


def write_sample_dump(path, trajectories, vocab):
    """One JSON record per line: context, reply, logprob, per-step logprobs."""
    with open(path, "w", encoding="utf-8") as fh:
        for tr in trajectories:
            ctx = tr.context
            utts = [ctx] if ctx and isinstance(ctx[0], (int, np.integer)) else list(ctx)
            record = {
                "context": [" ".join(vocab.decode(u, strip_eos=False)) for u in utts],
                "reply": " ".join(vocab.decode(tr.actions)),
                "logprob": tr.total_logprob,
                "step_logprobs": list(tr.logprobs),
            }
            fh.write(json.dumps(record, sort_keys=True) + "\n")
