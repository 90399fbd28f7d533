"""Hierarchical real/fake dialogue classifier and its Monte Carlo Q-value.

Label orientation
-----------------
The adversarial-imitation saddle objective writes the classifier D as the
probability that a state-action pair came from the *policy*: the
classifier ascends ``E_pi[log D] + E_expert[log(1 - D)]``.  Here
:meth:`DiscriminatorModel.classify` returns ``P(real)`` instead, i.e.
``D_objective = 1 - classify``, selected by :data:`CLASSIFY_RETURNS_REAL`.
Under that mapping the ascent above is exactly minimising the binary
cross-entropy in :func:`disc_loss` with expert replies labelled 1, and the
generator's reward ``log classify`` is large for realistic replies.
"""

import numpy as np

from .corpus import Dialogue
from .errors import ContractViolation
from .numerics import AdamState, ParamStore, adam_step, backward, clip_gradients, gru_encode, init_gru
from .numerics import tensor as T
from .policy import EOS_ID

CLASSIFY_RETURNS_REAL = True
PROB_FLOOR = 1e-6


def _split_context(context):
    context = tuple(context)
    if context and isinstance(context[0], (int, np.integer)):
        return ((), tuple(context))
    if len(context) == 1:
        return ((), tuple(context[0]))
    if len(context) == 2:
        return tuple(context[0]), tuple(context[1])
    raise ContractViolation(f"context must hold 1 or 2 utterances, got {len(context)}")


class DiscriminatorModel:
    """Utterance encoder -> dialogue-level encoder over (turn1, turn2, reply) -> logit.

    One-turn contexts leave the turn-1 slot empty; an empty utterance
    summarises to the zero vector.
    """

    def __init__(self, vocab_size, emb_dim=16, hidden=32, n_layers=1, seed=0):
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden = hidden
        self.n_layers = n_layers
        self.params = ParamStore(seed)
        p = self.params
        p.add("emb", (vocab_size, emb_dim))
        for layer in range(n_layers):
            init_gru(p, f"utt.l{layer}.", emb_dim if layer == 0 else hidden, hidden)
        for layer in range(n_layers):
            init_gru(p, f"ctx.l{layer}.", hidden, hidden)
        p.add("head.W", (hidden, 1))
        p.add("head.b", (1,))

    def config(self):
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim,
                "hidden": self.hidden, "n_layers": self.n_layers}

    def _logits(self, contexts, replies, grad):
        p = self.params
        emb = p["emb"] if grad else p["emb"].value
        utt_layers = [p.view(f"utt.l{i}.", grad) for i in range(self.n_layers)]
        ctx_layers = [p.view(f"ctx.l{i}.", grad) for i in range(self.n_layers)]
        utts = []
        for ctx, reply in zip(contexts, replies):
            first, second = _split_context(ctx)
            reply = tuple(reply)
            if not second and not reply:
                raise ContractViolation("dialogue with empty context and empty reply")
            utts.extend([first, second, reply])
        b = len(replies)
        width = max(1, max(len(u) for u in utts))
        ids = np.full((3 * b, width), EOS_ID, dtype=np.int64)
        mask = np.zeros((3 * b, width), dtype=bool)
        for i, u in enumerate(utts):
            ids[i, :len(u)] = u
            mask[i, :len(u)] = True
        inputs = [emb[ids[:, t]] for t in range(width)]
        _, hid = gru_encode(inputs, mask, utt_layers, self.hidden)
        summaries = T.reshape(hid[-1], (b, 3, self.hidden))
        turn_inputs = [summaries[:, k] for k in range(3)]
        _, top = gru_encode(turn_inputs, np.ones((b, 3), bool), ctx_layers, self.hidden)
        head_w = p["head.W"] if grad else p["head.W"].value
        head_b = p["head.b"] if grad else p["head.b"].value
        return T.reshape(top[-1] @ head_w + head_b, (b,))

    def prob_real(self, contexts, replies, grad=False):
        """Clamped P(real) per dialogue, strictly inside (0, 1)."""
        return T.clip(T.sigmoid(self._logits(contexts, replies, grad)),
                      PROB_FLOOR, 1.0 - PROB_FLOOR)

    def classify(self, dialogue, reply=None):
        """P(real) for a Dialogue, or for ``(context, reply)`` given separately."""
        if reply is None:
            context, reply = dialogue.context, dialogue.reply
        else:
            context = dialogue
        return float(self.prob_real([context], [reply])[0])


def disc_loss(disc, real, fake):
    """Binary cross-entropy, expert label 1, averaged per arm then over arms.

    ``real`` is a list of Dialogues; ``fake`` a list of ``(context, reply)``
    pairs or Trajectories.
    """
    if not real or not fake:
        raise ContractViolation("both real and fake batches must be non-empty")
    fake_ctx, fake_reply = _unpack(fake)
    contexts = [d.context for d in real] + fake_ctx
    replies = [d.reply for d in real] + fake_reply
    p = disc.prob_real(contexts, replies, grad=True)
    n_real = len(real)
    log_real = T.log(p[:n_real])
    log_fake = T.log(1.0 - p[n_real:])
    return -0.5 * (T.mean(log_real) + T.mean(log_fake))


def _unpack(items):
    ctxs, replies = [], []
    for it in items:
        if isinstance(it, Dialogue):
            ctxs.append(it.context)
            replies.append(it.reply)
        elif hasattr(it, "actions"):
            ctxs.append(it.context)
            replies.append(it.actions)
        else:
            ctxs.append(it[0])
            replies.append(it[1])
    return ctxs, replies


def disc_update(disc, real, fake, state=None, clip_norm=5.0):
    """One Adam step on :func:`disc_loss`; returns the pre-update loss."""
    disc.params.zero_grad()
    loss = disc_loss(disc, real, fake)
    backward(loss)
    if state is not None:
        clip_gradients(disc.params, clip_norm)
        adam_step(disc.params, state)
    return loss.item()


def make_optimizer(disc, lr=0.001):
    return AdamState.for_params(disc.params, lr=lr)


def q_value(disc, generator, context, prefix, n_rollouts, seed=0):
    """Monte Carlo estimate of E[log P_real(context, completed reply)].

    A prefix that already ends in EOS is scored directly, without rollouts.
    """
    prefix = tuple(prefix)
    if prefix and prefix[-1] == EOS_ID:
        return float(np.log(disc.prob_real([context], [prefix])[0]))
    rollouts = generator.mc_rollouts(context, prefix, n_rollouts, seed)
    p = disc.prob_real([context] * n_rollouts, [r.actions for r in rollouts])
    return float(np.mean(np.log(p)))


def q_values(disc, generator, trajectories, n_rollouts, rng):
    """Per-step Q estimates for each sampled trajectory (one array per trajectory).

    Entry ``t`` scores action ``a_t`` given its prefix: completed replies are
    scored directly, intermediate prefixes through ``n_rollouts`` rollouts.
    All rollouts and classifications run as single batches.
    """
    contexts, prefixes, owners = [], [], []
    for i, tr in enumerate(trajectories):
        for t in range(1, len(tr.actions)):
            for _ in range(n_rollouts):
                contexts.append(tr.context)
                prefixes.append(tr.actions[:t])
                owners.append((i, t - 1))
    done = generator.rollout(contexts, prefixes, rng) if contexts else []
    score_ctx = [tr.context for tr in trajectories] + [r.context for r in done]
    score_rep = [tr.actions for tr in trajectories] + [r.actions for r in done]
    logp = np.log(disc.prob_real(score_ctx, score_rep))
    out = [np.zeros(len(tr.actions)) for tr in trajectories]
    for i, tr in enumerate(trajectories):
        out[i][-1] = logp[i]
    offset = len(trajectories)
    for k, (i, t) in enumerate(owners):
        out[i][t] += logp[offset + k] / n_rollouts
    return out
