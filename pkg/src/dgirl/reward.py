"""Per-step reward model and the sample-based maximum-entropy IRL objective.

Dataflow for one (state, action) pair::

    context ids --input encoder (GRU)--> context summary = s_1
    s_{t+1} = state_encoder(embed(a_t), s_t)
    r(s_t, a_t) = out_mlp([tanh(state_mlp(s_t)), tanh(action_mlp(embed(a_t)))])

A trajectory's reward is the sum of its step rewards, EOS step included.
The reward loss is

    L = -mean_demo r(zeta_i) + log mean_j exp(r(zeta_j) - log q(zeta_j))

with ``q`` the generator's exact sequence probability of each sample.
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation
from .numerics import (AdamState, ParamStore, adam_step, backward, clip_gradients, gru_encode,
                       init_gru, init_mlp, mlp_forward)
from .numerics import tensor as T
from .policy import EOS_ID, flatten_context, pad_batch


class RewardModel:
    def __init__(self, vocab_size, emb_dim=16, hidden=32, n_layers=1, branch_dim=16,
                 out_hidden=16, seed=0):
        self.vocab_size = vocab_size
        self.emb_dim = emb_dim
        self.hidden = hidden
        self.n_layers = n_layers
        self.branch_dim = branch_dim
        self.out_hidden = out_hidden
        self.params = ParamStore(seed)
        p = self.params
        p.add("emb", (vocab_size, emb_dim))
        for layer in range(n_layers):
            init_gru(p, f"inp.l{layer}.", emb_dim if layer == 0 else hidden, hidden)
        init_gru(p, "state.l0.", emb_dim, hidden)
        init_mlp(p, "s_mlp.", [hidden, branch_dim])
        init_mlp(p, "a_mlp.", [emb_dim, branch_dim])
        init_mlp(p, "out.", [2 * branch_dim, out_hidden, 1])

    def config(self):
        return {"vocab_size": self.vocab_size, "emb_dim": self.emb_dim, "hidden": self.hidden,
                "n_layers": self.n_layers, "branch_dim": self.branch_dim,
                "out_hidden": self.out_hidden}

    def step_rewards(self, contexts, replies, grad=False):
        """``(rewards (B, T), valid (B, T))``; rewards at invalid positions are 0."""
        p = self.params
        emb = p["emb"] if grad else p["emb"].value
        inp_layers = [p.view(f"inp.l{i}.", grad) for i in range(self.n_layers)]
        state_layer = [p.view("state.l0.", grad)]
        ids, mask = pad_batch([flatten_context(c) for c in contexts])
        _, ctx_hid = gru_encode([emb[ids[:, t]] for t in range(ids.shape[1])], mask,
                                inp_layers, self.hidden)
        acts, valid = pad_batch([list(r) for r in replies], pad=EOS_ID)
        b, width = acts.shape
        if np.any(acts >= self.vocab_size) or np.any(acts < 0):
            raise ContractViolation("action id outside the vocabulary")
        a_emb = [emb[acts[:, t]] for t in range(width)]
        # s_1 is the context summary; s_{t+1} consumes a_t
        states = [ctx_hid[-1]]
        if width > 1:
            top, _ = gru_encode(a_emb[:-1], valid[:, :-1], state_layer, self.hidden,
                                h0=[ctx_hid[-1]])
            states.extend(top)
        s = T.reshape(T.stack(states, axis=1), (b * width, self.hidden))
        a = T.reshape(T.stack(a_emb, axis=1), (b * width, self.emb_dim))
        s_feat = mlp_forward(s, p.view("s_mlp.", grad), final_activation="tanh")
        a_feat = mlp_forward(a, p.view("a_mlp.", grad), final_activation="tanh")
        r = mlp_forward(T.concat([s_feat, a_feat], axis=-1), p.view("out.", grad))
        r = T.reshape(r, (b, width)) * valid.astype(np.float64)
        return r, valid

    def trajectory_rewards(self, contexts, replies, grad=False):
        r, _ = self.step_rewards(contexts, replies, grad)
        return T.sum_(r, axis=1)

    def step_reward(self, context, prefix, action):
        prefix = tuple(prefix)
        if EOS_ID in prefix:
            raise ContractViolation("prefix contains EOS")
        r, _ = self.step_rewards([context], [prefix + (int(action),)])
        return float(r[0, -1])

    def trajectory_reward(self, context, reply):
        reply = tuple(reply)
        if not reply or reply[-1] != EOS_ID:
            raise ContractViolation("reply must end with EOS")
        return float(self.trajectory_rewards([context], [reply])[0])


def _check_prefix(prefix):
    prefix = tuple(int(a) for a in prefix)
    if EOS_ID in prefix[:-1]:
        raise ContractViolation("prefix contains EOS before its last position")
    return prefix


def partial_reward_mc(reward, policy, context, prefix, n_rollouts, seed=0):
    """Reward-to-go ``sum_{t' >= t} r(s_t', a_t')`` from the last prefix action.

    A prefix ending in EOS is exact (its final step reward); otherwise the
    reply is completed by ``n_rollouts`` policy rollouts and the suffix sums
    are averaged.  An empty prefix gives the expected full-reply reward.
    """
    prefix = _check_prefix(prefix)
    t = max(len(prefix) - 1, 0)
    if prefix and prefix[-1] == EOS_ID:
        r, _ = reward.step_rewards([context], [prefix])
        return float(r[0, -1])
    if n_rollouts < 1:
        raise ContractViolation("n_rollouts must be >= 1")
    rolls = policy.mc_rollouts(context, prefix, n_rollouts, seed)
    r, _ = reward.step_rewards([context] * n_rollouts, [x.actions for x in rolls])
    return float(np.mean(r[:, t:].sum(axis=1)))


def rewards_to_go(reward, policy, trajectories, n_rollouts, rng):
    """Per-step reward-to-go estimates for sampled trajectories, batched.

    Entry ``t`` is the (Monte Carlo) reward-to-go from action ``a_t``; the
    final EOS entry is exact.
    """
    contexts, prefixes, owners = [], [], []
    for i, tr in enumerate(trajectories):
        for t in range(1, len(tr.actions)):
            for _ in range(n_rollouts):
                contexts.append(tr.context)
                prefixes.append(tr.actions[:t])
                owners.append((i, t - 1))
    done = policy.rollout(contexts, prefixes, rng) if contexts else []
    own = [np.zeros(len(tr.actions)) for tr in trajectories]
    r_own, _ = reward.step_rewards([tr.context for tr in trajectories],
                                   [tr.actions for tr in trajectories])
    for i, tr in enumerate(trajectories):
        own[i][-1] = r_own[i, len(tr.actions) - 1]
    if done:
        r_roll, _ = reward.step_rewards([d.context for d in done], [d.actions for d in done])
        suffix = np.cumsum(r_roll[:, ::-1], axis=1)[:, ::-1]
        for k, (i, t) in enumerate(owners):
            own[i][t] += suffix[k, t] / n_rollouts
    return own


@dataclass(frozen=True)
class WeightedSample:
    trajectory: object
    reward: float
    log_q: float
    log_weight: float
    weight: float   # self-normalised


def normalized_log_weights(rewards, log_q):
    """``(log w, w / sum w, ESS)`` for ``w_j = exp(r_j) / q_j`` in log space."""
    rewards = np.asarray(rewards, dtype=np.float64)
    log_q = np.asarray(log_q, dtype=np.float64)
    if rewards.size == 0:
        raise ContractViolation("no samples")
    if not np.all(np.isfinite(log_q)):
        raise ContractViolation("proposal log-probabilities must be finite")
    log_w = rewards - log_q
    norm = np.exp(log_w - T.logsumexp(log_w, axis=0))
    ess = 1.0 / float(np.sum(norm * norm))
    return log_w, norm, ess


def importance_weights(reward, samples):
    """WeightedSample per ``(trajectory, log_q)`` pair, plus the effective sample size."""
    if not samples:
        raise ContractViolation("empty sample list")
    trajs = [s[0] for s in samples]
    log_q = [s[1] for s in samples]
    r = reward.trajectory_rewards([t.context for t in trajs], [t.actions for t in trajs])
    log_w, norm, ess = normalized_log_weights(r, log_q)
    out = [WeightedSample(t, float(ri), float(lq), float(lw), float(w))
           for t, ri, lq, lw, w in zip(trajs, r, log_q, log_w, norm)]
    return out, ess


def _demo_arrays(demo):
    return [d.context for d in demo], [d.reply for d in demo]


def reward_loss(reward, demo, samples):
    """Sampled MaxEnt-IRL loss as a recorded scalar; ``samples`` are ``(traj, log_q)``."""
    if not demo or not samples:
        raise ContractViolation("demo and sample batches must be non-empty")
    log_q = np.array([s[1] for s in samples], dtype=np.float64)
    if not np.all(np.isfinite(log_q)):
        raise ContractViolation("proposal log-probabilities must be finite")
    d_ctx, d_rep = _demo_arrays(demo)
    r_demo = reward.trajectory_rewards(d_ctx, d_rep, grad=True)
    r_samp = reward.trajectory_rewards([s[0].context for s in samples],
                                       [s[0].actions for s in samples], grad=True)
    return -T.mean(r_demo) + T.logsumexp(r_samp - log_q, axis=0) - math.log(len(samples))


def reward_update(reward, demo, samples, state=None, clip_norm=5.0):
    """Importance-weighted gradient step; returns ``(loss, ess)``.

    The gradient is formed explicitly as
    ``-mean_demo grad r + sum_j (w_j / Z) grad r(zeta_j)``
    from frozen self-normalised weights, then clipped and applied with Adam.
    """
    if not demo or not samples:
        raise ContractViolation("demo and sample batches must be non-empty")
    log_q = np.array([s[1] for s in samples], dtype=np.float64)
    d_ctx, d_rep = _demo_arrays(demo)
    reward.params.zero_grad()
    r_demo = reward.trajectory_rewards(d_ctx, d_rep, grad=True)
    r_samp = reward.trajectory_rewards([s[0].context for s in samples],
                                       [s[0].actions for s in samples], grad=True)
    log_w, norm, ess = normalized_log_weights(r_samp.value, log_q)
    surrogate = -T.mean(r_demo) + T.sum_(r_samp * norm)
    backward(surrogate)
    loss = float(-np.mean(r_demo.value) + T.logsumexp(log_w, axis=0) - math.log(len(samples)))
    if state is not None:
        clip_gradients(reward.params, clip_norm)
        adam_step(reward.params, state)
    return loss, ess


def make_optimizer(reward, lr=0.001):
    return AdamState.for_params(reward.params, lr=lr)


def write_reward_dump(path, reward, pairs, vocab):
    """One JSON record per ``(context, reply)``: total and per-step rewards."""
    ctxs = [c for c, _ in pairs]
    reps = [tuple(r) for _, r in pairs]
    r, valid = reward.step_rewards(ctxs, reps)
    with open(path, "w", encoding="utf-8") as fh:
        for i, (c, rep) in enumerate(zip(ctxs, reps)):
            steps = [float(v) for v in r[i, :len(rep)]]
            rec = {"context": " ".join(vocab.decode(flatten_context(c), strip_eos=False)),
                   "reply": " ".join(vocab.decode(rep)),
                   "total_reward": float(sum(steps)), "step_rewards": steps}
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
