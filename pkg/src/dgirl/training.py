"""Training regimes: MLE pretraining, DG-AIL and DG-AIRL.

All randomness flows from ``TrainConfig.seed``; given identical config and
inputs the RunLog and every checkpoint are byte-identical.  Wall-clock time
is therefore kept out of the RunLog (the CLI manifest records it).
"""

import dataclasses
import hashlib
import json
import math
import warnings
from dataclasses import dataclass

import numpy as np

from . import discriminator as disc_mod
from . import reward as reward_mod
from .errors import ContractViolation, TrainingDiverged
from .numerics import AdamState, adam_step, backward, checkpoint_bytes, clip_gradients
from .numerics import tensor as T
from .policy import BOS_ID, EOS_ID, PAD_ID, GeneratorModel

PRESETS = ("desk", "paper")


@dataclass
class TrainConfig:
    preset: str = "desk"
    seed: int = 0
    entropy_lambda: float = 0.01
    gamma: float = 1.0              # kept for completeness; no update uses it
    lr: float = 0.001
    disc_lr: float = 0.01
    reward_lr: float = 0.003
    clip_norm: float = 5.0
    n_rollouts: int = 8
    beam_size: int = 8
    batch_size: int = 16
    d_steps: int = 1
    g_steps: int = 1
    teacher_forcing_ratio: float = 1.0
    pretrain_epochs: int = 16
    pretrain_max_steps: int = 2000
    eval_every: int = 100
    adv_iterations: int = 200
    warmup_steps: int = 0
    baseline: bool = True
    baseline_momentum: float = 0.9
    emb_dim: int = 16
    hidden: int = 32
    gen_layers: int = 2
    critic_layers: int = 1
    dropout: float = 0.0
    vocab_cap: int = 64
    max_len: int = 0                # 0 = twice the longest training reply
    ess_warn: float = 1.5
    ess_window: int = 50
    dump_every: int = 50
    dump_samples: int = 3

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.preset not in PRESETS:
            raise ContractViolation(f"unknown preset {self.preset!r}")
        if self.entropy_lambda < 0:
            raise ContractViolation("entropy_lambda must be >= 0")
        if self.n_rollouts < 1:
            raise ContractViolation("n_rollouts must be >= 1")
        for name in ("d_steps", "g_steps", "batch_size", "beam_size"):
            if getattr(self, name) < 1:
                raise ContractViolation(f"{name} must be >= 1")
        if not 0.0 <= self.teacher_forcing_ratio <= 1.0:
            raise ContractViolation("teacher_forcing_ratio must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ContractViolation("dropout must lie in [0, 1)")
        if not 0.0 <= self.baseline_momentum < 1.0:
            raise ContractViolation("baseline_momentum must lie in [0, 1)")
        for name in ("lr", "disc_lr", "reward_lr", "clip_norm"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        for name in ("pretrain_epochs", "pretrain_max_steps", "adv_iterations", "warmup_steps",
                     "max_len", "eval_every", "dump_every", "dump_samples"):
            if getattr(self, name) < 0:
                raise ContractViolation(f"{name} must be >= 0")

    @classmethod
    def preset_config(cls, name, **overrides):
        if name == "paper":
            base = dict(preset="paper", emb_dim=200, hidden=1024, gen_layers=2, critic_layers=2,
                        dropout=0.3, vocab_cap=20000, beam_size=8, lr=0.001, disc_lr=0.001,
                        reward_lr=0.001, max_len=80)
        elif name == "desk":
            base = {}
        else:
            raise ContractViolation(f"unknown preset {name!r}")
        base.update(overrides)
        return cls(**base)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # flat key = value text --------------------------------------------------
    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:16]

    @classmethod
    def from_text(cls, text, base=None):
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        values = dataclasses.asdict(base) if base is not None else {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractViolation(f"config line {lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ContractViolation(f"config line {lineno}: unknown key {key!r}")
            values[key] = _parse_value(types[key], value, lineno)
        if "preset" in values and base is None:
            return cls.preset_config(values.pop("preset"), **values)
        return cls(**values)

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())


def _parse_value(kind, value, lineno):
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(value)
            return value.lower() in ("true", "1")
        if kind == "int":
            return int(value)
        if kind == "float":
            return float(value)
        return value
    except ValueError:
        raise ContractViolation(f"config line {lineno}: bad {kind} value {value!r}") from None


def git_blob_hash(data):
    """Content hash in git's blob format: sha1 of ``blob <len>\\0`` + data."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    return x


class RunLog:
    """Append-only list of records, mirrored to a JSONL file when a path is given."""

    def __init__(self, config, path=None):
        self.config_hash = config.config_hash()
        self.seed = config.seed
        self.records = []
        self.path = path
        if path is not None:
            open(path, "w", encoding="utf-8").close()

    def append(self, kind, **fields):
        rec = {"kind": kind, "config_hash": self.config_hash, "seed": self.seed}
        rec.update(_jsonable(fields))
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        return rec

    def of_kind(self, kind):
        return [r for r in self.records if r["kind"] == kind]

    def summary(self, checkpoints):
        """Final record with the content hash of every ``{name: (store, meta)}``."""
        hashes = {name: git_blob_hash(checkpoint_bytes(store, meta))
                  for name, (store, meta) in sorted(checkpoints.items())}
        return self.append("summary", checkpoint_hashes=hashes)

    def to_text(self):
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)


# construction helpers ---------------------------------------------------------------
def toy_blocked_ids(vocab_size, first_content=7):
    """Every reserved id except EOS; toy replies use content tokens only."""
    return tuple(i for i in range(min(first_content, vocab_size)) if i != EOS_ID)


def infer_max_len(dialogues, config):
    """Decoding cap: ``config.max_len``, else twice the longest training reply."""
    return config.max_len or 2 * max(len(d.reply) for d in dialogues)


def build_generator(config, vocab_size, max_len, blocked_ids=(PAD_ID, BOS_ID)):
    return GeneratorModel(vocab_size, config.emb_dim, config.hidden, config.gen_layers, max_len,
                          blocked_ids, seed=config.seed, dropout=config.dropout)


def build_discriminator(config, vocab_size):
    return disc_mod.DiscriminatorModel(vocab_size, config.emb_dim, config.hidden,
                                       config.critic_layers, seed=config.seed + 1)


def build_reward(config, vocab_size):
    return reward_mod.RewardModel(vocab_size, config.emb_dim, config.hidden, config.critic_layers,
                                  seed=config.seed + 2)


def seed_streams(seed, n):
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


class BatchSampler:
    """Shuffled epochs over a dataset, drawn from one generator."""

    def __init__(self, data, batch_size, rng):
        if not data:
            raise ContractViolation("empty dataset")
        self.data = list(data)
        self.batch_size = min(batch_size, len(self.data))
        self.rng = rng
        self._order = []
        self.epoch = 0

    def next(self):
        if len(self._order) < self.batch_size:
            self._order = list(self.rng.permutation(len(self.data)))
            self.epoch += 1
        batch, self._order = self._order[:self.batch_size], self._order[self.batch_size:]
        return [self.data[i] for i in batch]


class RunningBaseline:
    """Scalar running mean, initialised from the first batch it sees."""

    def __init__(self, momentum=0.9):
        self.momentum = momentum
        self.value = None

    def update(self, batch_mean):
        if self.value is None:
            self.value = float(batch_mean)
        else:
            self.value = self.momentum * self.value + (1.0 - self.momentum) * float(batch_mean)
        return self.value


def _check_finite(models, snapshots, iteration, what):
    for m in models:
        if not m.params.all_finite():
            for mm, snap in zip(models, snapshots):
                mm.params.restore(snap)
            raise TrainingDiverged(f"non-finite parameters after {what}; restored last good state",
                                   iteration)


def _optimizer_step(model, state, clip_norm):
    clip_gradients(model.params, clip_norm)
    adam_step(model.params, state)


# pretraining ------------------------------------------------------------------------
def pretrain_mle(generator, corpus, config, log=None, valid=None):
    """Adam on the MLE loss; keeps (and finally restores) the best-validation parameters.

    ``corpus`` is the list of training Dialogues; ``valid`` defaults to it.
    Returns ``(generator, log)``.
    """
    if not corpus:
        raise ContractViolation("empty training corpus")
    log = log if log is not None else RunLog(config)
    valid = valid or corpus
    rng_data, rng_drop = seed_streams(config.seed, 2)
    sampler = BatchSampler(corpus, config.batch_size, rng_data)
    steps_per_epoch = max(1, len(corpus) // sampler.batch_size)
    budget = config.pretrain_epochs * steps_per_epoch
    if config.pretrain_max_steps:
        budget = min(budget, config.pretrain_max_steps)
    state = AdamState.for_params(generator.params, lr=config.lr)
    best, best_nll = None, math.inf
    eval_every = config.eval_every or steps_per_epoch
    for step in range(1, budget + 1):
        loss = generator.mle_step(sampler.next(), rng_drop if generator.dropout else None)
        if not math.isfinite(loss):
            if best is not None:
                generator.params.restore(best)
            raise TrainingDiverged(f"MLE loss became {loss} at step {step}", step)
        _optimizer_step(generator, state, config.clip_norm)
        if step % eval_every == 0 or step == budget:
            nll, acc = generator.validation_metrics(valid)
            log.append("pretrain", iteration=step, loss=loss, valid_nll=nll, valid_accuracy=acc)
            if nll < best_nll:
                best, best_nll = generator.params.snapshot(), nll
    if best is not None:
        generator.params.restore(best)
    return generator, log


# policy gradient --------------------------------------------------------------------
def policy_gradient_surrogate(generator, trajectories, weights, normalizer=None):
    """Recorded ``-(1/B) sum_i sum_t w_it log pi(a_it | s_it)``.

    Its gradient is the score-function estimate for per-step weights
    ``w_it`` (held constant).  Forced steps carry no gradient.
    """
    if not trajectories:
        raise ContractViolation("no trajectories")
    tok, valid, forced = generator._teacher_forced([t.context for t in trajectories],
                                                   [t.actions for t in trajectories], grad=True)
    w = np.zeros(valid.shape)
    for i, wi in enumerate(weights):
        w[i, :len(wi)] = wi
    # a forced EOS has probability 1 whatever the parameters
    free = valid & ~forced
    norm = normalizer if normalizer is not None else len(trajectories)
    return -T.sum_(tok * (w * free)) * (1.0 / norm)


def _apply_policy_gradient(generator, trajectories, returns, config, state, baseline):
    lam = config.entropy_lambda
    weights = [np.asarray(q, dtype=np.float64) - lam * np.asarray(t.logprobs)
               for q, t in zip(returns, trajectories)]
    b = 0.0
    if baseline is not None:
        b = baseline.update(np.mean(np.concatenate(weights)))
        weights = [w - b for w in weights]
    generator.params.zero_grad()
    surrogate = policy_gradient_surrogate(generator, trajectories, weights)
    backward(surrogate)
    if state is not None:
        _optimizer_step(generator, state, config.clip_norm)
    entropy = float(np.mean([-sum(t.logprobs) for t in trajectories]))
    return {"surrogate": surrogate.item(), "baseline": b, "entropy": entropy,
            "mean_return": float(np.mean(np.concatenate([np.asarray(q) for q in returns])))}


def _sample(generator, contexts, rng, trajectories):
    if trajectories is not None:
        return list(trajectories)
    return generator.rollout(list(contexts), [()] * len(contexts), rng)


def generator_grad_ail(generator, discriminator, contexts, config, rng, state=None,
                       baseline=None, trajectories=None):
    """One policy-gradient step with weight ``Q(s, a) - lambda log pi(a | s)``.

    Q is the Monte Carlo discriminator score of completed rollouts.  With
    ``state=None`` gradients are left in the parameters and nothing is applied.
    """
    trajs = _sample(generator, contexts, rng, trajectories)
    q = disc_mod.q_values(discriminator, generator, trajs, config.n_rollouts, rng)
    stats = _apply_policy_gradient(generator, trajs, q, config, state, baseline)
    stats["trajectories"] = trajs
    return stats


def generator_grad_airl(generator, reward, contexts, config, rng, state=None, baseline=None,
                        trajectories=None):
    """One policy-gradient step with weight ``reward-to-go - lambda log pi(a | s)``."""
    trajs = _sample(generator, contexts, rng, trajectories)
    rtg = reward_mod.rewards_to_go(reward, generator, trajs, config.n_rollouts, rng)
    stats = _apply_policy_gradient(generator, trajs, rtg, config, state, baseline)
    stats["trajectories"] = trajs
    return stats


def teacher_forcing_due(iteration, ratio):
    """True on every ``ceil(1/ratio)``-th iteration (1-based); never for ratio 0."""
    if ratio <= 0:
        return False
    return iteration % math.ceil(1.0 / ratio) == 0


def teacher_forcing_step(generator, demo, state=None, clip_norm=5.0, rng=None):
    """One MLE step on expert replies; returns the loss."""
    loss = generator.mle_step(demo, rng)
    if state is not None:
        _optimizer_step(generator, state, clip_norm)
    return loss


def _dump(trajs, vocab, n):
    if vocab is None:
        return [list(t.actions) for t in trajs[:n]]
    return [" ".join(vocab.decode(t.actions)) for t in trajs[:n]]


# adversarial loops --------------------------------------------------------------
def train_dg_ail(generator, discriminator, corpus, config, log=None, vocab=None,
                 update_generator=True):
    """Alternate discriminator updates and Monte Carlo policy-gradient steps.

    ``corpus`` is the list of expert Dialogues.  ``config.warmup_steps``
    discriminator-only steps run first.  Returns ``(generator, discriminator, log)``.
    """
    if not corpus:
        raise ContractViolation("empty training corpus")
    log = log if log is not None else RunLog(config)
    rng_data, rng_roll = seed_streams(config.seed + 100, 2)
    sampler = BatchSampler(corpus, config.batch_size, rng_data)
    g_state = AdamState.for_params(generator.params, lr=config.lr)
    d_state = disc_mod.make_optimizer(discriminator, config.disc_lr)
    baseline = RunningBaseline(config.baseline_momentum) if config.baseline else None
    models = (generator, discriminator)

    def d_phase(iteration):
        losses, p_real, p_fake = [], [], []
        for _ in range(config.d_steps):
            real = sampler.next()
            fake = generator.rollout([d.context for d in sampler.next()], [()] * len(real),
                                     rng_roll)
            losses.append(disc_mod.disc_update(discriminator, real, fake, d_state,
                                               config.clip_norm))
            p_real.append(float(np.mean(discriminator.prob_real(
                [d.context for d in real], [d.reply for d in real]))))
            p_fake.append(float(np.mean(discriminator.prob_real(
                [t.context for t in fake], [t.actions for t in fake]))))
        return {"d_loss": float(np.mean(losses)), "d_real": float(np.mean(p_real)),
                "d_fake": float(np.mean(p_fake))}

    good = [m.params.snapshot() for m in models]
    for step in range(1, config.warmup_steps + 1):
        rec = d_phase(step)
        _check_finite(models, good, -step, "discriminator warmup")
        good = [m.params.snapshot() for m in models]
        log.append("ail_warmup", iteration=step, **rec)

    for it in range(1, config.adv_iterations + 1):
        rec = d_phase(it)
        g_stats = {}
        if update_generator:
            for _ in range(config.g_steps):
                ctx = [d.context for d in sampler.next()]
                g_stats = generator_grad_ail(generator, discriminator, ctx, config, rng_roll,
                                             g_state, baseline)
            if teacher_forcing_due(it, config.teacher_forcing_ratio):
                rec["tf_loss"] = teacher_forcing_step(generator, sampler.next(), g_state,
                                                      config.clip_norm)
        _check_finite(models, good, it, "adversarial iteration")
        good = [m.params.snapshot() for m in models]
        if g_stats:
            trajs = g_stats.pop("trajectories")
            rec.update({"g_" + k: v for k, v in g_stats.items()})
            if config.dump_every and it % config.dump_every == 0:
                rec["samples"] = _dump(trajs, vocab, config.dump_samples)
        if not all(0.0 < rec[k] < 1.0 for k in ("d_real", "d_fake")):
            raise TrainingDiverged("logged probability left (0, 1)", it)
        log.append("ail", iteration=it, **rec)
    return generator, discriminator, log


def train_dg_airl(generator, reward, corpus, config, log=None, vocab=None,
                  update_generator=True):
    """Alternate reward updates on fresh policy samples and policy-gradient steps.

    Each reward update draws new proposal samples with their exact
    log-probabilities.  A weight-degeneracy warning is logged when the ESS
    stays below ``config.ess_warn`` for ``config.ess_window`` consecutive
    updates.  Returns ``(generator, reward, log)``.
    """
    if not corpus:
        raise ContractViolation("empty training corpus")
    log = log if log is not None else RunLog(config)
    rng_data, rng_roll = seed_streams(config.seed + 200, 2)
    sampler = BatchSampler(corpus, config.batch_size, rng_data)
    g_state = AdamState.for_params(generator.params, lr=config.lr)
    r_state = reward_mod.make_optimizer(reward, config.reward_lr)
    baseline = RunningBaseline(config.baseline_momentum) if config.baseline else None
    models = (generator, reward)
    low_ess = 0

    def r_phase(iteration):
        nonlocal low_ess
        losses, ess_all, sep = [], [], []
        for _ in range(config.d_steps):
            demo = sampler.next()
            samp = generator.rollout([d.context for d in sampler.next()], [()] * len(demo),
                                     rng_roll)
            samples = [(t, t.total_logprob) for t in samp]
            loss, ess = reward_mod.reward_update(reward, demo, samples, r_state, config.clip_norm)
            losses.append(loss)
            ess_all.append(ess)
            r_demo = reward.trajectory_rewards([d.context for d in demo], [d.reply for d in demo])
            r_samp = reward.trajectory_rewards([t.context for t in samp], [t.actions for t in samp])
            sep.append((float(np.mean(r_demo)), float(np.mean(r_samp))))
            low_ess = low_ess + 1 if ess < config.ess_warn else 0
            if config.ess_window and low_ess == config.ess_window:
                msg = (f"effective sample size below {config.ess_warn} for "
                       f"{config.ess_window} consecutive updates")
                warnings.warn(msg, RuntimeWarning, stacklevel=3)
                log.append("warning", iteration=iteration, message=msg)
        return {"r_loss": float(np.mean(losses)), "ess": float(np.mean(ess_all)),
                "r_demo": float(np.mean([s[0] for s in sep])),
                "r_sample": float(np.mean([s[1] for s in sep]))}

    good = [m.params.snapshot() for m in models]
    for step in range(1, config.warmup_steps + 1):
        rec = r_phase(-step)
        _check_finite(models, good, -step, "reward warmup")
        good = [m.params.snapshot() for m in models]
        log.append("airl_warmup", iteration=step, **rec)

    for it in range(1, config.adv_iterations + 1):
        rec = r_phase(it)
        g_stats = {}
        if update_generator:
            for _ in range(config.g_steps):
                ctx = [d.context for d in sampler.next()]
                g_stats = generator_grad_airl(generator, reward, ctx, config, rng_roll, g_state,
                                              baseline)
            if teacher_forcing_due(it, config.teacher_forcing_ratio):
                rec["tf_loss"] = teacher_forcing_step(generator, sampler.next(), g_state,
                                                      config.clip_norm)
        _check_finite(models, good, it, "adversarial iteration")
        good = [m.params.snapshot() for m in models]
        if g_stats:
            trajs = g_stats.pop("trajectories")
            rec.update({"g_" + k: v for k, v in g_stats.items()})
            if config.dump_every and it % config.dump_every == 0:
                rec["samples"] = _dump(trajs, vocab, config.dump_samples)
        if not math.isfinite(rec["r_loss"]):
            raise TrainingDiverged("reward loss became non-finite", it)
        log.append("airl", iteration=it, **rec)
    return generator, reward, log
