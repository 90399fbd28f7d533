"""Cached desk-scale toy runs shared by the training and acceptance suites.

Every helper returns fresh model copies, so callers may train them further.
"""

import functools
import time

import numpy as np

from dgirl.corpus import TOY_PRESETS, gen_toy_corpus
from dgirl.discriminator import DiscriminatorModel
from dgirl.policy import GeneratorModel
from dgirl.reward import RewardModel
from dgirl.training import (TrainConfig, build_discriminator, build_generator, build_reward,
                            infer_max_len, pretrain_mle, toy_blocked_ids, train_dg_ail,
                            train_dg_airl)

FULL_PRETRAIN = 2000

# wall-clock seconds of each uncached run, keyed like the caches
ELAPSED = {}


@functools.lru_cache(maxsize=None)
def toy_corpus(preset="default"):
    return gen_toy_corpus(TOY_PRESETS[preset])


def desk_config(**overrides):
    return TrainConfig.preset_config("desk", **overrides)


def clone_generator(gen):
    return GeneratorModel.from_config(gen.config(), gen.params)


def clone_discriminator(disc):
    out = DiscriminatorModel(disc.vocab_size, disc.emb_dim, disc.hidden, disc.n_layers,
                             disc.params.rng_seed)
    out.params.restore(disc.params.snapshot())
    return out


@functools.lru_cache(maxsize=None)
def _pretrained(seed, steps):
    start = time.perf_counter()
    corpus = toy_corpus()
    config = desk_config(seed=seed, pretrain_max_steps=steps)
    V = len(corpus.vocab)
    gen = build_generator(config, V, infer_max_len(corpus.train, config), toy_blocked_ids(V))
    gen, log = pretrain_mle(gen, corpus.train, config, valid=corpus.valid)
    ELAPSED[("pretrain", seed, steps)] = time.perf_counter() - start
    return gen, tuple(log.of_kind("pretrain"))


def pretrained(seed=0, steps=FULL_PRETRAIN):
    """``(generator, pretrain records)`` after ``steps`` MLE steps on the toy task."""
    gen, records = _pretrained(seed, steps)
    return clone_generator(gen), list(records)


def distinct_after_sampling(gen, dialogues, seed=99):
    """Distinct-reply ratio of one sampled reply per context."""
    trajs = gen.sample_replies([d.context for d in dialogues], np.random.default_rng(seed))
    return len({t.actions for t in trajs}) / len(trajs)


AIL_ITERATIONS = 300


@functools.lru_cache(maxsize=None)
def _ail_run(seed, lam, iterations):
    start = time.perf_counter()
    corpus = toy_corpus()
    gen, _ = pretrained(seed)
    config = desk_config(seed=seed, entropy_lambda=lam, adv_iterations=iterations)
    disc = build_discriminator(config, len(corpus.vocab))
    gen, disc, log = train_dg_ail(gen, disc, corpus.train, config)
    ELAPSED[("ail", seed, lam, iterations)] = time.perf_counter() - start
    return gen, disc, tuple(log.records)


def ail_run(seed, lam, iterations=AIL_ITERATIONS):
    """DG-AIL from the full pretrain: ``(generator, discriminator, records)``."""
    gen, disc, records = _ail_run(seed, lam, iterations)
    return clone_generator(gen), clone_discriminator(disc), list(records)


REWARD_ITERATIONS = 1000


@functools.lru_cache(maxsize=None)
def _reward_run(seed, iterations):
    start = time.perf_counter()
    corpus = toy_corpus()
    gen, _ = pretrained(seed)
    config = desk_config(seed=seed, adv_iterations=iterations)
    reward = build_reward(config, len(corpus.vocab))
    _, reward, log = train_dg_airl(gen, reward, corpus.train, config, update_generator=False)
    ELAPSED[("reward", seed, iterations)] = time.perf_counter() - start
    return reward, tuple(log.records)


def reward_run(seed, iterations=REWARD_ITERATIONS):
    """Reward model trained against the frozen full pretrain: ``(reward, records)``."""
    reward, records = _reward_run(seed, iterations)
    out = RewardModel(**reward.config())
    out.params.restore(reward.params.snapshot())
    return out, list(records)
