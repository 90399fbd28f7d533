"""Finite-difference suites over every model loss, at preset sizes."""

import numpy as np

from . import discriminator as disc_mod
from . import reward as reward_mod
from .corpus import TOY_PRESETS, gen_toy_corpus
from .numerics import finite_diff_check, well_conditioned_point
from .training import (TrainConfig, build_discriminator, build_generator, build_reward,
                       infer_max_len, toy_blocked_ids)

GRADCHECK_TOL = 1e-4


def gradcheck_suites(config=None, batch=8, eps=1e-5, coords_per_param=6):
    """``{model: max relative error}`` for the generator MLE, discriminator and reward losses.

    Models are built at the config's sizes on toy-task data and moved to a
    seeded well-conditioned point before checking.
    """
    config = config or TrainConfig()
    corpus = gen_toy_corpus(TOY_PRESETS["default"])
    V = len(corpus.vocab)
    real = corpus.train[:batch]
    seed = config.seed

    gen = build_generator(config, V, infer_max_len(corpus.train, config), toy_blocked_ids(V))
    well_conditioned_point(gen.params, seed=seed)
    fake = gen.rollout([d.context for d in corpus.train[batch:2 * batch]], [()] * batch,
                       np.random.default_rng(seed))
    disc = build_discriminator(config, V)
    well_conditioned_point(disc.params, seed=seed + 1)
    rew = build_reward(config, V)
    well_conditioned_point(rew.params, seed=seed + 2)
    samples = [(t, t.total_logprob) for t in fake]

    def check(fn, params):
        return finite_diff_check(fn, params, eps=eps, coords_per_param=coords_per_param,
                                 seed=seed)

    return {
        "generator": check(lambda: gen.mle_loss(real), gen.params),
        "discriminator": check(lambda: disc_mod.disc_loss(disc, real, fake), disc.params),
        "reward": check(lambda: reward_mod.reward_loss(rew, real, samples), rew.params),
    }
