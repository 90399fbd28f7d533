"""Command-line entry point: ``dgirl <command> [flags]``.

Run directories use fixed names (config.txt, generator.ckpt,
discriminator.ckpt / reward.ckpt, runlog.jsonl, manifest.json).  Failures
print one JSON line ``{"error": <kind>, "message": <text>}`` to stderr and
exit 1; usage errors exit 2.  Environment variables are never consulted.
"""

import argparse
import datetime
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from . import evaluation as ev
from .corpus import (RESERVED, TOY_PRESETS, ToyOracle, ToyTaskSpec, Vocabulary,
                     gen_toy_corpus, load_triples, write_triples)
from .diagnostics import GRADCHECK_TOL, gradcheck_suites
from .errors import ContractViolation, TrainingDiverged
from .numerics import read_checkpoint, write_checkpoint
from .policy import GeneratorModel, write_sample_dump
from .reward import write_reward_dump
from .training import (RunLog, TrainConfig, build_discriminator, build_generator, build_reward,
                       infer_max_len, pretrain_mle, toy_blocked_ids, train_dg_ail, train_dg_airl)

COMMANDS = ("preprocess", "pretrain", "train-ail", "train-airl", "generate", "evaluate",
            "gradcheck", "toygen")
SPLITS = ("train", "valid", "test")
CONFIG_FILE = "config.txt"
RUNLOG_FILE = "runlog.jsonl"
MANIFEST_FILE = "manifest.json"
VOCAB_FILE = "vocab.txt"
SPEC_FILE = "spec.json"


class CommandError(Exception):
    """Validation failure reported with exit status 1."""


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _now():
    return datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")


class Manifest:
    def __init__(self, command, args):
        self.record = {"command": command, "artifact_version": __version__, "seed": args.seed,
                       "started": _now(), "inputs": {}, "outputs": {}}

    def input(self, path):
        self.record["inputs"][path] = _sha256(path)

    def config(self, path, config):
        self.record["config"] = {"path": path, "hash": config.config_hash()}

    def write(self, out_dir, outputs):
        self.record["outputs"] = {p: _sha256(p) for p in outputs}
        self.record["finished"] = _now()
        path = os.path.join(out_dir, MANIFEST_FILE)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)


# data directories ---------------------------------------------------------------
class DataDir:
    """``vocab.txt`` plus ``{train,valid,test}.tsv``; ``spec.json`` marks a toy task."""

    def __init__(self, path, manifest=None):
        self.path = path
        vocab_path = os.path.join(path, VOCAB_FILE)
        if not os.path.isfile(vocab_path):
            raise CommandError(f"{path}: missing {VOCAB_FILE}")
        self.vocab = Vocabulary.load(vocab_path)
        spec_path = os.path.join(path, SPEC_FILE)
        self.spec = None
        if os.path.isfile(spec_path):
            with open(spec_path, encoding="utf-8") as fh:
                self.spec = ToyTaskSpec.from_json(fh.read())
        self.splits = {}
        for split in SPLITS:
            p = os.path.join(path, f"{split}.tsv")
            if not os.path.isfile(p):
                continue
            bounds = dict(min_len=1, max_len=10 ** 6) if self.spec else {}
            self.splits[split] = load_triples(p, self.vocab, **bounds).dialogues
            if manifest is not None:
                manifest.input(p)
        if not self.splits.get("train"):
            raise CommandError(f"{path}: no training dialogues")
        if manifest is not None:
            manifest.input(vocab_path)

    @property
    def is_toy(self):
        return self.spec is not None

    def split(self, name):
        return self.splits.get(name) or self.splits["train"]

    def oracle(self):
        return ToyOracle(self.spec, self.vocab) if self.spec else None

    def blocked_ids(self):
        return toy_blocked_ids(len(self.vocab)) if self.spec else (0, 1)


def _load_config(args, manifest):
    if args.config:
        config = TrainConfig.load(args.config)
        manifest.input(args.config)
        if args.preset and args.preset != config.preset:
            raise CommandError("--preset conflicts with the config file's preset")
    else:
        config = TrainConfig.preset_config(args.preset or "desk")
    changes = {"seed": args.seed}
    if getattr(args, "lam", None) is not None:
        changes["entropy_lambda"] = args.lam
    if getattr(args, "n_rollouts", None) is not None:
        changes["n_rollouts"] = args.n_rollouts
    config = config.replace(**changes)
    config.validate()
    return config


def _prepare_out(args, config, manifest):
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, CONFIG_FILE)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    manifest.config(path, config)
    return path


def _gen_meta(gen, vocab, config):
    return {"model": "generator", "config": gen.config(), "vocab": vocab.itos,
            "config_hash": config.config_hash()}


def _load_generator(path, manifest=None):
    store, meta = read_checkpoint(path)
    if meta.get("model") != "generator":
        raise CommandError(f"{path}: not a generator checkpoint")
    if manifest is not None:
        manifest.input(path)
    return GeneratorModel.from_config(meta["config"], store), Vocabulary(meta["vocab"])


def _save(out, name, model, meta):
    path = os.path.join(out, name)
    write_checkpoint(path, model.params, meta)
    return path


# commands ---------------------------------------------------------------------------
def cmd_toygen(args, manifest):
    if args.spec in TOY_PRESETS:
        spec = TOY_PRESETS[args.spec]
    elif os.path.isfile(args.spec):
        with open(args.spec, encoding="utf-8") as fh:
            spec = ToyTaskSpec.from_json(fh.read())
        manifest.input(args.spec)
    else:
        raise CommandError(f"unknown toy spec {args.spec!r}")
    spec = ToyTaskSpec.from_json(json.dumps({**json.loads(spec.to_json()), "seed": args.seed}))
    corpus = gen_toy_corpus(spec)
    os.makedirs(args.out, exist_ok=True)
    outputs = [os.path.join(args.out, SPEC_FILE), os.path.join(args.out, VOCAB_FILE)]
    with open(outputs[0], "w", encoding="utf-8") as fh:
        fh.write(spec.to_json() + "\n")
    corpus.vocab.save(outputs[1])
    for split in SPLITS:
        p = os.path.join(args.out, f"{split}.tsv")
        write_triples(p, getattr(corpus, split), corpus.vocab)
        outputs.append(p)
    manifest.write(args.out, outputs)
    print(f"toygen: {len(corpus.train)}/{len(corpus.valid)}/{len(corpus.test)} dialogues, "
          f"vocab {len(corpus.vocab)} -> {args.out}")


def cmd_preprocess(args, manifest):
    config = _load_config(args, manifest)
    paths = {s: os.path.join(args.data, f"{s}.tsv") for s in SPLITS}
    if not os.path.isfile(paths["train"]):
        raise CommandError(f"{args.data}: missing train.tsv")
    os.makedirs(args.out, exist_ok=True)
    manifest.input(paths["train"])
    train = load_triples(paths["train"], vocab_cap=config.vocab_cap)
    vocab_path = os.path.join(args.out, VOCAB_FILE)
    train.vocab.save(vocab_path)
    outputs = [vocab_path]
    dropped = {"train": train.dropped}
    for split in SPLITS:
        if not os.path.isfile(paths[split]):
            continue
        if split == "train":
            dialogues = train.dialogues
        else:
            manifest.input(paths[split])
            loaded = load_triples(paths[split], train.vocab)
            dialogues, dropped[split] = loaded.dialogues, loaded.dropped
        out = os.path.join(args.out, f"{split}.tsv")
        write_triples(out, dialogues, train.vocab)
        outputs.append(out)
    manifest.record["dropped"] = dropped
    manifest.write(args.out, outputs)
    print(f"preprocess: vocab {len(train.vocab)}, dropped {dropped} -> {args.out}")


def cmd_pretrain(args, manifest):
    config = _load_config(args, manifest)
    data = DataDir(args.data, manifest)
    cfg_path = _prepare_out(args, config, manifest)
    train = data.split("train")
    gen = build_generator(config, len(data.vocab), infer_max_len(train, config),
                          data.blocked_ids())
    log = RunLog(config, os.path.join(args.out, RUNLOG_FILE))
    meta = _gen_meta(gen, data.vocab, config)
    ckpt = os.path.join(args.out, "generator.ckpt")
    try:
        pretrain_mle(gen, train, config, log, valid=data.split("valid"))
    finally:
        write_checkpoint(ckpt, gen.params, meta)
    log.summary({"generator": (gen.params, meta)})
    manifest.write(args.out, [cfg_path, ckpt, log.path])
    nll, acc = gen.validation_metrics(data.split("valid"))
    print(f"pretrain: valid_nll {nll:.6f} valid_accuracy {acc:.4f} -> {ckpt}")


def _adversarial(args, manifest, kind):
    config = _load_config(args, manifest)
    data = DataDir(args.data, manifest)
    if not args.checkpoint:
        raise CommandError("--checkpoint (pretrained generator) is required")
    gen, vocab = _load_generator(args.checkpoint, manifest)
    if vocab != data.vocab:
        raise CommandError("generator vocabulary does not match the data directory")
    cfg_path = _prepare_out(args, config, manifest)
    log = RunLog(config, os.path.join(args.out, RUNLOG_FILE))
    if kind == "ail":
        critic, name, loop = build_discriminator(config, len(vocab)), "discriminator", train_dg_ail
    else:
        critic, name, loop = build_reward(config, len(vocab)), "reward", train_dg_airl
    gen_meta = _gen_meta(gen, vocab, config)
    critic_meta = {"model": name, "config": critic.config(), "config_hash": config.config_hash()}
    diverged = None
    try:
        loop(gen, critic, data.split("train"), config, log, vocab=vocab)
    except TrainingDiverged as exc:
        diverged = exc
    gen_path = _save(args.out, "generator.ckpt", gen, gen_meta)
    critic_path = _save(args.out, f"{name}.ckpt", critic, critic_meta)
    log.summary({"generator": (gen.params, gen_meta), name: (critic.params, critic_meta)})
    outputs = [cfg_path, gen_path, critic_path, log.path]
    if kind == "airl":
        dump = os.path.join(args.out, "reward_dump.jsonl")
        valid = data.split("valid")
        write_reward_dump(dump, critic, [(d.context, d.reply) for d in valid], vocab)
        outputs.append(dump)
    manifest.write(args.out, outputs)
    if diverged is not None:
        raise diverged
    last = log.records[-2] if len(log.records) > 1 else {}
    print(f"train-{kind}: {config.adv_iterations} iterations; last record "
          + json.dumps({k: v for k, v in last.items() if k not in ("samples",)}, sort_keys=True))


def cmd_generate(args, manifest):
    if not args.checkpoint:
        raise CommandError("--checkpoint is required")
    gen, vocab = _load_generator(args.checkpoint, manifest)
    data = DataDir(args.data, manifest)
    dialogues = data.split(args.split)
    contexts = [d.context for d in dialogues]
    if args.decode == "beam":
        trajs = [gen.beam_search(c, args.beam_size) for c in contexts]
    else:
        trajs = gen.sample_replies(contexts, np.random.default_rng(args.seed))
    os.makedirs(args.out, exist_ok=True)
    replies = os.path.join(args.out, "replies.txt")
    targets = os.path.join(args.out, "targets.txt")
    dump = os.path.join(args.out, "samples.jsonl")
    with open(replies, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(vocab.decode(t.actions)) + "\n" for t in trajs)
    with open(targets, "w", encoding="utf-8") as fh:
        fh.writelines(" ".join(vocab.decode(d.reply)) + "\n" for d in dialogues)
    write_sample_dump(dump, trajs, vocab)
    stats = ev.response_stats(contexts, [t.actions for t in trajs], data.oracle())
    stats_path = os.path.join(args.out, "stats.json")
    with open(stats_path, "w", encoding="utf-8") as fh:
        json.dump(stats, fh, sort_keys=True)
        fh.write("\n")
    manifest.write(args.out, [replies, targets, dump, stats_path])
    print("generate: " + json.dumps(stats, sort_keys=True))


def _read_lines(path, manifest):
    if not os.path.isfile(path):
        raise CommandError(f"{path}: no such file")
    manifest.input(path)
    with open(path, encoding="utf-8") as fh:
        return [line.split() for line in fh.read().splitlines()]


def cmd_evaluate(args, manifest):
    if not args.replies or not args.targets:
        raise CommandError("--replies and --targets are required")
    replies = _read_lines(args.replies, manifest)
    targets = _read_lines(args.targets, manifest)
    if args.emb == "generator":
        if args.checkpoint:
            gen, vocab = _load_generator(args.checkpoint, manifest)
        else:
            # untrained seeded embedding over the tokens present
            tokens = sorted({t for u in replies + targets for t in u} - set(ev.METRIC_SKIP))
            vocab = Vocabulary(list(RESERVED) + [t for t in tokens if t not in RESERVED])
            gen = build_generator(TrainConfig(seed=args.seed), len(vocab), 2)
        emb = ev.EmbeddingSource.from_generator(gen, vocab)
    else:
        if not os.path.isfile(args.emb):
            raise CommandError(f"{args.emb}: embedding file not found")
        manifest.input(args.emb)
        emb = ev.EmbeddingSource.from_file(args.emb)
    report = ev.evaluate_pairs(replies, targets, emb)
    outputs = []
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "metrics.jsonl")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(report.to_records())
        outputs.append(path)
        manifest.write(args.out, outputs)
    sys.stdout.write(report.table())


def cmd_gradcheck(args, manifest):
    config = _load_config(args, manifest)
    results = gradcheck_suites(config)
    ok = True
    for name, err in results.items():
        passed = err < GRADCHECK_TOL
        ok &= passed
        print(f"{name}\tmax_rel_error={err:.3e}\t{'PASS' if passed else 'FAIL'}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "gradcheck.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(results, fh, sort_keys=True)
            fh.write("\n")
        manifest.write(args.out, [path])
    if not ok:
        raise CommandError(f"gradient check above tolerance {GRADCHECK_TOL}")


HANDLERS = {"toygen": cmd_toygen, "preprocess": cmd_preprocess, "pretrain": cmd_pretrain,
            "train-ail": lambda a, m: _adversarial(a, m, "ail"),
            "train-airl": lambda a, m: _adversarial(a, m, "airl"),
            "generate": cmd_generate, "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def build_parser():
    parser = argparse.ArgumentParser(prog="dgirl", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def common(p, out_required=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", required=out_required)

    def training_flags(p):
        p.add_argument("--config")
        p.add_argument("--preset", choices=("desk", "paper"))

    p = sub.add_parser("toygen", help="write a synthetic toy corpus")
    common(p)
    p.add_argument("--spec", default="default", help="preset name or spec JSON file")

    p = sub.add_parser("preprocess", help="build vocabulary and clean triple files")
    common(p)
    training_flags(p)
    p.add_argument("--data", required=True)

    helps = {"pretrain": "maximum-likelihood pretraining of the generator",
             "train-ail": "adversarial imitation with a discriminator",
             "train-airl": "adversarial training with a learned per-step reward"}
    for name, text in helps.items():
        p = sub.add_parser(name, help=text)
        common(p)
        training_flags(p)
        p.add_argument("--data", required=True)
        if name != "pretrain":
            p.add_argument("--checkpoint")
            p.add_argument("--lambda", dest="lam", type=float)
            p.add_argument("--n-rollouts", dest="n_rollouts", type=int)

    p = sub.add_parser("generate", help="decode replies for one corpus split")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--decode", choices=("sample", "beam"), default="sample")
    p.add_argument("--beam-size", dest="beam_size", type=int, default=8)

    p = sub.add_parser("evaluate", help="embedding metrics for reply and target files")
    common(p, out_required=False)
    p.add_argument("--replies")
    p.add_argument("--targets")
    p.add_argument("--emb", default="generator", help="'generator' or a word-vector file")
    p.add_argument("--checkpoint")

    p = sub.add_parser("gradcheck", help="finite-difference checks of the three losses")
    common(p, out_required=False)
    training_flags(p)
    return parser


def _fail(kind, message):
    sys.stderr.write(json.dumps({"error": kind, "message": str(message)}) + "\n")
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)   # exits 2 on usage errors
    manifest = Manifest(args.command, args)
    try:
        HANDLERS[args.command](args, manifest)
    except CommandError as exc:
        return _fail("validation", exc)
    except TrainingDiverged as exc:
        return _fail("diverged", exc)
    except ContractViolation as exc:
        return _fail("contract", exc)
    except (OSError, ValueError) as exc:
        return _fail("io", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
