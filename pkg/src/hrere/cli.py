"""Pipeline entry point: gen-data, pretrain-kbe, train, eval, plot.

Every subcommand takes the same flags (--config, --seed, --variant,
--alpha, --out), reads one key=value config file, and leaves a JSON
manifest next to its outputs. Artifact names inside the output
directory are fixed so the commands compose:

    kb.tsv, kb_pretrain.tsv        full KB / KB with test pairs removed
    corpus_train.tsv, corpus_test.tsv
    train.ds, test.ds              serialized bag datasets
    kbe.bin                        pretrained embedding checkpoint
    checkpoint_{variant}_s{seed}.bin, loss_{variant}_s{seed}.csv
    pr_curve_{variant}_s{seed}.csv/.svg, p_at_n_{variant}_s{seed}.csv

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numeric
failure. HRERE_LOG sets the log level (default WARNING).
"""

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .config import ManifestRun, load_run_config
from .data import (
    align_corpus,
    default_templates,
    evaluation_dataset,
    generate_synthetic_corpus,
    load_dataset,
    save_corpus,
    save_dataset,
)
from .encoder import load_word_embeddings
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate, read_curve_csv, write_curve_csv, write_p_at_n_csv
from .kb import adopt_triples, generate_synthetic_kb, load_kb, remove_test_pairs, save_kb
from .kbe import load_checkpoint, pretrain, save_checkpoint
from .plotting import render_pr_curve
from .training import VARIANTS, save_model, load_model, train, write_loss_csv

log = logging.getLogger(__name__)


def _artifacts(run):
    out = Path(run.out_dir)
    tag = f"{run.variant}_s{run.seed}"
    return {
        "kb": out / "kb.tsv",
        "kb_pretrain": out / "kb_pretrain.tsv",
        "corpus_train": out / "corpus_train.tsv",
        "corpus_test": out / "corpus_test.tsv",
        "train_ds": out / "train.ds",
        "test_ds": out / "test.ds",
        "kbe": out / "kbe.bin",
        "model": out / f"checkpoint_{tag}.bin",
        "loss": out / f"loss_{tag}.csv",
        "curve": out / f"pr_curve_{tag}.csv",
        "p_at_n": out / f"p_at_n_{tag}.csv",
        "plot": out / f"pr_curve_{tag}.svg",
    }


def _greedy_pair_split(groups, target, rng):
    """Pick whole pair-groups until the next one would exceed the target."""
    chosen = []
    total = 0
    for i in rng.permutation(len(groups)):
        pair, members = groups[int(i)]
        if total + len(members) <= target:
            chosen.append((pair, members))
            total += len(members)
    return chosen


def cmd_gen_data(run, manifest):
    """Synthetic KB + corpus, pair-level test split, serialized datasets."""
    art = _artifacts(run)
    generated = generate_synthetic_kb(
        run.kb_entities, run.kb_relations, run.kb_triples, run.seed
    )
    save_kb(generated, art["kb"])
    # a triples file interns ids in its own scan order, so every id baked
    # into the datasets must come from the reloaded KB, not the generator
    kb = load_kb(art["kb"])
    corpus = generate_synthetic_corpus(
        kb,
        default_templates(kb),
        run.implicit_rate,
        run.mislabel_rate,
        run.seed + 1,
        na_pair_factor=run.na_pair_factor,
        max_mentions=run.max_mentions,
    )

    linked, unlinked = {}, {}
    for i, s in enumerate(corpus):
        h, t = kb.entity_id(s.head), kb.entity_id(s.tail)
        pool = linked if kb.relations_between(h, t) else unlinked
        pool.setdefault(frozenset((h, t)), []).append(i)

    # whole pairs go to one side only, so held-out pairs never leak
    n_na_test = round(run.na_rate * run.n_test_sentences)
    rng = np.random.default_rng(run.seed + 2)
    by_pair = lambda kv: tuple(sorted(kv[0]))
    test_pos = _greedy_pair_split(
        sorted(linked.items(), key=by_pair), run.n_test_sentences - n_na_test, rng
    )
    test_na = _greedy_pair_split(sorted(unlinked.items(), key=by_pair), n_na_test, rng)
    test_idx = sorted(i for _, members in test_pos + test_na for i in members)
    test_set = set(test_idx)
    train_corpus = [s for i, s in enumerate(corpus) if i not in test_set]
    test_corpus = [corpus[i] for i in test_idx]
    if run.n_test_sentences and not test_corpus:
        raise DataError("test split came out empty; lower n_test_sentences or grow the corpus")

    kb_pretrain = remove_test_pairs(kb, [tuple(pair) for pair, _ in test_pos])
    train_ds = align_corpus(
        kb, train_corpus, run.T, run.L, run.na_rate, np.random.default_rng(run.seed + 3)
    )
    test_ds = evaluation_dataset(kb, test_corpus, train_ds.vocab.freeze(), run.T, run.L)

    save_kb(kb_pretrain, art["kb_pretrain"])
    save_corpus(train_corpus, art["corpus_train"])
    save_corpus(test_corpus, art["corpus_test"])
    save_dataset(train_ds, art["train_ds"])
    save_dataset(test_ds, art["test_ds"])
    manifest.add_outputs(*(art[k] for k in (
        "kb", "kb_pretrain", "corpus_train", "corpus_test", "train_ds", "test_ds",
    )))
    log.info(
        "gen-data: %d train bags, %d test bags, %d/%d pretraining triples kept",
        len(train_ds), len(test_ds), len(kb_pretrain.triples), len(kb.triples),
    )


def cmd_pretrain_kbe(run, manifest):
    art = _artifacts(run)
    manifest.add_inputs(art["kb"], art["kb_pretrain"])
    # the reduced triples file drops ids, so re-align it onto the full
    # inventory; embedding rows must match the dataset's entity ids
    kb = adopt_triples(load_kb(art["kb"]), load_kb(art["kb_pretrain"]))
    table = pretrain(kb, run.kbe(), run.seed)
    save_checkpoint(table, art["kbe"])
    manifest.add_outputs(art["kbe"])


def cmd_train(run, manifest):
    art = _artifacts(run)
    inputs = [art["train_ds"], art["kb"]]
    if run.variant != "base":
        inputs.append(art["kbe"])
    if run.word_embeddings:
        inputs.append(run.word_embeddings)
    manifest.add_inputs(*inputs)

    dataset = load_dataset(art["train_ds"])
    kb = load_kb(art["kb"])
    table = None
    if run.variant != "base":
        if not art["kbe"].is_file():
            raise DataError(
                f"variant {run.variant!r} needs the pretrained checkpoint "
                f"{art['kbe']}; run pretrain-kbe first"
            )
        table = load_checkpoint(art["kbe"])
    words = None
    if run.word_embeddings:
        words = load_word_embeddings(
            run.word_embeddings, dataset.vocab, run.d_w,
            np.random.default_rng(run.seed), run.init_scale,
        )
    state, losses = train(
        dataset, kb, run.training(), kbe_table=table, kbe_hyper=run.kbe(), words=words
    )
    save_model(state, art["model"])
    write_loss_csv(losses, art["loss"])
    manifest.add_outputs(art["model"], art["loss"])


def cmd_eval(run, manifest):
    art = _artifacts(run)
    manifest.add_inputs(art["model"], art["test_ds"], art["kb"])
    state = load_model(art["model"])
    test = load_dataset(art["test_ds"])
    kb = load_kb(art["kb"])
    result = evaluate(state, test, kb, run.alpha)
    write_curve_csv(result.curve, art["curve"])
    write_p_at_n_csv(result.p_at_n, art["p_at_n"])
    render_pr_curve(result.curve, art["plot"], title=f"{run.variant} seed {run.seed}")
    manifest.add_outputs(art["curve"], art["p_at_n"], art["plot"])
    log.info("eval: P@N %s", result.p_at_n)


def cmd_plot(run, manifest):
    art = _artifacts(run)
    manifest.add_inputs(art["curve"])
    curve = read_curve_csv(art["curve"])
    render_pr_curve(curve, art["plot"], title=f"{run.variant} seed {run.seed}")
    manifest.add_outputs(art["plot"])


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-kbe": cmd_pretrain_kbe,
    "train": cmd_train,
    "eval": cmd_eval,
    "plot": cmd_plot,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # argparse exits with 2 on usage errors; the contract reserves 2
        # for data problems, so usage failures must surface as 1
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def build_parser():
    parser = _Parser(prog="hrere", description="joint text/KB relation extraction pipeline")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen-data": "generate the synthetic KB, corpus, and datasets",
        "pretrain-kbe": "pretrain the KB embedding tables",
        "train": "train one variant on the generated dataset",
        "eval": "rank the test bags and emit curve, P@N, and plot",
        "plot": "re-render the curve plot from its CSV",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", type=Path, help="key=value config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--variant", choices=VARIANTS)
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--out", type=Path, help="output directory")
    return parser


def _manifest_path(run, command):
    tag = {"gen-data": f"s{run.seed}", "pretrain-kbe": f"s{run.seed}"}.get(
        command, f"{run.variant}_s{run.seed}"
    )
    return Path(run.out_dir) / f"manifest_{command}_{tag}.json"


def main(argv=None):
    logging.basicConfig(
        level=getattr(logging, os.environ.get("HRERE_LOG", "WARNING").upper(), logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        args = build_parser().parse_args(argv)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except SystemExit as exc:  # argparse --help exits 0 on its own
        return 0 if exc.code in (0, None) else 1
    try:
        run = load_run_config(
            args.config,
            overrides={
                "seed": args.seed,
                "variant": args.variant,
                "alpha": args.alpha,
                "out_dir": None if args.out is None else str(args.out),
            },
        )
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except OSError as exc:
        log.error("%s", exc)
        return 2

    Path(run.out_dir).mkdir(parents=True, exist_ok=True)
    try:
        with ManifestRun(args.command, run, _manifest_path(run, args.command)) as manifest:
            _COMMANDS[args.command](run, manifest)
    except ConfigError as exc:
        log.error("%s", exc)
        return 1
    except NumericError as exc:
        log.error("%s", exc)
        return 3
    except (DataError, OSError) as exc:
        log.error("%s", exc)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
