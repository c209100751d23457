#!/usr/bin/env python3
"""
Command-line module for the belief-graph laboratory.
Handles the experiment front end: configuration loading, subcommand
dispatch from game generation to probing, and run manifests.
"""

import argparse
import csv
import json
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Sequence, Tuple

import matplotlib
matplotlib.use('Agg')
import matplotlib.pyplot as plt
import numpy as np

from beliefgraph import __version__
from beliefgraph.agent.selector import ActionSelector, resolve_variant, transfer_encoders
from beliefgraph.agent.trainer import (
    CURVE_FIELDS, CommandTracker, NullTracker, TruthTracker, UpdaterTracker, evaluate, evaluate_random, train,
)
from beliefgraph.config import ExperimentConfig, apply_overrides, config_hash, load_config
from beliefgraph.core.corpus import (
    SPLITS, generate_game_sets, group_episodes, load_game_set, read_corpus, save_game_sets, split_episodes,
    write_corpus, write_json, write_run_manifest,
)
from beliefgraph.core.vocab import Vocab
from beliefgraph.core.worldgen import build_word_vocab, collect_transitions
from beliefgraph.errors import BeliefGraphError, CorpusError, DomainError
from beliefgraph.models.pretrain import (
    ENCODER_TASKS, UPDATER_TASKS, pretrain_cg, pretrain_coc, pretrain_graph_encoder, pretrain_og,
    pretrain_og_drqn,
)
from beliefgraph.models.updater import CommandGenerator, ContrastiveModel, ObservationGenerator, RecurrentTextModel
from beliefgraph.nn.checkpoint import load_checkpoint, save_checkpoint
from beliefgraph.probe.probekit import (
    PROBE_SOURCES, build_probe_dataset, eval_probe, export_heatmap, heatmap_name, mean_adjacency, train_probe,
    walkthrough_graphs,
)

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
PRETRAIN_TASKS = UPDATER_TASKS + ENCODER_TASKS
MODEL_CLASSES = {
    "updater-og": ObservationGenerator,
    "updater-coc": ContrastiveModel,
    "updater-cg": CommandGenerator,
}
PROBE_ROLES = {"belief-og": "updater-og", "belief-coc": "updater-coc", "drqn": "drqn-og"}
UPDATER_PREFIX_ROLES = ("updater-og", "updater-coc")


# ---------------------------------------------------------------------------
# Shared plumbing

def _emit(data: Any) -> None:
    print(json.dumps(data, sort_keys=True))


def _vocabs(config: ExperimentConfig):
    vocab = Vocab(capacity=config.worldgen.capacity)
    return vocab, build_word_vocab(vocab)


def _checkpoint_path(config: ExperimentConfig, role: str) -> str:
    return os.path.join(config.paths.checkpoints, f"{role}.bgnn")


def load_model(path: str, config: ExperimentConfig, vocab: Vocab, wvocab, role: Optional[str] = None):
    """Rebuild a pretrained updater or recurrent text model from its checkpoint"""
    state, metadata = load_checkpoint(path, role)
    role = role or metadata.get("role")
    rng = np.random.default_rng(config.model.seed)
    if role == "drqn-og":
        model = RecurrentTextModel(config.model, wvocab, rng)
    elif role in MODEL_CLASSES:
        model = MODEL_CLASSES[role](config.model, vocab, wvocab, rng)
    else:
        raise DomainError(f"checkpoint {path} holds a {role!r} model, not an updater")
    model.load_state_dict(state)
    model.freeze()
    return model


def build_tracker(variant, config: ExperimentConfig, vocab: Vocab, wvocab, updater_path: str = ""):
    """Graph source of an agent variant"""
    if variant.graph_source is None:
        return NullTracker()
    if variant.graph_source == "full":
        return TruthTracker(vocab, config.train.graph_type)
    path = updater_path or config.paths.updater or _checkpoint_path(config, variant.updater_role)
    model = load_model(path, config, vocab, wvocab, variant.updater_role)
    if variant.graph_source == "discrete":
        return CommandTracker(model)
    return UpdaterTracker(model.updater)


def _games(config: ExperimentConfig, split: str, limit: Optional[int] = None):
    specs = load_game_set(config.paths.games, split)
    return specs[:limit] if limit is not None else specs


# ---------------------------------------------------------------------------
# Subcommands

def cmd_gen_games(args, config: ExperimentConfig) -> Dict[str, Any]:
    wg = config.worldgen
    counts = {"train": wg.train_games, "valid": wg.valid_games, "test": wg.test_games}
    sets = generate_game_sets(wg.difficulty, counts, wg.seed)
    manifest = save_game_sets(config.paths.games, sets, wg.difficulty, wg.seed,
                              extra={"config_hash": config_hash(config)})
    write_run_manifest(config.paths.games, "gen-games", config_hash(config), {"worldgen": wg.seed},
                       outputs={"manifest": os.path.basename(manifest)})
    return {"games": {split: len(specs) for split, specs in sets.items()}, "directory": config.paths.games}


def cmd_collect(args, config: ExperimentConfig) -> Dict[str, Any]:
    vocab, _ = _vocabs(config)
    specs = _games(config, args.split)
    records = collect_transitions(specs, config.worldgen.off_path_rate, config.worldgen.seed, vocab)
    count = write_corpus(config.paths.corpus, records)
    directory = os.path.dirname(os.path.abspath(config.paths.corpus))
    write_run_manifest(directory, "collect", config_hash(config), {"worldgen": config.worldgen.seed},
                       inputs=[os.path.join(config.paths.games, "manifest.json")],
                       outputs={"corpus": os.path.basename(config.paths.corpus), "records": count})
    logger.info("collected %d transitions from %d games", count, len(specs))
    return {"records": count, "games": len(specs), "corpus": config.paths.corpus}


def cmd_pretrain(args, config: ExperimentConfig) -> Dict[str, Any]:
    task = config.pretrain.task
    if task not in PRETRAIN_TASKS:
        raise DomainError(f"unknown pretraining task {task!r}; expected one of {PRETRAIN_TASKS}")
    vocab, wvocab = _vocabs(config)
    episodes = group_episodes(read_corpus(config.paths.corpus, vocab))
    if not episodes:
        raise CorpusError(f"empty corpus: {config.paths.corpus}")
    train_eps, valid_eps = split_episodes(episodes, config.pretrain.valid_fraction)
    show = config.logging.show_progress
    common = (train_eps, valid_eps, vocab, wvocab, config.model, config.pretrain)
    if task == "og":
        model, history = pretrain_og(*common, show_progress=show)
    elif task == "coc":
        model, history = pretrain_coc(*common, show_progress=show)
    elif task == "cg":
        model, history = pretrain_cg(*common, show_progress=show)
    elif task == "og-drqn":
        model, history = pretrain_og_drqn(train_eps, valid_eps, wvocab, config.model, config.pretrain,
                                          show_progress=show)
    else:
        specs = None
        if task == "sp":
            specs = {s.game_id: s for split in SPLITS for s in _games(config, split)}
        model, history = pretrain_graph_encoder(task, *common, specs=specs, show_progress=show)

    role = model.role
    path = args.out or _checkpoint_path(config, role)
    save_checkpoint(path, model.state_dict(), role, {
        "task": task,
        "config_hash": config_hash(config),
        "vocab": vocab.fingerprint(),
        "words": len(wvocab),
        "history": history,
    })
    write_run_manifest(os.path.dirname(os.path.abspath(path)), f"pretrain-{task}", config_hash(config),
                       {"model": config.model.seed, "pretrain": config.pretrain.seed},
                       inputs=[config.paths.corpus], outputs={"checkpoint": os.path.basename(path)})
    return {"task": task, "checkpoint": path, "final": history[-1] if history else {}}


def _selector(config: ExperimentConfig, variant, vocab, wvocab) -> ActionSelector:
    selector = ActionSelector(variant, config.model, vocab, wvocab, np.random.default_rng(config.model.seed))
    init = config.train.init_checkpoint
    if init:
        state, metadata = load_checkpoint(init)
        prefix = "updater." if metadata.get("role") in UPDATER_PREFIX_ROLES else ""
        copied = transfer_encoders(selector, state, prefix, config.train.freeze_init)
        if not copied:
            logger.warning("no encoder parameters of %s matched the selector", init)
    return selector


def cmd_train(args, config: ExperimentConfig) -> Dict[str, Any]:
    vocab, wvocab = _vocabs(config)
    variant = resolve_variant(config.train.agent, config.train.use_text)
    tracker = build_tracker(variant, config, vocab, wvocab)
    selector = _selector(config, variant, vocab, wvocab)
    train_games = _games(config, "train")
    valid_games = _games(config, "valid")
    os.makedirs(config.paths.output, exist_ok=True)
    curves_path = os.path.join(config.paths.output, f"curves.{variant.name}.csv")
    result = train(selector, tracker, train_games, valid_games, config.train, curves_path,
                   show_progress=config.logging.show_progress)
    if result.best_state is not None:
        selector.load_state_dict(result.best_state)
    path = args.out or _checkpoint_path(config, f"agent-{variant.name}")
    save_checkpoint(path, selector.state_dict(), "agent", {
        "agent": variant.name,
        "use_text": variant.use_text,
        "updater": config.paths.updater,
        "best_score": result.best_score,
        "config_hash": config_hash(config),
    })
    write_run_manifest(config.paths.output, f"train-{variant.name}", config_hash(config),
                       {"model": config.model.seed, "train": config.train.seed},
                       inputs=[os.path.join(config.paths.games, "manifest.json"), config.train.init_checkpoint],
                       outputs={"checkpoint": os.path.basename(path), "curves": os.path.basename(curves_path)})
    return {"agent": variant.name, "best_valid_score": result.best_score, "checkpoint": path}


def cmd_eval(args, config: ExperimentConfig) -> Dict[str, Any]:
    vocab, wvocab = _vocabs(config)
    games = _games(config, args.split)
    result: Dict[str, Any] = {"split": args.split, "games": len(games)}
    if args.checkpoint:
        state, metadata = load_checkpoint(args.checkpoint, "agent")
        variant = resolve_variant(metadata.get("agent", config.train.agent), metadata.get("use_text", False))
        tracker = build_tracker(variant, config, vocab, wvocab, metadata.get("updater", ""))
        selector = ActionSelector(variant, config.model, vocab, wvocab, np.random.default_rng(config.model.seed))
        selector.load_state_dict(state)
        result["agent"] = variant.name
        result["score"] = evaluate(selector, tracker, games, config.train.max_steps, config.train.seed)
    if args.random_baseline or not args.checkpoint:
        result["random_score"] = evaluate_random(games, config.train.seed, config.train.max_steps)
    return result


def cmd_probe(args, config: ExperimentConfig) -> Dict[str, Any]:
    pc = config.probe
    if pc.source not in PROBE_SOURCES:
        raise DomainError(f"unknown probe source {pc.source!r}; expected one of {PROBE_SOURCES}")
    vocab, wvocab = _vocabs(config)
    model = None
    if pc.source in PROBE_ROLES:
        role = PROBE_ROLES[pc.source]
        model = load_model(args.model or _checkpoint_path(config, role), config, vocab, wvocab, role)
    train_specs = _games(config, "train", pc.train_games)
    test_specs = _games(config, "test", pc.test_games)
    show = config.logging.show_progress
    dataset = build_probe_dataset(train_specs, test_specs, pc.source, vocab, model, pc.seed, show)
    probe, history = train_probe(dataset.train, pc, show)
    metrics = eval_probe(probe, dataset.test, pc.threshold)

    directory = os.path.join(config.paths.output, "probe")
    write_json(os.path.join(directory, f"probe.{pc.source}.json"),
               {"source": pc.source, "metrics": metrics, "train_loss": history})
    heatmaps = []
    if pc.heatmap_games:
        per_game = {s.game_id: walkthrough_graphs(s, pc.source, vocab, model, pc.seed) for s in test_specs}
        mean = mean_adjacency([g for graphs in per_game.values() for g in graphs]) if pc.subtract_mean else None
        for spec in test_specs[:pc.heatmap_games]:
            for t, graph in enumerate(per_game[spec.game_id]):
                if np.ndim(graph) == 1:
                    break
                name = heatmap_name(pc.source, pc.heatmap_relation, spec.game_id, t)
                csv_path, _ = export_heatmap(graph, vocab, pc.heatmap_relation, directory, name, mean)
                heatmaps.append(os.path.basename(csv_path))
    write_run_manifest(directory, f"probe-{pc.source}", config_hash(config), {"probe": pc.seed},
                       inputs=[os.path.join(config.paths.games, "manifest.json"), args.model or ""],
                       outputs={"heatmaps": heatmaps})
    return {"source": pc.source, "metrics": metrics, "train": len(dataset.train), "test": len(dataset.test)}


def curves_to_long(paths: Sequence[str]) -> List[Tuple[int, str, float]]:
    """Rows (episode, series, value) from learning-curve CSVs; series is `<file stem>:<column>`"""
    rows = []
    for path in paths:
        stem = os.path.splitext(os.path.basename(path))[0]
        try:
            with open(path, encoding="utf-8", newline="") as f:
                for record in csv.DictReader(f):
                    for column in CURVE_FIELDS[1:]:
                        if record.get(column):
                            rows.append((int(record["episode"]), f"{stem}:{column}", float(record[column])))
        except FileNotFoundError:
            raise CorpusError(f"missing curves file: {path}") from None
        except (KeyError, ValueError) as e:
            raise CorpusError(f"malformed curves file {path}: {e}") from None
    return rows


def plot_long(rows: Sequence[Tuple[int, str, float]], png_path: str, columns: Sequence[str] = ("valid_score",)):
    fig, ax = plt.subplots(figsize=(8, 5))
    for series in sorted({s for _, s, _ in rows}):
        if series.rsplit(":", 1)[-1] not in columns:
            continue
        points = sorted((e, v) for e, s, v in rows if s == series)
        ax.plot([e for e, _ in points], [v for _, v in points], label=series)
    ax.set_xlabel("episode")
    ax.set_ylabel("normalized score")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(png_path, dpi=100)
    plt.close(fig)


def cmd_plot(args, config: ExperimentConfig) -> Dict[str, Any]:
    rows = curves_to_long(args.curves)
    out = args.out or os.path.join(config.paths.output, "curves_long.csv")
    os.makedirs(os.path.dirname(os.path.abspath(out)), exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["episode", "series", "value"])
        writer.writerows(rows)
    png = os.path.splitext(out)[0] + ".png"
    plot_long(rows, png)
    return {"rows": len(rows), "csv": out, "png": png}


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="belief_lab", description="Belief-graph agent laboratory")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_shared(sp):
        sp.add_argument("--config", default="", help="YAML configuration file")
        sp.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override one configuration value")
        sp.add_argument("--log-level", default=None, help="logging level (default from config)")
        sp.add_argument("--progress", action="store_true", help="show progress bars")

    gen = sub.add_parser("gen-games", help="generate train/valid/test game sets")
    add_shared(gen)
    gen.add_argument("--difficulty", type=int)
    gen.add_argument("--train", type=int)
    gen.add_argument("--valid", type=int)
    gen.add_argument("--test", type=int)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--out", help="games directory")
    gen.set_defaults(func=cmd_gen_games)

    col = sub.add_parser("collect", help="record walkthrough transitions as JSONL")
    add_shared(col)
    col.add_argument("--games", help="games directory")
    col.add_argument("--split", default="train", choices=SPLITS)
    col.add_argument("--out", help="corpus path")
    col.set_defaults(func=cmd_collect)

    pre = sub.add_parser("pretrain", help="pretrain an updater or graph encoder")
    add_shared(pre)
    pre.add_argument("--task", choices=PRETRAIN_TASKS)
    pre.add_argument("--corpus", help="corpus path")
    pre.add_argument("--games", help="games directory (state prediction)")
    pre.add_argument("--out", help="checkpoint path")
    pre.set_defaults(func=cmd_pretrain)

    trn = sub.add_parser("train", help="train an agent")
    add_shared(trn)
    trn.add_argument("--agent")
    trn.add_argument("--games", help="games directory")
    trn.add_argument("--updater", help="pretrained updater checkpoint")
    trn.add_argument("--init-checkpoint", help="checkpoint whose encoders initialize the selector")
    trn.add_argument("--out", help="agent checkpoint path")
    trn.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate an agent checkpoint")
    add_shared(ev)
    ev.add_argument("--checkpoint", help="agent checkpoint")
    ev.add_argument("--games", help="games directory")
    ev.add_argument("--split", default="test", choices=SPLITS)
    ev.add_argument("--random-baseline", action="store_true", help="also score a uniformly random policy")
    ev.set_defaults(func=cmd_eval)

    prb = sub.add_parser("probe", help="relation-prediction probe and heatmaps")
    add_shared(prb)
    prb.add_argument("--source", choices=PROBE_SOURCES)
    prb.add_argument("--model", help="pretrained model checkpoint for belief and drqn sources")
    prb.add_argument("--games", help="games directory")
    prb.set_defaults(func=cmd_probe)

    plo = sub.add_parser("plot", help="learning curves to long-format CSV and PNG")
    add_shared(plo)
    plo.add_argument("curves", nargs="+", help="curve CSV files written by train")
    plo.add_argument("--out", help="long-format CSV path")
    plo.set_defaults(func=cmd_plot)
    return parser


FLAG_KEYS = {
    "difficulty": "worldgen.difficulty",
    "train": "worldgen.train_games",
    "valid": "worldgen.valid_games",
    "test": "worldgen.test_games",
    "seed": "worldgen.seed",
    "games": "paths.games",
    "corpus": "paths.corpus",
    "task": "pretrain.task",
    "agent": "train.agent",
    "updater": "paths.updater",
    "init_checkpoint": "train.init_checkpoint",
    "source": "probe.source",
}


def resolve_config(args) -> ExperimentConfig:
    """Defaults < YAML file < environment < --set < dedicated flags"""
    config = apply_overrides(load_config(args.config), args.overrides)
    for flag, dotted in FLAG_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            section, key = dotted.split(".")
            setattr(getattr(config, section), key, value)
    if args.command == "gen-games" and args.out:
        config.paths.games = args.out
    if args.command == "collect" and args.out:
        config.paths.corpus = args.out
    if args.progress:
        config.logging.show_progress = True
    return config


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = resolve_config(args)
        level = (args.log_level or config.logging.level).upper()
        logging.basicConfig(level=getattr(logging, level, logging.INFO), format=LOG_FORMAT, stream=sys.stderr)
        logger.debug("running %s", args.command)
        _emit(args.func(args, config))
    except BeliefGraphError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
