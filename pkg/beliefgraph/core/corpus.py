#!/usr/bin/env python3
"""
Corpus module for the belief-graph laboratory.
Handles persistence of game sets (JSON spec files plus a manifest) and
transition corpora (JSONL), and run manifests.
"""

import hashlib
import json
import logging
import os
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple

from beliefgraph.core.vocab import Vocab
from beliefgraph.core.worldgen import GameSpec, TransitionRecord, generate_game
from beliefgraph.errors import CorpusError

logger = logging.getLogger(__name__)

SPLITS = ("train", "valid", "test")
MANIFEST_NAME = "manifest.json"
RUN_MANIFEST_NAME = "run_manifest.json"

# Seed offsets keep the splits disjoint for counts below the stride
SPLIT_STRIDE = 100_000


def split_seeds(seed: int, split: str, count: int) -> List[int]:
    """Derived game seeds of one split

    Args:
        seed: Base seed of the game set
        split: One of train, valid, test
        count: Number of games

    Returns:
        List of integer seeds, disjoint across splits
    """
    if split not in SPLITS:
        raise CorpusError(f"unknown split: {split!r}")
    if count >= SPLIT_STRIDE:
        raise CorpusError(f"split size {count} exceeds {SPLIT_STRIDE - 1}")
    base = seed * len(SPLITS) * SPLIT_STRIDE + SPLITS.index(split) * SPLIT_STRIDE
    return [base + i for i in range(count)]


def generate_game_sets(difficulty: int, counts: Dict[str, int], seed: int) -> Dict[str, List[GameSpec]]:
    """Generate train/valid/test game sets with disjoint seeds"""
    return {
        split: [generate_game(difficulty, s) for s in split_seeds(seed, split, counts.get(split, 0))]
        for split in SPLITS
    }


def dumps(data: Any) -> str:
    """Canonical JSON text (sorted keys, fixed separators)"""
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=True) + "\n"


def write_json(path: str, data: Any) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(dumps(data))


def read_json(path: str) -> Any:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        raise CorpusError(f"missing file: {path}") from None
    except json.JSONDecodeError as e:
        raise CorpusError(f"malformed JSON in {path}: {e}") from None


def file_sha1(path: str) -> str:
    digest = hashlib.sha1()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_game_sets(directory: str, sets: Dict[str, List[GameSpec]], difficulty: int, seed: int,
                   extra: Optional[Dict[str, Any]] = None) -> str:
    """Write one JSON file per game and a manifest

    Args:
        directory: Output directory
        sets: Games per split
        difficulty: Requested difficulty (5 for mixtures)
        seed: Base seed of the game set
        extra: Additional manifest fields

    Returns:
        Path of the manifest
    """
    manifest: Dict[str, Any] = {"difficulty": difficulty, "seed": seed, "splits": {}}
    for split, specs in sets.items():
        entries = []
        for spec in specs:
            name = f"{spec.game_id}.json"
            write_json(os.path.join(directory, split, name), spec.to_dict())
            entries.append({"file": f"{split}/{name}", "game_id": spec.game_id, "level": spec.level})
        manifest["splits"][split] = entries
    if extra:
        manifest.update(extra)
    path = os.path.join(directory, MANIFEST_NAME)
    write_json(path, manifest)
    logger.info("wrote %d games to %s",
                sum(len(v) for v in sets.values()), directory)
    return path


def load_game_set(directory: str, split: str) -> List[GameSpec]:
    """Read the games of one split listed in the manifest"""
    manifest = read_json(os.path.join(directory, MANIFEST_NAME))
    try:
        entries = manifest["splits"][split]
    except KeyError:
        raise CorpusError(f"manifest in {directory} has no split {split!r}") from None
    specs = []
    for entry in entries:
        try:
            specs.append(GameSpec.from_dict(read_json(os.path.join(directory, entry["file"]))))
        except (KeyError, TypeError, ValueError) as e:
            raise CorpusError(f"malformed game entry {entry!r}: {e}") from None
    return specs


def write_corpus(path: str, records: Iterable[TransitionRecord]) -> int:
    """Write transition records as JSONL, one record per line"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    count = 0
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_json(), sort_keys=True, separators=(",", ":")) + "\n")
            count += 1
    return count


def read_corpus(path: str, vocab: Optional[Vocab] = None) -> List[TransitionRecord]:
    vocab = vocab or Vocab()
    records = []
    try:
        with open(path, "r", encoding="utf-8") as f:
            for lineno, line in enumerate(f, 1):
                if not line.strip():
                    continue
                try:
                    records.append(TransitionRecord.from_json(json.loads(line), vocab))
                except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                    raise CorpusError(f"{path}:{lineno}: malformed record: {e}") from None
    except FileNotFoundError:
        raise CorpusError(f"missing corpus: {path}") from None
    return records


def group_episodes(records: Sequence[TransitionRecord]) -> List[List[TransitionRecord]]:
    """Split an episode-ordered corpus into episodes"""
    episodes: List[List[TransitionRecord]] = []
    for record in records:
        if not episodes or record.t == 0 or record.game_id != episodes[-1][-1].game_id:
            episodes.append([])
        episodes[-1].append(record)
    return episodes


def split_episodes(episodes: Sequence[List[TransitionRecord]], valid_fraction: float
                   ) -> Tuple[List[List[TransitionRecord]], List[List[TransitionRecord]]]:
    """Hold out the last episodes for validation"""
    count = int(round(len(episodes) * valid_fraction))
    if count == 0 or count >= len(episodes):
        return list(episodes), []
    return list(episodes[:-count]), list(episodes[-count:])


def write_run_manifest(directory: str, command: str, config_hash: str, seeds: Dict[str, int],
                       inputs: Sequence[str] = (), outputs: Optional[Dict[str, Any]] = None) -> str:
    """Write a timestamp-free record of one CLI run"""
    manifest = {
        "command": command,
        "config_hash": config_hash,
        "seeds": dict(seeds),
        "inputs": {os.path.basename(p): file_sha1(p) for p in inputs if os.path.isfile(p)},
        "outputs": outputs or {},
    }
    path = os.path.join(directory, RUN_MANIFEST_NAME)
    write_json(path, manifest)
    return path
