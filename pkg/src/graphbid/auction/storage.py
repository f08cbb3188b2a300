"""JSON-lines episode shards with a manifest.

A dataset directory holds ``shard-00000.jsonl`` ... (one episode per line) and
``manifest.json`` with the config hash, seed range, shard list and record count.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Iterable, Iterator

from graphbid.auction.types import EpisodeRecord
from graphbid.errors import InputError

MANIFEST = "manifest.json"
FORMAT = "graphbid-episodes/1"


def shard_name(index: int) -> str:
    return f"shard-{index:05d}.jsonl"


def write_shard(path: Path, records: Iterable[EpisodeRecord]) -> dict:
    """Write one shard atomically; returns its manifest entry."""
    path = Path(path)
    tmp = path.with_suffix(".jsonl.partial")
    ids = []
    digest = hashlib.sha256()
    try:
        with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
            for rec in records:
                line = rec.dumps() + "\n"
                fh.write(line)
                digest.update(line.encode())
                ids.append(rec.episode_id)
        tmp.replace(path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise
    return {"file": path.name, "count": len(ids), "episodes": ids,
            "sha256": digest.hexdigest()}


def write_manifest(out_dir: Path, config_hash: str, seed_range: tuple[int, int],
                   shards: list[dict], extra: dict | None = None) -> dict:
    manifest = {
        "format": FORMAT,
        "config_hash": config_hash,
        "seed_range": list(seed_range),
        "shards": sorted(shards, key=lambda s: s["file"]),
        "record_count": sum(s["count"] for s in shards),
    }
    if extra:
        manifest.update(extra)
    Path(out_dir, MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


def read_manifest(data_dir) -> dict:
    path = Path(data_dir, MANIFEST)
    if not path.exists():
        raise InputError(f"no dataset manifest in {data_dir}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != FORMAT:
        raise InputError(f"unsupported dataset format {manifest.get('format')!r}")
    return manifest


def episode_ids(manifest: dict) -> set[str]:
    return {eid for shard in manifest["shards"] for eid in shard["episodes"]}


def iter_episodes(data_dir, limit: int | None = None) -> Iterator[EpisodeRecord]:
    manifest = read_manifest(data_dir)
    n = 0
    for shard in manifest["shards"]:
        with open(Path(data_dir, shard["file"]), encoding="utf-8") as fh:
            for line in fh:
                if limit is not None and n >= limit:
                    return
                yield EpisodeRecord.from_json(json.loads(line))
                n += 1


def load_episodes(data_dir, limit: int | None = None) -> list[EpisodeRecord]:
    return list(iter_episodes(data_dir, limit))


def check_disjoint(train_ids: set[str], heldout_manifest: dict) -> None:
    overlap = train_ids & episode_ids(heldout_manifest)
    if overlap:
        sample = sorted(overlap)[:3]
        raise InputError(f"held-out data overlaps training data ({len(overlap)} episodes, "
                         f"e.g. {sample})")
