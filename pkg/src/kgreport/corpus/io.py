"""Corpus JSONL files and split manifests.

Each corpus line is ``{"id", "image": {"shape", "data"}, "report", "nodes"}``
with ``data`` the row-major flattened grid and ``nodes`` the positive node
names. Split manifests are plain text, one sample id per line.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .graph import KnowledgeGraph
from .synth import Sample, SyntheticImage


def sample_to_record(sample: Sample, graph: KnowledgeGraph) -> dict:
    grid = sample.image.grid
    return {
        "id": sample.id,
        "image": {"shape": list(grid.shape), "data": grid.reshape(-1).tolist()},
        "report": sample.report,
        "nodes": graph.labels_to_names(sample.node_labels),
        "findings": sorted(sample.image.planted_findings),
    }


def record_to_sample(record: dict, graph: KnowledgeGraph) -> Sample:
    image = record["image"]
    grid = np.asarray(image["data"], dtype=np.float64).reshape(image["shape"])
    return Sample(
        id=str(record["id"]),
        image=SyntheticImage(grid, frozenset(record.get("findings", ()))),
        report=record["report"],
        node_labels=graph.names_to_labels(record["nodes"]),
    )


def write_corpus(path, samples, graph: KnowledgeGraph) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s, graph)) + "\n")
    return path


def read_corpus(path, graph: KnowledgeGraph) -> list:
    with open(path) as fh:
        return [record_to_sample(json.loads(line), graph) for line in fh if line.strip()]


def write_manifest(path, samples) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(f"{s.id}\n" for s in samples))
    return path


def read_manifest(path) -> list:
    return [line.strip() for line in Path(path).read_text().splitlines() if line.strip()]


def select(samples, ids) -> list:
    by_id = {s.id: s for s in samples}
    return [by_id[i] for i in ids]
