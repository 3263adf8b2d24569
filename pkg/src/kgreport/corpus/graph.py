from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

N_NODES = 27


@dataclass(frozen=True)
class KnowledgeGraph:
    """Root, organ and disease nodes in canonical order.

    ``organ_of`` maps each disease to its organ. The root is the first node
    that is neither an organ nor a disease-with-parent; organs are the
    remaining parent-less nodes.
    """

    nodes: tuple
    organ_of: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(set(self.nodes)) != len(self.nodes):
            raise ValueError("node names must be unique")
        for disease, organ in self.organ_of.items():
            if disease not in self.nodes or organ not in self.nodes:
                raise ValueError(f"unknown node in edge {disease!r} -> {organ!r}")

    def __len__(self) -> int:
        return len(self.nodes)

    @property
    def root(self) -> str:
        return self.nodes[0]

    @property
    def organs(self) -> tuple:
        return tuple(n for n in self.nodes[1:] if n not in self.organ_of)

    @property
    def diseases(self) -> tuple:
        return tuple(n for n in self.nodes if n in self.organ_of)

    def index(self, name: str) -> int:
        return self.nodes.index(name)

    def labels_to_names(self, bits) -> list:
        bits = np.asarray(bits)
        return [n for n, b in zip(self.nodes, bits) if b]

    def names_to_labels(self, names) -> np.ndarray:
        bits = np.zeros(len(self.nodes), dtype=np.int8)
        for n in names:
            bits[self.index(n)] = 1
        return bits


def parse_graph(text: str) -> KnowledgeGraph:
    nodes, organ_of = [], {}
    for raw in text.splitlines():
        line = raw.strip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        name = parts[0].strip().lower()
        nodes.append(name)
        if len(parts) > 1 and parts[1].strip():
            organ_of[name] = parts[1].strip().lower()
    return KnowledgeGraph(tuple(nodes), organ_of)


def load_graph(path=None) -> KnowledgeGraph:
    if path is None:
        text = resources.files("kgreport.data").joinpath("knowledge_graph.tsv").read_text()
    else:
        text = Path(path).read_text()
    return parse_graph(text)


def build_node_vocabulary() -> KnowledgeGraph:
    """The packaged 27-node graph: one root, 7 organs, 20 diseases."""
    graph = load_graph()
    if len(graph) != N_NODES:
        raise ValueError(f"packaged graph has {len(graph)} nodes, expected {N_NODES}")
    return graph


def write_graph(graph: KnowledgeGraph, path) -> None:
    lines = [f"{n}\t{graph.organ_of[n]}" if n in graph.organ_of else n for n in graph.nodes]
    Path(path).write_text("\n".join(lines) + "\n")
