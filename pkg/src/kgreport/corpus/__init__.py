from .graph import KnowledgeGraph, N_NODES, build_node_vocabulary, load_graph, parse_graph, write_graph
from .io import read_corpus, read_manifest, select, write_corpus, write_manifest
from .synth import (
    Sample,
    SyntheticImage,
    build_vocabulary,
    compose_report,
    corrupt_labels,
    extract_nodes,
    generate_corpus,
    image_batch,
    label_matrix,
    prevalence,
    split_corpus,
)
from .tokenizer import Vocabulary, normalize

__all__ = [
    "KnowledgeGraph", "N_NODES", "build_node_vocabulary", "load_graph", "parse_graph",
    "write_graph", "read_corpus", "read_manifest", "select", "write_corpus", "write_manifest",
    "Sample", "SyntheticImage", "build_vocabulary", "compose_report", "corrupt_labels",
    "extract_nodes", "generate_corpus", "image_batch", "label_matrix", "prevalence",
    "split_corpus", "Vocabulary", "normalize",
]
