"""Synthetic chest-film stand-ins and templated reports with a long-tailed label profile."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..exceptions import ContractError
from .graph import KnowledgeGraph, build_node_vocabulary
from .tokenizer import SPECIAL_TOKENS, Vocabulary, normalize

# diseases from most to least prevalent; the power law is applied over this ranking
PREVALENCE_ORDER = (
    "effusion", "opacity", "atelectasis", "cardiomegaly", "pneumothorax", "consolidation",
    "edema", "emphysema", "pneumonia", "airspace disease", "nodule", "granuloma",
    "thickening", "scoliosis", "hernia", "calcinosis", "bone fractures", "lesion",
    "foreign object", "hypoinflation",
)

FINDING_SENTENCES = {
    "atelectasis": "there is atelectasis in the lung base",
    "emphysema": "the lungs show emphysema",
    "pneumonia": "findings suggest pneumonia",
    "opacity": "there is an opacity in the lung",
    "airspace disease": "there is airspace disease",
    "consolidation": "there is focal consolidation",
    "edema": "there is pulmonary edema",
    "nodule": "a nodule is seen in the lung",
    "hypoinflation": "there is hypoinflation of the lungs",
    "lesion": "a lesion is present",
    "granuloma": "there is a calcified granuloma",
    "effusion": "there is a pleural effusion",
    "pneumothorax": "there is a small pneumothorax",
    "thickening": "there is pleural thickening",
    "cardiomegaly": "cardiomegaly is present",
    "bone fractures": "there are bone fractures",
    "calcinosis": "there is calcinosis",
    "scoliosis": "there is scoliosis of the spine",
    "foreign object": "a foreign object is seen in the mediastinum",
    "hernia": "there is a hiatal hernia in the mediastinum",
}

# organs without an asserted finding get their normal-structure sentence
NORMAL_SENTENCES = {
    "lung": "the lungs are clear",
    "pleural": "the pleural spaces are clear",
    "heart": "the heart is normal in size",
    "bone": "no acute bone abnormality",
}
NO_FINDING_SENTENCE = "normal chest"

# top-left pixel of each disease glyph on a 32x32 film; organs own fixed areas
GLYPH_SLOTS = {
    "atelectasis": (1, 1), "emphysema": (7, 1), "pneumonia": (13, 1), "opacity": (19, 1),
    "airspace disease": (25, 1),
    "consolidation": (1, 25), "edema": (7, 25), "nodule": (13, 25), "hypoinflation": (19, 25),
    "lesion": (25, 25), "granuloma": (1, 9),
    "foreign object": (1, 17),
    "bone fractures": (7, 9), "calcinosis": (7, 17),
    "cardiomegaly": (13, 9), "scoliosis": (13, 17),
    "thickening": (19, 9), "hernia": (19, 17),
    "effusion": (25, 9), "pneumothorax": (25, 17),
}
GLYPH = 4
BASE_SIDE = 32


def _glyph_patterns(names) -> dict:
    rng = np.random.default_rng(1234)
    patterns, seen = {}, set()
    for name in names:
        while True:
            flat = np.zeros(GLYPH * GLYPH, dtype=bool)
            flat[rng.choice(GLYPH * GLYPH, size=8, replace=False)] = True
            key = flat.tobytes()
            if key not in seen:
                seen.add(key)
                patterns[name] = flat.reshape(GLYPH, GLYPH)
                break
    return patterns


GLYPH_PATTERNS = _glyph_patterns(PREVALENCE_ORDER)


@dataclass
class SyntheticImage:
    grid: np.ndarray
    planted_findings: frozenset = field(default_factory=frozenset)

    @property
    def shape(self) -> tuple:
        return self.grid.shape


@dataclass
class Sample:
    id: str
    image: SyntheticImage
    report: str
    node_labels: np.ndarray


def report_lexicon(graph: KnowledgeGraph | None = None) -> list:
    graph = graph or build_node_vocabulary()
    texts = list(FINDING_SENTENCES.values()) + list(NORMAL_SENTENCES.values())
    texts += [NO_FINDING_SENTENCE, ".", *graph.nodes]
    return sorted({w for t in texts for w in normalize(t).split()})


def build_vocabulary(graph: KnowledgeGraph | None = None) -> Vocabulary:
    return Vocabulary(report_lexicon(graph))


def extract_nodes(report, graph: KnowledgeGraph) -> np.ndarray:
    """Bit i is set iff node name i occurs as a contiguous run of report tokens.

    Accepts a string or a token list; mentions are not polarity-checked.
    """
    tokens = normalize(report).split() if isinstance(report, str) else [t.lower() for t in report]
    bits = np.zeros(len(graph), dtype=np.int8)
    for i, name in enumerate(graph.nodes):
        parts = name.split()
        n = len(parts)
        for j in range(len(tokens) - n + 1):
            if tokens[j:j + n] == parts:
                bits[i] = 1
                break
    return bits


def compose_report(findings, graph: KnowledgeGraph) -> str:
    findings = set(findings)
    sentences = [] if findings else [NO_FINDING_SENTENCE]
    for organ in graph.organs:
        mine = [d for d in graph.diseases if graph.organ_of[d] == organ and d in findings]
        if mine:
            sentences += [FINDING_SENTENCES[d] for d in mine]
        elif organ in NORMAL_SENTENCES:
            sentences.append(NORMAL_SENTENCES[organ])
    return " ".join(s + " ." for s in sentences)


def prevalence(imbalance_exponent: float, mean_findings: float = 1.2) -> dict:
    """Per-disease presence probability, power-law over the prevalence ranking."""
    ranks = np.arange(1, len(PREVALENCE_ORDER) + 1, dtype=float)
    w = ranks ** (-float(imbalance_exponent))
    p = np.minimum(mean_findings * w / w.sum(), 0.95)
    return dict(zip(PREVALENCE_ORDER, p))


NOISE_SD = 0.15
CONTRAST = (0.2, 0.4)
JITTER = 2


def render_image(findings, rng: np.random.Generator, side: int = BASE_SIDE, channels: int = 1,
                 noise_sd: float = NOISE_SD, contrast=CONTRAST, jitter: int = JITTER) -> np.ndarray:
    """Anatomy-shaped background plus one glyph per finding, values in [0, 1].

    Each glyph is shifted by up to ``jitter`` pixels and drawn with an
    amplitude drawn from ``contrast``; Gaussian noise of sd ``noise_sd`` sits
    underneath.
    """
    yy, xx = np.mgrid[0:BASE_SIDE, 0:BASE_SIDE] + 0.5
    grid = np.full((BASE_SIDE, BASE_SIDE), 0.35)
    for cx in (8.0, 24.0):
        grid[((xx - cx) / 7.0) ** 2 + ((yy - 15.0) / 13.0) ** 2 < 1.0] = 0.15
    grid[(np.abs(xx - 16.0) < 3.0)] = 0.5
    grid = grid + rng.normal(0.0, noise_sd, size=grid.shape)
    for name in sorted(findings):
        r, c = GLYPH_SLOTS[name]
        dr, dc = rng.integers(-jitter, jitter + 1, size=2)
        r = int(np.clip(r + dr, 0, BASE_SIDE - GLYPH))
        c = int(np.clip(c + dc, 0, BASE_SIDE - GLYPH))
        amp = rng.uniform(*contrast)
        grid[r:r + GLYPH, c:c + GLYPH] += amp * GLYPH_PATTERNS[name]
    grid = np.clip(grid, 0.0, 1.0)
    if side != BASE_SIDE:
        if side % BASE_SIDE:
            raise ValueError(f"image side must be a multiple of {BASE_SIDE}")
        f = side // BASE_SIDE
        grid = np.kron(grid, np.ones((f, f)))
    return np.repeat(grid[:, :, None], channels, axis=2)


def generate_sample(index: int, seed: int, imbalance_exponent: float, graph: KnowledgeGraph,
                    mean_findings: float = 1.2, max_tokens: int = 62, side: int = BASE_SIDE,
                    channels: int = 1, noise_sd: float = NOISE_SD, contrast=CONTRAST,
                    jitter: int = JITTER) -> Sample:
    # per-sample stream so serial and parallel generation agree
    rng = np.random.default_rng([int(seed), int(index)])
    probs = prevalence(imbalance_exponent, mean_findings)
    draws = rng.random(len(PREVALENCE_ORDER))
    findings = [d for d, u in zip(PREVALENCE_ORDER, draws) if u < probs[d]]
    report = compose_report(findings, graph)
    while len(report.split()) > max_tokens:
        findings = findings[:-1]  # drop the rarest
        report = compose_report(findings, graph)
    image = render_image(findings, rng, side=side, channels=channels, noise_sd=noise_sd,
                         contrast=contrast, jitter=jitter)
    return Sample(
        id=f"s{index:06d}",
        image=SyntheticImage(image, frozenset(findings)),
        report=report,
        node_labels=extract_nodes(report, graph),
    )


def generate_corpus(n: int, seed: int = 0, imbalance_exponent: float = 1.5,
                    graph: KnowledgeGraph | None = None, mean_findings: float = 1.2,
                    max_tokens: int = 62, side: int = BASE_SIDE, channels: int = 1,
                    noise_sd: float = NOISE_SD, contrast=CONTRAST, jitter: int = JITTER) -> list:
    if n < 1:
        raise ValueError(f"corpus size must be >= 1, got {n}")
    graph = graph or build_node_vocabulary()
    return [generate_sample(i, seed, imbalance_exponent, graph, mean_findings, max_tokens,
                            side, channels, noise_sd, contrast, jitter) for i in range(n)]


def corrupt_labels(labels, target_accuracy: float, seed) -> np.ndarray:
    """Flip each bit independently with probability ``1 - target_accuracy``.

    A 1 -> 0 flip masks a true node, a 0 -> 1 flip adds a spurious one.
    Works on a single vector or a (n, 27) matrix.
    """
    if not 0.0 < target_accuracy <= 1.0:
        raise ContractError(f"target_accuracy must be in (0, 1], got {target_accuracy}")
    labels = np.asarray(labels).astype(np.int8)
    rng = np.random.default_rng(seed)
    flips = rng.random(labels.shape) < (1.0 - target_accuracy)
    return (labels ^ flips).astype(np.int8)


def split_corpus(samples, ratios=(0.7, 0.1, 0.2), seed: int = 0):
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ContractError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = len(samples)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = min(int(round(ratios[1] * n)), n - n_train)
    parts = (order[:n_train], order[n_train:n_train + n_val], order[n_train + n_val:])
    return tuple([samples[i] for i in sorted(p)] for p in parts)


def label_matrix(samples) -> np.ndarray:
    return np.stack([s.node_labels for s in samples]).astype(np.int8)


def image_batch(samples) -> np.ndarray:
    return np.stack([s.image.grid for s in samples])


__all__ = [
    "SyntheticImage", "Sample", "generate_corpus", "generate_sample", "extract_nodes",
    "corrupt_labels", "split_corpus", "compose_report", "build_vocabulary", "report_lexicon",
    "render_image", "prevalence", "label_matrix", "image_batch", "SPECIAL_TOKENS",
]
