"""Corpus-level diversity metrics and comparison reports.

Per corpus: summary statistics of the complexity scores, mean color
distribution entropy over a seeded image sample, and semantic embedding
spread (mean pairwise cosine distance).  ``build_report`` writes the
report JSON, an embeddings CSV for external projection tools, a
comparison table (aligned text and CSV), and summary figures rendered
to PNG files next to the delimited output.
"""

from __future__ import annotations

import io
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InvalidInputError
from .records import ChartRecord
from .store import ImageStore

logger = logging.getLogger(__name__)

DEFAULT_SAMPLE_SIZE = 1000

# 8 quantization levels per RGB channel -> 512 histogram bins.
_LEVELS = 8
_BINS = _LEVELS**3


def color_entropy(image_bytes: bytes) -> float:
    """Shannon entropy (nats) of the quantized color histogram."""
    try:
        image = Image.open(io.BytesIO(image_bytes)).convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise InvalidInputError(f"undecodable image: {exc}") from exc
    pixels = np.asarray(image, dtype=np.uint16).reshape(-1, 3) // (256 // _LEVELS)
    bins = pixels[:, 0] * _LEVELS * _LEVELS + pixels[:, 1] * _LEVELS + pixels[:, 2]
    counts = np.bincount(bins, minlength=_BINS).astype(np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-np.sum(p * np.log(p)))


def embedding_spread(vectors: Sequence[Sequence[float]], sample_size: int = DEFAULT_SAMPLE_SIZE, seed: int = 0) -> float:
    """Mean pairwise cosine distance over a seeded sample of vectors."""
    if len(vectors) < 2:
        raise InvalidInputError("embedding_spread needs at least 2 vectors")
    matrix = np.asarray(vectors, dtype=np.float64)
    if len(matrix) > sample_size:
        rng = np.random.default_rng(seed)
        matrix = matrix[np.sort(rng.choice(len(matrix), size=sample_size, replace=False))]
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    unit = matrix / norms
    sims = unit @ unit.T
    n = len(unit)
    upper = sims[np.triu_indices(n, k=1)]
    return float(np.mean(1.0 - upper))


@dataclass
class CorpusReport:
    corpus_id: str
    record_count: int
    rpe_mean: float | None
    rpe_median: float | None
    sentinel_count: int
    color_entropy_mean: float | None
    embedding_spread: float | None
    sample_size: int

    def to_json(self) -> dict:
        return {
            "corpus_id": self.corpus_id,
            "record_count": self.record_count,
            "rpe_mean": self.rpe_mean,
            "rpe_median": self.rpe_median,
            "sentinel_count": self.sentinel_count,
            "color_entropy_mean": self.color_entropy_mean,
            "embedding_spread": self.embedding_spread,
            "sample_size": self.sample_size,
        }


def _finite_scores(records: Sequence[ChartRecord]) -> list[float]:
    return [r.rpe.value for r in records if r.rpe is not None and not r.rpe.is_sentinel]


def summarize_corpus(
    corpus_id: str,
    records: Sequence[ChartRecord],
    store: ImageStore | None,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    seed: int = 0,
) -> CorpusReport:
    """All metrics for one corpus; metrics without inputs stay absent."""
    if not records:
        logger.warning("corpus %s is empty; report will carry absent metrics", corpus_id)
        return CorpusReport(corpus_id, 0, None, None, 0, None, None, sample_size)
    scores = _finite_scores(records)
    sentinel_count = sum(1 for r in records if r.rpe is not None and r.rpe.is_sentinel)
    rpe_mean = float(np.mean(scores)) if scores else None
    rpe_median = float(np.median(scores)) if scores else None

    color_mean = None
    if store is not None:
        with_images = [r for r in records if r.image_ref]
        if len(with_images) > sample_size:
            rng = np.random.default_rng(seed)
            picks = np.sort(rng.choice(len(with_images), size=sample_size, replace=False))
            with_images = [with_images[i] for i in picks]
        entropies = []
        for record in with_images:
            try:
                entropies.append(color_entropy(store.get(record.image_ref)))
            except (InvalidInputError, FileNotFoundError) as exc:
                logger.warning("skipping image %s: %s", record.image_ref, exc)
        if entropies:
            color_mean = float(np.mean(entropies))

    spread = None
    embedded = [r.embedding.values for r in records if r.embedding is not None]
    if len(embedded) >= 2:
        spread = embedding_spread(embedded, sample_size=sample_size, seed=seed)

    return CorpusReport(
        corpus_id=corpus_id,
        record_count=len(records),
        rpe_mean=rpe_mean,
        rpe_median=rpe_median,
        sentinel_count=sentinel_count,
        color_entropy_mean=color_mean,
        embedding_spread=spread,
        sample_size=sample_size,
    )


_TABLE_COLUMNS = (
    ("corpus", lambda r: r.corpus_id),
    ("records", lambda r: str(r.record_count)),
    ("rpe_mean", lambda r: _fmt(r.rpe_mean)),
    ("rpe_median", lambda r: _fmt(r.rpe_median)),
    ("sentinels", lambda r: str(r.sentinel_count)),
    ("color_entropy", lambda r: _fmt(r.color_entropy_mean)),
    ("emb_spread", lambda r: _fmt(r.embedding_spread)),
)


def _fmt(value: float | None) -> str:
    return "-" if value is None else f"{value:.4f}"


def comparison_text(reports: Sequence[CorpusReport]) -> str:
    rows = [[fn(r) for _, fn in _TABLE_COLUMNS] for r in reports]
    headers = [name for name, _ in _TABLE_COLUMNS]
    widths = [max(len(h), *(len(row[i]) for row in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = [
        "  ".join(h.ljust(w) for h, w in zip(headers, widths)),
        "  ".join("-" * w for w in widths),
    ]
    for row in rows:
        lines.append("  ".join(cell.ljust(w) for cell, w in zip(row, widths)))
    return "\n".join(lines) + "\n"


def comparison_csv(reports: Sequence[CorpusReport]) -> str:
    headers = [name for name, _ in _TABLE_COLUMNS]
    lines = [",".join(headers)]
    for r in reports:
        cells = [fn(r) for _, fn in _TABLE_COLUMNS]
        lines.append(",".join("" if c == "-" else c for c in cells))
    return "\n".join(lines) + "\n"


def _write_embeddings_csv(path: Path, corpora: Sequence[tuple[str, Sequence[ChartRecord]]]) -> None:
    rows = []
    dim = 0
    for corpus_id, records in corpora:
        for record in records:
            if record.embedding is not None:
                dim = max(dim, len(record.embedding.values))
                rows.append((f"{corpus_id}:{record.chart_id}", record.embedding.values))
    with open(path, "w", encoding="utf-8") as fh:
        header = ["id", "dim"] + [f"v{i}" for i in range(dim)]
        fh.write(",".join(header) + "\n")
        for row_id, values in rows:
            cells = [row_id, str(len(values))] + [repr(float(v)) for v in values]
            fh.write(",".join(cells) + "\n")


def _render_figures(out_dir: Path, corpora, reports: Sequence[CorpusReport]) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg", force=True)
    import matplotlib.pyplot as plt

    figures_dir = out_dir / "figures"
    figures_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    for corpus_id, records in corpora:
        scores = _finite_scores(records)
        if not scores:
            continue
        fig, ax = plt.subplots(figsize=(5, 3), dpi=100)
        ax.hist(scores, bins=20, color="#4878a8", edgecolor="black")
        ax.set_xlabel("rollout entropy score")
        ax.set_ylabel("charts")
        ax.set_title(f"score distribution: {corpus_id}")
        fig.tight_layout()
        path = figures_dir / f"rpe_hist_{corpus_id}.png"
        fig.savefig(path, metadata={"Software": None})
        plt.close(fig)
        written.append(path)

    metric_names = ["rpe_mean", "color_entropy_mean", "embedding_spread"]
    fig, axes = plt.subplots(1, 3, figsize=(10, 3), dpi=100)
    for ax, metric in zip(axes, metric_names):
        labels = [r.corpus_id for r in reports]
        values = [getattr(r, metric) or 0.0 for r in reports]
        ax.bar(range(len(labels)), values, color="#4878a8")
        ax.set_xticks(range(len(labels)))
        ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=7)
        ax.set_title(metric, fontsize=9)
    fig.tight_layout()
    path = figures_dir / "metrics_comparison.png"
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    written.append(path)
    return written


def build_report(
    corpora: Sequence[tuple[str, Sequence[ChartRecord]]],
    out_dir: str | Path,
    store: ImageStore | None = None,
    sample_size: int = DEFAULT_SAMPLE_SIZE,
    seed: int = 0,
    render_figures: bool = True,
) -> list[CorpusReport]:
    """Aggregate metrics for each corpus and write the full report bundle."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = [
        summarize_corpus(corpus_id, records, store, sample_size=sample_size, seed=seed)
        for corpus_id, records in corpora
    ]
    payload = {
        "seed": seed,
        "sample_size": sample_size,
        "corpora": [r.to_json() for r in reports],
    }
    (out_dir / "report.json").write_text(json.dumps(payload, ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
    _write_embeddings_csv(out_dir / "embeddings.csv", corpora)
    (out_dir / "comparison.txt").write_text(comparison_text(reports), encoding="utf-8")
    (out_dir / "comparison.csv").write_text(comparison_csv(reports), encoding="utf-8")
    if render_figures:
        _render_figures(out_dir, corpora, reports)
    return reports
