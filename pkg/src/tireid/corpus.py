"""Corpus data model, embedding/annotation file formats, and the synthetic benchmark.

A corpus pairs gallery images and text queries, each carrying a person
identity and a row index into its embedding matrix. Identity equality is
what defines relevance everywhere downstream. Embeddings arrive
precomputed (the cross-modal encoders live outside this toolkit) and are
row-normalized at ingestion so cosine similarity reduces to a dot product.

File formats:

* ICLE embeddings (binary, little-endian): magic ``ICLE``, u32 version=1,
  u32 rows, u32 dim, then rows*dim float32 row-major. No padding.
* Annotations (JSON): array of per-image objects with ``image_id``,
  ``person_id``, ``file_path``, ``captions``, ``image_embedding_index``,
  ``caption_embedding_indices``. Each caption flattens to one text record.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ValidationError

ICLE_MAGIC = b"ICLE"
ICLE_VERSION = 1
UNIT_NORM_TOL = 1e-4

_ANNOTATION_KEYS = (
    "image_id",
    "person_id",
    "file_path",
    "captions",
    "image_embedding_index",
    "caption_embedding_indices",
)


@dataclass(frozen=True)
class ImageRecord:
    """One gallery image: identity label plus a row in the image matrix."""

    image_id: str
    person_id: int
    source_path: str
    embedding_index: int


@dataclass(frozen=True)
class TextRecord:
    """One text query: identity label plus a row in the text matrix."""

    text_id: str
    person_id: int
    raw_text: str
    embedding_index: int


@dataclass
class Corpus:
    """Immutable-by-convention collection of image and text records.

    ``caption_of`` maps each text id to the image id whose caption list it
    came from; that image is the text's ground-truth image for pipelines
    that need a single paired image (enrichment, SFT positives).
    """

    images: list[ImageRecord]
    texts: list[TextRecord]
    caption_of: dict[str, str] = field(default_factory=dict)

    def images_by_row(self) -> dict[int, ImageRecord]:
        return {img.embedding_index: img for img in self.images}

    def texts_by_row(self) -> dict[int, TextRecord]:
        return {txt.embedding_index: txt for txt in self.texts}

    def image_by_id(self, image_id: str) -> ImageRecord:
        for img in self.images:
            if img.image_id == image_id:
                return img
        raise ValidationError(f"unknown image_id {image_id!r}")

    def ground_truth_image(self, text: TextRecord) -> ImageRecord:
        """The image whose caption list produced this text."""
        image_id = self.caption_of.get(text.text_id)
        if image_id is None:
            raise ValidationError(f"text {text.text_id!r} has no owning image")
        return self.image_by_id(image_id)


def validate_corpus(
    corpus: Corpus,
    num_image_rows: int | None = None,
    num_text_rows: int | None = None,
) -> None:
    """Check corpus invariants, optionally against known matrix sizes.

    Raises ValidationError on duplicate ids, duplicate or out-of-range
    embedding indices, negative person ids, or empty text.
    """
    seen_img_ids: set[str] = set()
    seen_img_rows: set[int] = set()
    for img in corpus.images:
        if img.image_id in seen_img_ids:
            raise ValidationError(f"duplicate image_id {img.image_id!r}")
        seen_img_ids.add(img.image_id)
        if img.person_id < 0:
            raise ValidationError(f"image {img.image_id!r}: negative person_id")
        if img.embedding_index < 0:
            raise ValidationError(f"image {img.image_id!r}: negative embedding_index")
        if img.embedding_index in seen_img_rows:
            raise ValidationError(
                f"image {img.image_id!r}: duplicate embedding_index {img.embedding_index}"
            )
        seen_img_rows.add(img.embedding_index)
        if num_image_rows is not None and img.embedding_index >= num_image_rows:
            raise ValidationError(
                f"image {img.image_id!r}: dangling embedding_index "
                f"{img.embedding_index} (matrix has {num_image_rows} rows)"
            )

    seen_txt_ids: set[str] = set()
    seen_txt_rows: set[int] = set()
    for txt in corpus.texts:
        if txt.text_id in seen_txt_ids:
            raise ValidationError(f"duplicate text_id {txt.text_id!r}")
        seen_txt_ids.add(txt.text_id)
        if txt.person_id < 0:
            raise ValidationError(f"text {txt.text_id!r}: negative person_id")
        if not txt.raw_text:
            raise ValidationError(f"text {txt.text_id!r}: empty raw_text")
        if txt.embedding_index < 0:
            raise ValidationError(f"text {txt.text_id!r}: negative embedding_index")
        if txt.embedding_index in seen_txt_rows:
            raise ValidationError(
                f"text {txt.text_id!r}: duplicate embedding_index {txt.embedding_index}"
            )
        seen_txt_rows.add(txt.embedding_index)
        if num_text_rows is not None and txt.embedding_index >= num_text_rows:
            raise ValidationError(
                f"text {txt.text_id!r}: dangling embedding_index "
                f"{txt.embedding_index} (matrix has {num_text_rows} rows)"
            )

    for text_id, image_id in corpus.caption_of.items():
        if text_id not in seen_txt_ids:
            raise ValidationError(f"caption_of references unknown text {text_id!r}")
        if image_id not in seen_img_ids:
            raise ValidationError(f"caption_of references unknown image {image_id!r}")


def load_annotations(
    path: str | Path,
    num_image_rows: int | None = None,
    num_text_rows: int | None = None,
) -> Corpus:
    """Load an annotation JSON file into a validated corpus.

    Every caption becomes one TextRecord with id ``<image_id>#c<j>`` and
    the image's person id. Pass matrix row counts to also reject dangling
    embedding indices.
    """
    raw = Path(path).read_text(encoding="utf-8")
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(
            f"{path}: malformed JSON at line {exc.lineno} column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, list):
        raise FormatError(f"{path}: top level must be an array of image objects")

    images: list[ImageRecord] = []
    texts: list[TextRecord] = []
    caption_of: dict[str, str] = {}
    for pos, entry in enumerate(doc):
        if not isinstance(entry, dict):
            raise FormatError(f"{path}: entry {pos} is not an object")
        missing = [k for k in _ANNOTATION_KEYS if k not in entry]
        if missing:
            raise ValidationError(f"{path}: entry {pos} missing keys {missing}")
        unknown = [k for k in entry if k not in _ANNOTATION_KEYS]
        if unknown:
            raise ValidationError(f"{path}: entry {pos} has unknown keys {unknown}")
        image_id = entry["image_id"]
        person_id = entry["person_id"]
        captions = entry["captions"]
        cap_rows = entry["caption_embedding_indices"]
        if not isinstance(image_id, str) or not isinstance(person_id, int):
            raise ValidationError(f"{path}: entry {pos}: bad image_id/person_id types")
        if not isinstance(captions, list) or not isinstance(cap_rows, list):
            raise ValidationError(f"{path}: entry {pos}: captions fields must be arrays")
        if not isinstance(entry["image_embedding_index"], int) or not all(
            isinstance(r, int) for r in cap_rows
        ):
            raise ValidationError(f"{path}: entry {pos}: embedding indices must be integers")
        if not all(isinstance(c, str) for c in captions):
            raise ValidationError(f"{path}: entry {pos}: captions must be strings")
        if len(captions) != len(cap_rows):
            raise ValidationError(
                f"{path}: entry {pos}: {len(captions)} captions but "
                f"{len(cap_rows)} caption_embedding_indices"
            )
        images.append(
            ImageRecord(
                image_id=image_id,
                person_id=person_id,
                source_path=entry["file_path"],
                embedding_index=entry["image_embedding_index"],
            )
        )
        for j, (caption, row) in enumerate(zip(captions, cap_rows)):
            text_id = f"{image_id}#c{j}"
            texts.append(
                TextRecord(
                    text_id=text_id,
                    person_id=person_id,
                    raw_text=caption,
                    embedding_index=row,
                )
            )
            caption_of[text_id] = image_id

    corpus = Corpus(images=images, texts=texts, caption_of=caption_of)
    validate_corpus(corpus, num_image_rows, num_text_rows)
    return corpus


def save_annotations(corpus: Corpus, path: str | Path) -> None:
    """Write the corpus back out in the canonical annotation layout.

    Canonical means fixed key order, two-space indent, and a trailing
    newline, so save -> load -> save is byte-identical.
    """
    by_image: dict[str, list[TextRecord]] = {img.image_id: [] for img in corpus.images}
    for txt in corpus.texts:
        owner = corpus.caption_of.get(txt.text_id)
        if owner is None:
            raise ValidationError(f"text {txt.text_id!r} has no owning image")
        by_image[owner].append(txt)

    doc = []
    for img in corpus.images:
        caps = by_image[img.image_id]
        doc.append(
            {
                "image_id": img.image_id,
                "person_id": img.person_id,
                "file_path": img.source_path,
                "captions": [t.raw_text for t in caps],
                "image_embedding_index": img.embedding_index,
                "caption_embedding_indices": [t.embedding_index for t in caps],
            }
        )
    Path(path).write_text(
        json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def normalize_rows(matrix: np.ndarray) -> np.ndarray:
    """Return a float32 copy with unit-L2 rows.

    Rows already within ``UNIT_NORM_TOL`` of unit norm are passed through
    untouched, which makes normalization idempotent at the bit level and
    keeps save -> load -> save round trips byte-identical. Zero rows are
    rejected by index.
    """
    mat = np.asarray(matrix, dtype=np.float32)
    if mat.ndim != 2:
        raise ValidationError(f"embedding matrix must be 2-D, got shape {mat.shape}")
    norms = np.linalg.norm(mat.astype(np.float64), axis=1)
    zero_rows = np.flatnonzero(norms < 1e-30)
    if zero_rows.size:
        raise ValidationError(f"zero-norm embedding row at index {int(zero_rows[0])}")
    out = mat.copy()
    off = np.abs(norms - 1.0) > UNIT_NORM_TOL
    if np.any(off):
        fixed = mat[off].astype(np.float64) / norms[off, None]
        out[off] = fixed.astype(np.float32)
    return out


def load_embeddings(path: str | Path) -> np.ndarray:
    """Read an ICLE file and return the row-normalized float32 matrix."""
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: file too short for an ICLE header")
    if data[:4] != ICLE_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {ICLE_MAGIC!r}")
    version, rows, dim = struct.unpack_from("<III", data, 4)
    if version != ICLE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = 16 + rows * dim * 4
    if len(data) != expected:
        raise FormatError(
            f"{path}: payload is {len(data) - 16} bytes, expected {rows * dim * 4} "
            f"({rows} rows x {dim} dims)"
        )
    mat = np.frombuffer(data, dtype="<f4", offset=16).reshape(rows, dim)
    return normalize_rows(np.ascontiguousarray(mat))


def save_embeddings(matrix: np.ndarray, path: str | Path) -> None:
    """Write a float32 matrix as an ICLE file (no normalization applied)."""
    mat = np.ascontiguousarray(np.asarray(matrix, dtype=np.float32))
    if mat.ndim != 2:
        raise ValidationError(f"embedding matrix must be 2-D, got shape {mat.shape}")
    rows, dim = mat.shape
    header = ICLE_MAGIC + struct.pack("<III", ICLE_VERSION, rows, dim)
    Path(path).write_bytes(header + mat.astype("<f4").tobytes(order="C"))


@dataclass(frozen=True)
class SyntheticBenchConfig:
    """Desk-scale benchmark: one unit-norm center per identity, gaussian spread."""

    num_identities: int
    images_per_identity: int
    texts_per_identity: int
    dim: int
    noise_sigma: float
    seed: int

    def __post_init__(self):
        if self.num_identities < 1 or self.images_per_identity < 1 or self.texts_per_identity < 1:
            raise ValidationError("all synthetic benchmark counts must be >= 1")
        if self.dim < 2:
            raise ValidationError("synthetic benchmark dim must be >= 2")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be non-negative")


def generate_synthetic_benchmark(
    cfg: SyntheticBenchConfig,
) -> tuple[Corpus, np.ndarray, np.ndarray]:
    """Generate (corpus, image_matrix, text_matrix) deterministically from cfg.

    Each embedding is normalize(center + gaussian(0, sigma)); with sigma=0
    every embedding equals its identity center exactly. Texts are attached
    round-robin to the identity's images as captions, so the corpus also
    round-trips through the annotation format with stable ids.
    """
    rng = np.random.default_rng(cfg.seed)
    n_img = cfg.num_identities * cfg.images_per_identity
    n_txt = cfg.num_identities * cfg.texts_per_identity

    centers = rng.standard_normal((cfg.num_identities, cfg.dim))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    img_noise = rng.standard_normal((n_img, cfg.dim))
    txt_noise = rng.standard_normal((n_txt, cfg.dim))

    img_centers = np.repeat(centers, cfg.images_per_identity, axis=0)
    txt_centers = np.repeat(centers, cfg.texts_per_identity, axis=0)
    img_raw = img_centers + cfg.noise_sigma * img_noise
    txt_raw = txt_centers + cfg.noise_sigma * txt_noise
    image_matrix = (img_raw / np.linalg.norm(img_raw, axis=1, keepdims=True)).astype(
        np.float32
    )
    text_matrix = (txt_raw / np.linalg.norm(txt_raw, axis=1, keepdims=True)).astype(
        np.float32
    )

    images: list[ImageRecord] = []
    texts: list[TextRecord] = []
    caption_of: dict[str, str] = {}
    caption_counts: dict[str, int] = {}
    for pid in range(cfg.num_identities):
        for j in range(cfg.images_per_identity):
            image_id = f"img{pid:04d}_{j}"
            images.append(
                ImageRecord(
                    image_id=image_id,
                    person_id=pid,
                    source_path=f"synthetic://{image_id}.jpg",
                    embedding_index=pid * cfg.images_per_identity + j,
                )
            )
            caption_counts[image_id] = 0
    for pid in range(cfg.num_identities):
        for t in range(cfg.texts_per_identity):
            owner = f"img{pid:04d}_{t % cfg.images_per_identity}"
            text_id = f"{owner}#c{caption_counts[owner]}"
            caption_counts[owner] += 1
            texts.append(
                TextRecord(
                    text_id=text_id,
                    person_id=pid,
                    raw_text=f"synthetic person {pid:04d} description {t}",
                    embedding_index=pid * cfg.texts_per_identity + t,
                )
            )
            caption_of[text_id] = owner

    corpus = Corpus(images=images, texts=texts, caption_of=caption_of)
    validate_corpus(corpus, n_img, n_txt)
    return corpus, image_matrix, text_matrix


def relevant_galleries(corpus: Corpus) -> dict[int, frozenset[int]]:
    """Map each text query row to the gallery rows of the same person.

    Raises ValidationError (listing the offending text ids) if any query's
    person has no gallery image; silently skipping those queries would
    corrupt cross-method comparisons.
    """
    by_person: dict[int, set[int]] = {}
    for img in corpus.images:
        by_person.setdefault(img.person_id, set()).add(img.embedding_index)
    orphans = [t.text_id for t in corpus.texts if t.person_id not in by_person]
    if orphans:
        raise ValidationError(
            f"queries with no same-person gallery image: {sorted(orphans)}"
        )
    return {t.embedding_index: frozenset(by_person[t.person_id]) for t in corpus.texts}
