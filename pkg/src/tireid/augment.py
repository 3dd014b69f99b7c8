"""Text reorganization augmentation and SFT dataset construction.

The augmentation pipeline runs per training text: enrich it with
attribute details from the oracle, decompose the enriched text into
independent sub-sentences, rewrite each sub-sentence into style variants
(the unmodified sub-sentence always sits at style index 0), then sample
(permutation, style choice) combinations to render augmented texts. Every
randomized step is a pure function of (seed, text_id).

The SFT builder pairs sampled texts with their ground-truth images as Yes
samples and with their in-top-10 different-person images as No samples,
exported in the conversation format instruction-tuning frameworks consume.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .corpus import Corpus, ImageRecord, TextRecord
from .errors import OracleError, ValidationError
from .oracle import OracleBackend
from .retrieval import RankedList
from .templates import PromptKind, PromptTemplate, default_templates

logger = logging.getLogger(__name__)

HARD_NEGATIVE_PREFIX = 10
IMAGE_PLACEHOLDER = "<image>"
_ENUMERATION_CAP = 200_000


@dataclass(frozen=True)
class EnrichedText:
    text_id: str
    original: str
    enriched: str

    def __post_init__(self):
        if not self.enriched:
            raise ValidationError(f"text {self.text_id!r}: empty enrichment")


@dataclass(frozen=True)
class StyleMatrix:
    """n sub-sentences by m style variants; entry 0 is always the original."""

    sub_sentences: tuple[str, ...]
    styles: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not self.sub_sentences:
            raise ValidationError("style matrix needs at least one sub-sentence")
        if len(self.styles) != len(self.sub_sentences):
            raise ValidationError("styles and sub_sentences length mismatch")
        m = len(self.styles[0])
        for sub, row in zip(self.sub_sentences, self.styles):
            if len(row) != m:
                raise ValidationError("ragged style matrix")
            if row[0] != sub:
                raise ValidationError("style index 0 must be the unmodified sub-sentence")

    @property
    def n(self) -> int:
        return len(self.sub_sentences)

    @property
    def m(self) -> int:
        return len(self.styles[0])

    def space_size(self) -> int:
        return math.factorial(self.n) * self.m**self.n


@dataclass(frozen=True)
class AugmentedText:
    text_id: str
    source_text_id: str
    person_id: int
    permutation: tuple[int, ...]
    style_choices: tuple[int, ...]
    rendered: str

    def to_dict(self) -> dict:
        return {
            "text_id": self.text_id,
            "source_text_id": self.source_text_id,
            "person_id": self.person_id,
            "text": self.rendered,
            "permutation": list(self.permutation),
            "style_choices": list(self.style_choices),
        }


def enrich(text: TextRecord, image: ImageRecord, oracle: OracleBackend) -> EnrichedText:
    """VQA on the text's ground-truth image, merged back into the text."""
    refined = oracle.refine_query(text, image)
    if refined.refined_text is None:
        raise ValidationError("enrichment needs a text-producing oracle backend")
    return EnrichedText(
        text_id=text.text_id, original=text.raw_text, enriched=refined.refined_text
    )


def build_style_matrix(
    enriched: EnrichedText, m: int, oracle: OracleBackend
) -> StyleMatrix:
    """Decompose, then rewrite each sub-sentence into m - 1 extra styles."""
    if m < 1:
        raise ValidationError(f"style count m must be >= 1, got {m}")
    subs = oracle.decompose(enriched.enriched)
    styles = []
    for sub in subs:
        row = [sub]
        if m > 1:
            row.extend(oracle.rewrite(sub, m - 1))
        styles.append(tuple(row))
    return StyleMatrix(sub_sentences=tuple(subs), styles=tuple(styles))


def _normalize_sentence(piece: str) -> str:
    s = piece.strip()
    while s.endswith(".."):
        s = s[:-1]
    if not s.endswith((".", "!", "?")):
        s += "."
    return s


def render_augmentation(
    matrix: StyleMatrix, permutation: Sequence[int], style_choices: Sequence[int]
) -> str:
    """Chosen rewrites joined in permutation order with single spaces."""
    if sorted(permutation) != list(range(matrix.n)):
        raise ValidationError(f"bad permutation {list(permutation)}")
    if len(style_choices) != matrix.n:
        raise ValidationError("one style choice per sub-sentence required")
    pieces = []
    for i in permutation:
        choice = style_choices[i]
        if not 0 <= choice < matrix.m:
            raise ValidationError(f"style choice {choice} out of range")
        pieces.append(_normalize_sentence(matrix.styles[i][choice]))
    return " ".join(pieces)


def _unrank_permutation(index: int, n: int) -> tuple[int, ...]:
    # Lehmer-code unranking over 0..n-1.
    digits = []
    for radix in range(1, n + 1):
        index, digit = divmod(index, radix)
        digits.append(digit)
    digits.reverse()
    pool = list(range(n))
    return tuple(pool.pop(d) for d in digits)


def _unrank_combination(index: int, n: int, m: int) -> tuple[tuple[int, ...], tuple[int, ...]]:
    perm_index, choice_index = divmod(index, m**n)
    choices = []
    for _ in range(n):
        choice_index, digit = divmod(choice_index, m)
        choices.append(digit)
    return _unrank_permutation(perm_index, n), tuple(choices)


def _randbelow(rng: np.random.Generator, bound: int) -> int:
    """Uniform integer in [0, bound) for arbitrarily large bounds."""
    if bound <= 0:
        raise ValidationError("bound must be positive")
    nbits = bound.bit_length()
    nbytes = (nbits + 7) // 8
    excess = nbytes * 8 - nbits
    while True:
        draw = int.from_bytes(rng.bytes(nbytes), "big") >> excess
        if draw < bound:
            return draw


def reorganize(
    matrix: StyleMatrix,
    count: int,
    seed: int,
    text_id: str = "",
    person_id: int = 0,
) -> list[AugmentedText]:
    """Sample augmented texts from the n! * m^n combination space.

    Sampling is uniform without replacement while count fits in the space;
    beyond that, all distinct combinations are emitted (in seeded order)
    and the remainder drawn with replacement. Deterministic under seed.
    """
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    total = matrix.space_size()
    rng = np.random.default_rng(seed)
    picks: list[int]
    if total <= _ENUMERATION_CAP:
        order = rng.permutation(total)
        if count <= total:
            picks = [int(x) for x in order[:count]]
        else:
            extra = rng.integers(0, total, size=count - total)
            picks = [int(x) for x in order] + [int(x) for x in extra]
    else:
        seen: set[int] = set()
        picks = []
        while len(picks) < count:
            draw = _randbelow(rng, total)
            if draw in seen:
                continue
            seen.add(draw)
            picks.append(draw)
    out = []
    for j, pick in enumerate(picks):
        permutation, choices = _unrank_combination(pick, matrix.n, matrix.m)
        out.append(
            AugmentedText(
                text_id=f"{text_id}::aug{j}" if text_id else f"aug{j}",
                source_text_id=text_id,
                person_id=person_id,
                permutation=permutation,
                style_choices=choices,
                rendered=render_augmentation(matrix, permutation, choices),
            )
        )
    return out


def _derive_seed(seed: int, text_id: str) -> int:
    digest = hashlib.sha256(f"{seed}|{text_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


@dataclass
class AugmentationStats:
    texts_processed: int = 0
    texts_skipped: int = 0
    augmentations: int = 0


def generate_augmented_corpus(
    corpus: Corpus,
    oracle: OracleBackend,
    m: int,
    per_text_count: int,
    seed: int,
) -> tuple[list[dict], AugmentationStats]:
    """Originals plus per-text augmentations, as provenance-tagged rows.

    Oracle failures skip the affected text (counting it) and the pipeline
    continues. Rows come back sorted by text_id so output bytes never
    depend on processing order.
    """
    if per_text_count < 0:
        raise ValidationError("per_text_count must be >= 0")
    stats = AugmentationStats()
    rows: list[dict] = []
    for text in corpus.texts:
        rows.append(
            {
                "text_id": text.text_id,
                "source_text_id": text.text_id,
                "person_id": text.person_id,
                "text": text.raw_text,
                "permutation": [],
                "style_choices": [],
            }
        )
    if per_text_count > 0:
        for text in corpus.texts:
            try:
                image = corpus.ground_truth_image(text)
                enriched = enrich(text, image, oracle)
                matrix = build_style_matrix(enriched, m, oracle)
            except (OracleError, ValidationError) as exc:
                logger.warning("skipping %s: %s", text.text_id, exc)
                stats.texts_skipped += 1
                continue
            n_aug = min(per_text_count, matrix.space_size())
            augmented = reorganize(
                matrix,
                n_aug,
                seed=_derive_seed(seed, text.text_id),
                text_id=text.text_id,
                person_id=text.person_id,
            )
            rows.extend(a.to_dict() for a in augmented)
            stats.texts_processed += 1
            stats.augmentations += len(augmented)
    rows.sort(key=lambda r: r["text_id"])
    return rows, stats


def write_augmented_jsonl(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, ensure_ascii=False, separators=(",", ":")) + "\n")


@dataclass(frozen=True)
class SftSample:
    prompt: str
    response: str  # "Yes" or "No"
    polarity: str  # "positive" or "negative"
    text_id: str
    image_id: str
    image_path: str


@dataclass
class SftDataset:
    samples: list[SftSample]
    num_positive: int
    num_negative: int


def build_sft_dataset(
    corpus: Corpus,
    rankings: Sequence[RankedList],
    n_l: int | None,
    seed: int,
    loc_template: PromptTemplate | None = None,
) -> SftDataset:
    """Yes/No localization pairs for fine-tuning an external model.

    Positives pair a sampled text with its ground-truth image. Negatives
    are the different-person images inside that text's raw top-10 ranking
    prefix; the scan never continues past rank 10, so a text whose whole
    top-10 shares its identity contributes no negatives.
    """
    template = loc_template or default_templates()[PromptKind.LOC]
    by_row = {r.query_index: r for r in rankings}
    images_by_row = corpus.images_by_row()
    persons_with_images = {img.person_id for img in corpus.images}

    eligible: list[TextRecord] = []
    for text in corpus.texts:
        if text.person_id not in persons_with_images:
            logger.warning("excluding %s: person has no gallery image", text.text_id)
            continue
        if text.embedding_index not in by_row:
            raise ValidationError(f"no ranking for query {text.text_id!r}")
        eligible.append(text)
    if not eligible:
        raise ValidationError("no eligible texts for SFT construction")

    if n_l is None:
        n_l = min(10_000, len(eligible))
    if n_l < 1:
        raise ValidationError("n_l must be >= 1")
    rng = np.random.default_rng(seed)
    if n_l >= len(eligible):
        chosen = list(eligible)
    else:
        idx = rng.choice(len(eligible), size=n_l, replace=False)
        chosen = [eligible[i] for i in sorted(int(i) for i in idx)]
    chosen.sort(key=lambda t: t.text_id)

    samples: list[SftSample] = []
    num_pos = 0
    num_neg = 0
    for text in chosen:
        gt_image = corpus.ground_truth_image(text)
        prompt = template.render(query=text.raw_text)
        samples.append(
            SftSample(
                prompt=prompt,
                response="Yes",
                polarity="positive",
                text_id=text.text_id,
                image_id=gt_image.image_id,
                image_path=gt_image.source_path,
            )
        )
        num_pos += 1
        ranking = by_row[text.embedding_index]
        for row in ranking.gallery_indices[:HARD_NEGATIVE_PREFIX]:
            image = images_by_row.get(int(row))
            if image is None:
                raise ValidationError(f"gallery row {int(row)} has no image record")
            if image.person_id == text.person_id:
                continue
            samples.append(
                SftSample(
                    prompt=prompt,
                    response="No",
                    polarity="negative",
                    text_id=text.text_id,
                    image_id=image.image_id,
                    image_path=image.source_path,
                )
            )
            num_neg += 1
    return SftDataset(samples=samples, num_positive=num_pos, num_negative=num_neg)


def export_sft(dataset: SftDataset, path: str | Path) -> None:
    """Conversation-format JSON: one record per sample with an image tag."""
    doc = [
        {
            "messages": [
                {"role": "user", "content": IMAGE_PLACEHOLDER + sample.prompt},
                {"role": "assistant", "content": sample.response},
            ],
            "images": [sample.image_path],
        }
        for sample in dataset.samples
    ]
    Path(path).write_text(
        json.dumps(doc, indent=2, ensure_ascii=False) + "\n", encoding="utf-8"
    )


def validate_sft_export(path: str | Path) -> tuple[int, int]:
    """Schema check of an exported file; returns (yes_count, no_count)."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, list):
        raise ValidationError("SFT export must be a JSON array")
    yes = no = 0
    for pos, record in enumerate(doc):
        if set(record) != {"messages", "images"}:
            raise ValidationError(f"record {pos}: keys must be messages/images")
        messages = record["messages"]
        if (
            not isinstance(messages, list)
            or len(messages) != 2
            or messages[0].get("role") != "user"
            or messages[1].get("role") != "assistant"
        ):
            raise ValidationError(f"record {pos}: malformed messages")
        if IMAGE_PLACEHOLDER not in messages[0].get("content", ""):
            raise ValidationError(f"record {pos}: user turn lacks image placeholder")
        answer = messages[1].get("content")
        if answer == "Yes":
            yes += 1
        elif answer == "No":
            no += 1
        else:
            raise ValidationError(f"record {pos}: assistant turn must be Yes or No")
        images = record["images"]
        if not isinstance(images, list) or len(images) != 1:
            raise ValidationError(f"record {pos}: images must hold one path")
    return yes, no
