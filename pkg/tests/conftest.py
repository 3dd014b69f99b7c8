import os
from pathlib import Path

import numpy as np
import pytest

from tireid.corpus import Corpus, ImageRecord, TextRecord

GOLDEN_DIR = Path(__file__).parent / "golden"
FIXTURE_DIR = Path(__file__).parent / "fixtures"


def golden_check(name: str, produced: str) -> None:
    """Compare produced text against a frozen golden file, byte for byte.

    Set REGEN_GOLDENS=1 to (re)write the files from a verified run.
    """
    path = GOLDEN_DIR / name
    if os.environ.get("REGEN_GOLDENS") == "1":
        GOLDEN_DIR.mkdir(parents=True, exist_ok=True)
        path.write_text(produced, encoding="utf-8")
    assert path.exists(), f"golden file {name} missing; run with REGEN_GOLDENS=1"
    assert produced == path.read_text(encoding="utf-8"), f"golden mismatch: {name}"


def tiny_corpus(
    img_persons: list[int], txt_persons: list[int], caption_owner: list[int] | None = None
) -> Corpus:
    """Hand-rolled corpus: one image/text record per entry, row i = record i."""
    images = [
        ImageRecord(f"img{i}", pid, f"/images/img{i}.jpg", i)
        for i, pid in enumerate(img_persons)
    ]
    texts = [
        TextRecord(f"txt{i}", pid, f"person {pid} description {i}", i)
        for i, pid in enumerate(txt_persons)
    ]
    caption_of = {}
    if caption_owner is not None:
        caption_of = {f"txt{i}": f"img{j}" for i, j in enumerate(caption_owner)}
    else:
        by_person = {}
        for img in images:
            by_person.setdefault(img.person_id, img.image_id)
        caption_of = {
            t.text_id: by_person[t.person_id]
            for t in texts
            if t.person_id in by_person
        }
    return Corpus(images=images, texts=texts, caption_of=caption_of)


def unit_rows(rng: np.random.Generator, rows: int, dim: int) -> np.ndarray:
    mat = rng.standard_normal((rows, dim))
    return (mat / np.linalg.norm(mat, axis=1, keepdims=True)).astype(np.float32)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
