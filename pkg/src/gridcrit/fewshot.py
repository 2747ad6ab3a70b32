"""Few-shot exemplar storage, similarity selection, and example synthesis.

Exemplar records load from a JSONL file; per-record vectors come from an
optional embedding table keyed by record id (joint) and "id#i" (comment i),
falling back to the store's embedder. Builders return StageExamples whose
answers round-trip through the stage parsers.
"""

from __future__ import annotations

import json
import os
import random
from dataclasses import dataclass

from gridcrit.backends import PNG_SIGNATURE, ImagePart, Part, TextPart, Vector, cosine
from gridcrit.geometry import (
    DEFAULT_SPACE,
    BoxError,
    GridBox,
    GridSpace,
    PerturbConfig,
    format_box,
    generate_perturb,
    generate_perturbed_fewshot_examples,
)
from gridcrit.imaging import AnnotationStyle, RasterImage, draw_coordinate_axes, render_zoom_patch
from gridcrit.profiles import (
    BOX_ACCEPT_SENTINEL,
    BOXREFINE,
    COMMENT_ACCEPT_SENTINEL,
    TEXTFILTER,
    TEXTREFINE,
    VALIDATION,
    ValidationVerdict,
    format_detection_text,
    parse_detection_text,
)


class FewshotError(ValueError):
    """Bad store data or insufficient material to build an example."""


@dataclass(frozen=True)
class GroundedComment:
    text: str
    box: GridBox
    valid: bool = True

    def __post_init__(self) -> None:
        if not self.text:
            raise FewshotError("grounded comment text must be nonempty")


@dataclass(frozen=True)
class ExemplarRecord:
    id: str
    image: str
    task: str
    comments: tuple[GroundedComment, ...]


@dataclass(frozen=True)
class ExampleBlock:
    """One rendered example: prompt-side parts plus the expected answer text."""

    parts: tuple[Part, ...]
    answer: str


@dataclass(frozen=True)
class StageExamples:
    stage: str
    blocks: tuple[ExampleBlock, ...]

    def as_parts(self) -> list[Part]:
        out: list[Part] = []
        for block in self.blocks:
            out.extend(block.parts)
            out.append(TextPart(block.answer))
        return out


class ExemplarStore:
    """Immutable collection of exemplars bound to an embedding provider."""

    def __init__(self, records, embedder, root: str = ".", vectors: dict[str, Vector] | None = None):
        self.records = list(records)
        ids = [r.id for r in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise FewshotError(f"duplicate exemplar ids: {', '.join(dupes)}")
        self.by_id = {r.id: r for r in self.records}
        self.embedder = embedder
        self.root = root
        self.vectors = dict(vectors or {})
        self._png_cache: dict[str, bytes] = {}

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def from_jsonl(
        cls,
        path: str,
        embedder,
        eval_ids=(),
        vectors: dict[str, Vector] | None = None,
        root: str | None = None,
    ) -> "ExemplarStore":
        records = []
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    raw = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FewshotError(f"{path}:{lineno}: invalid JSON: {exc}") from exc
                try:
                    records.append(_record_from_json(raw))
                except (FewshotError, BoxError, KeyError, TypeError) as exc:
                    raise FewshotError(f"{path}:{lineno}: {exc}") from exc
        overlap = {r.id for r in records} & set(eval_ids)
        if overlap:
            raise FewshotError(
                f"{path}: exemplar ids overlap the evaluation split: {', '.join(sorted(overlap))}"
            )
        return cls(records, embedder, root=root or os.path.dirname(os.path.abspath(path)), vectors=vectors)

    def load_png(self, record: ExemplarRecord) -> bytes:
        if record.image not in self._png_cache:
            with open(os.path.join(self.root, record.image), "rb") as fh:
                data = fh.read()
            if not data.startswith(PNG_SIGNATURE):
                raise FewshotError(f"exemplar image {record.image!r} is not a PNG")
            self._png_cache[record.image] = data
        return self._png_cache[record.image]

    def load_image(self, record: ExemplarRecord) -> RasterImage:
        return RasterImage.load(os.path.join(self.root, record.image))

    def joint_vector(self, record: ExemplarRecord) -> Vector:
        if record.id in self.vectors:
            return self.vectors[record.id]
        return self.embedder.embed_joint(self.load_png(record), record.task)

    def comment_vector(self, record: ExemplarRecord, index: int) -> Vector:
        key = f"{record.id}#{index}"
        if key in self.vectors:
            return self.vectors[key]
        return self.embedder.embed_text(record.comments[index].text)

    def invalid_comments(self) -> list[str]:
        return [c.text for r in self.records for c in r.comments if not c.valid]

    def foreign_comments(self, exclude_id: str) -> list[str]:
        return [c.text for r in self.records if r.id != exclude_id for c in r.comments if c.valid]


def _record_from_json(raw: dict) -> ExemplarRecord:
    if not isinstance(raw, dict):
        raise FewshotError("record must be a JSON object")
    for key in ("id", "image", "task", "comments"):
        if key not in raw:
            raise FewshotError(f"record missing key {key!r}")
    comments = []
    for i, c in enumerate(raw["comments"]):
        box = c["box"]
        if not isinstance(box, list) or len(box) != 4:
            raise FewshotError(f"comment {i}: box must be [left, top, right, bottom]")
        comments.append(
            GroundedComment(text=c["text"], box=GridBox(*box), valid=bool(c.get("valid", True)))
        )
    return ExemplarRecord(id=raw["id"], image=raw["image"], task=raw["task"], comments=tuple(comments))


def select_by_joint_similarity(
    store: ExemplarStore, image_png: bytes, task_text: str, k: int
) -> list[ExemplarRecord]:
    """Top-k exemplars by cosine of joint embeddings, ties by ascending id."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return []
    if not store.records:
        raise FewshotError("selection from an empty store")
    query = store.embedder.embed_joint(image_png, task_text)
    scored = [(-cosine(query, store.joint_vector(r)), r.id, r) for r in store.records]
    scored.sort(key=lambda t: (t[0], t[1]))
    return [r for _, _, r in scored[:k]]


def select_by_text_similarity(
    store: ExemplarStore, text: str, k: int
) -> list[tuple[str, GridBox, ExemplarRecord]]:
    """Top-k individual valid comments by cosine to `text`, with their boxes."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return []
    if not store.records:
        raise FewshotError("selection from an empty store")
    query = store.embedder.embed_text(text)
    scored = []
    for record in store.records:
        for i, comment in enumerate(record.comments):
            if not comment.valid:
                continue
            score = cosine(query, store.comment_vector(record, i))
            scored.append((-score, record.id, i, comment, record))
    scored.sort(key=lambda t: (t[0], t[1], t[2]))
    return [(c.text, c.box, r) for _, _, _, c, r in scored[:k]]


def _numbered_list(texts: list[str]) -> str:
    return "\n".join(f"{i}. {t}" for i, t in enumerate(texts))


def format_filter_answer(verdicts: list[tuple[int, bool]]) -> str:
    return "[" + ", ".join(f"({i}, {'True' if v else 'False'})" for i, v in verdicts) + "]"


def build_filter_examples(
    store: ExemplarStore,
    selected: list[ExemplarRecord],
    invalid_pool: list[str],
    k_invalid: int,
    rng: random.Random,
    space: GridSpace = DEFAULT_SPACE,
    style: AnnotationStyle = AnnotationStyle(),
) -> StageExamples:
    """One block per exemplar: axis-overlaid screenshot, an augmented comment
    list with invalid items injected, and the expected verdict tuples."""
    if k_invalid < 0:
        raise ValueError(f"k_invalid must be >= 0, got {k_invalid}")
    if k_invalid > 0 and len(invalid_pool) < k_invalid:
        raise FewshotError(f"invalid pool has {len(invalid_pool)} comments, need {k_invalid}")
    blocks = []
    for record in selected:
        valid_texts = [c.text for c in record.comments if c.valid]
        if not valid_texts:
            raise FewshotError(f"exemplar {record.id!r} has no valid comments to build a filter example")
        flags = [(t, True) for t in valid_texts]
        for injected in rng.sample(invalid_pool, k_invalid):
            flags.insert(rng.randint(0, len(flags)), (injected, False))
        answer = format_filter_answer([(i, ok) for i, (_, ok) in enumerate(flags)])
        axes_png = draw_coordinate_axes(store.load_image(record), space, style).png_bytes()
        parts = (
            TextPart("UI Screenshot:"),
            ImagePart(axes_png),
            TextPart("Design comments:\n" + _numbered_list([t for t, _ in flags])),
        )
        blocks.append(ExampleBlock(parts=parts, answer=answer))
    return StageExamples(stage=TEXTFILTER, blocks=tuple(blocks))


def build_box_refine_trace(
    comment_text: str,
    box: GridBox,
    image: RasterImage,
    cfg: PerturbConfig,
    rng: random.Random,
    space: GridSpace = DEFAULT_SPACE,
    style: AnnotationStyle = AnnotationStyle(),
    context_frac: float = 0.25,
) -> StageExamples:
    """A synthetic refinement dialogue: noisy candidates converging on `box`.

    Each block shows a candidate's coordinates and zoom patch; its answer is
    the next candidate's coordinates, or the acceptance sentinel at the end.
    """
    trace = generate_perturbed_fewshot_examples(box, cfg, space, rng)
    blocks = []
    for i, candidate in enumerate(trace):
        patch_png = render_zoom_patch(image, candidate, space, style, context_frac).png_bytes()
        parts = (
            TextPart(f"Design comment: {comment_text}"),
            TextPart(f"Bounding box candidate: {format_box(candidate)}"),
            ImagePart(patch_png),
        )
        answer = format_box(trace[i + 1]) if i + 1 < len(trace) else BOX_ACCEPT_SENTINEL
        blocks.append(ExampleBlock(parts=parts, answer=answer))
    return StageExamples(stage=BOXREFINE, blocks=tuple(blocks))


def build_text_refine_trace(
    target_comment: str, distractor_pool: list[str], steps: int, embedder
) -> StageExamples:
    """Distractors ordered by ascending similarity to the target, target last."""
    if steps < 1:
        raise ValueError(f"steps must be >= 1, got {steps}")
    if len(distractor_pool) < steps:
        raise FewshotError(f"distractor pool has {len(distractor_pool)} comments, need {steps}")
    target_vec = embedder.embed_text(target_comment)
    scored = sorted(
        ((cosine(target_vec, embedder.embed_text(d)), i, d) for i, d in enumerate(distractor_pool)),
        key=lambda t: (-t[0], t[1]),
    )[:steps]
    ordered = [d for _, _, d in sorted(scored, key=lambda t: (t[0], t[1]))]
    sequence = ordered + [target_comment]
    blocks = []
    for i, comment in enumerate(sequence):
        answer = sequence[i + 1] if i + 1 < len(sequence) else COMMENT_ACCEPT_SENTINEL
        blocks.append(ExampleBlock(parts=(TextPart(f"Design comment candidate: {comment}"),), answer=answer))
    return StageExamples(stage=TEXTREFINE, blocks=tuple(blocks))


def build_validation_examples(
    store: ExemplarStore,
    selected: list[ExemplarRecord],
    rng: random.Random,
    cfg: PerturbConfig,
    space: GridSpace = DEFAULT_SPACE,
    style: AnnotationStyle = AnnotationStyle(),
    context_frac: float = 0.25,
) -> StageExamples:
    """Four blocks, one per verdict class, built from the first usable exemplar."""
    record = next((r for r in selected if any(c.valid for c in r.comments)), None)
    if record is None:
        raise FewshotError("no selected exemplar has a valid grounded comment")
    good = next(c for c in record.comments if c.valid)
    wrong_pool = store.invalid_comments() or store.foreign_comments(record.id)
    if not wrong_pool:
        raise FewshotError("no invalid or foreign comments available for the incorrect-comment classes")
    wrong_text = wrong_pool[rng.randrange(len(wrong_pool))]
    # at frac 1.0 a wide box can filter every candidate and clamp back to the
    # input; step down until the negative example actually differs
    bad_box = None
    for frac in (1.0, 0.5, 0.25, 0.1):
        candidate = generate_perturb(good.box, frac, space, rng)
        if candidate != good.box:
            bad_box = candidate
            break
    if bad_box is None:
        raise FewshotError("could not perturb the exemplar box away from ground truth")
    image = store.load_image(record)
    axes_png = draw_coordinate_axes(image, space, style).png_bytes()

    cases = [
        (good.text, good.box, ValidationVerdict.BOTH_CORRECT),
        (wrong_text, good.box, ValidationVerdict.INCORRECT_COMMENT),
        (good.text, bad_box, ValidationVerdict.INCORRECT_BBOX),
        (wrong_text, bad_box, ValidationVerdict.BOTH_INCORRECT),
    ]
    blocks = []
    for text, box, verdict in cases:
        patch_png = render_zoom_patch(image, box, space, style, context_frac).png_bytes()
        parts = (
            TextPart("UI Screenshot:"),
            ImagePart(axes_png),
            TextPart(f"Design Comment: {text}"),
            TextPart("Zoomed-in Patch:"),
            ImagePart(patch_png),
            TextPart("Label:"),
        )
        blocks.append(ExampleBlock(parts=parts, answer=verdict.label))
    return StageExamples(stage=VALIDATION, blocks=tuple(blocks))


def perturb_detection_text(
    text: str, categories: list[str], attribute_vocab: list[str], rng: random.Random
) -> str:
    """Corrupt a detection item by swapping its category or editing attributes."""
    category, attrs = parse_detection_text(text)
    ops = []
    if any(c != category for c in categories):
        ops.append("swap_category")
    if attrs and any(a not in attrs for a in attribute_vocab):
        ops.append("swap_attribute")
    if any(a not in attrs for a in attribute_vocab):
        ops.append("add_attribute")
    if attrs:
        ops.append("delete_attribute")
    if not ops:
        raise FewshotError("vocabularies too small to perturb the detection text")
    op = rng.choice(ops)
    if op == "swap_category":
        category = rng.choice([c for c in categories if c != category])
    elif op == "swap_attribute":
        idx = rng.randrange(len(attrs))
        attrs = list(attrs)
        attrs[idx] = rng.choice([a for a in attribute_vocab if a not in attrs])
    elif op == "add_attribute":
        attrs = list(attrs) + [rng.choice([a for a in attribute_vocab if a not in attrs])]
    else:
        attrs = list(attrs)
        attrs.pop(rng.randrange(len(attrs)))
    return format_detection_text(category, attrs)
