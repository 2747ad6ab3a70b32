"""The pipeline state machine.

Stage order is fixed: TextGen -> TextFilter -> per item (BoxGen -> BoxRefine
loop -> Validation -> routed refinement). Budgets bound backend calls per
stage and item, parse retries included, so the call accounting in the report
is exact against the transcript.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

from gridcrit.backends import (
    BackendError,
    ChatRequest,
    ImagePart,
    Part,
    TextPart,
)
from gridcrit.fewshot import (
    ExampleBlock,
    ExemplarStore,
    StageExamples,
    build_box_refine_trace,
    build_filter_examples,
    build_text_refine_trace,
    build_validation_examples,
    select_by_joint_similarity,
    select_by_text_similarity,
)
from gridcrit.geometry import (
    DEFAULT_SPACE,
    BoxError,
    GridBox,
    GridSpace,
    PerturbConfig,
    format_box,
    validate_in_space,
)
from gridcrit.imaging import (
    AnnotationStyle,
    ImageError,
    RasterImage,
    draw_coordinate_axes,
    render_zoom_patch,
)
from gridcrit.profiles import (
    BOX_ACCEPT_SENTINEL,
    BOXGEN,
    BOXREFINE,
    COMMENT_ACCEPT_SENTINEL,
    STAGES,
    TEXTFILTER,
    TEXTGEN,
    TEXTREFINE,
    VALIDATION,
    VERDICT_BY_LABEL,
    TaskProfile,
    ValidationVerdict,
)

GENERATED = "generated"
FILTERED_OUT = "filtered_out"
GROUNDED = "grounded"
EMITTED = "emitted"
DISCARDED = "discarded"

REASON_BOTH_INCORRECT = "both_incorrect"
REASON_BUDGET = "budget_exhausted"
REASON_PARSE = "parse_failure"
REASON_RENDER = "render_failure"


class ParseError(ValueError):
    """A stage reply did not match its required surface form."""


class FilterSyntaxError(ParseError):
    """No (index, True/False) tuples could be read at all."""


class FilterCoverageError(ParseError):
    """Tuples parsed but their indices do not cover 0..n-1 exactly once."""


class BoxTupleError(ParseError):
    """No 4-tuple of numbers in the reply."""


class BoxRangeError(ParseError):
    """A tuple parsed but violates box ordering or grid bounds."""


class VerdictError(ParseError):
    """Reply is not one of the four verdict labels."""


class EmptyRefinementError(ParseError):
    """A text-refinement reply was empty."""


class ReportInvariantError(AssertionError):
    """A finished report violates conservation or call accounting."""


class PipelineAbort(Exception):
    """The run could not finish; the partial transcript is preserved."""

    def __init__(self, message: str, transcript: list["TranscriptEntry"], stage_calls: dict[str, int]):
        super().__init__(message)
        self.transcript = transcript
        self.stage_calls = stage_calls


class BackendAbort(PipelineAbort):
    """A backend call failed mid-run."""


class ParseAbort(PipelineAbort):
    """A run-level stage exhausted its parse retries."""


_BLANK_LINE = re.compile(r"\n\s*\n")
_TUPLE_RE = re.compile(r"\(\s*(\d+)\s*,\s*(True|False)\s*\)")
_NUM = r"-?\d+(?:\.\d+)?"
_BOX_RE = re.compile(rf"\(\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*,\s*({_NUM})\s*\)")


def parse_comment_list(text: str) -> list[str]:
    """Split on blank lines, trim, drop empties. Never errors."""
    return [seg.strip() for seg in _BLANK_LINE.split(text) if seg.strip()]


def parse_filter_verdicts(text: str, n_items: int) -> list[tuple[int, bool]]:
    """Parse "[(0, True), (1, False)]"; indices must cover 0..n-1 exactly once."""
    if n_items < 0:
        raise ValueError(f"n_items must be >= 0, got {n_items}")
    pairs = [(int(m.group(1)), m.group(2) == "True") for m in _TUPLE_RE.finditer(text)]
    if not pairs and n_items > 0:
        raise FilterSyntaxError(f"no (index, True/False) tuples in {text[:120]!r}")
    indices = sorted(i for i, _ in pairs)
    if indices != list(range(n_items)):
        raise FilterCoverageError(
            f"verdict indices {indices} do not cover 0..{n_items - 1} exactly once"
        )
    return sorted(pairs, key=lambda p: p[0])


def parse_box(text: str, space: GridSpace = DEFAULT_SPACE) -> GridBox:
    """Parse the first (left, top, right, bottom) tuple and validate it."""
    m = _BOX_RE.search(text)
    if not m:
        raise BoxTupleError(f"no bounding box tuple in {text[:120]!r}")
    try:
        box = GridBox(*(float(g) for g in m.groups()))
        validate_in_space(box, space)
    except BoxError as exc:
        raise BoxRangeError(str(exc)) from exc
    return box


@dataclass(frozen=True)
class RefineStep:
    accept: bool
    box: GridBox | None = None


def parse_refine_step(text: str, space: GridSpace = DEFAULT_SPACE) -> RefineStep:
    if text.strip() == BOX_ACCEPT_SENTINEL:
        return RefineStep(accept=True)
    return RefineStep(accept=False, box=parse_box(text, space))


@dataclass(frozen=True)
class TextRefineStep:
    accept: bool
    comment: str | None = None


def parse_text_refine_step(text: str) -> TextRefineStep:
    body = text.strip()
    if body == COMMENT_ACCEPT_SENTINEL:
        return TextRefineStep(accept=True)
    if not body:
        raise EmptyRefinementError("empty refinement reply")
    return TextRefineStep(accept=False, comment=body)


def parse_verdict(text: str) -> ValidationVerdict:
    label = text.strip()
    if label not in VERDICT_BY_LABEL:
        raise VerdictError(f"unrecognized verdict label {label[:80]!r}")
    return VERDICT_BY_LABEL[label]


PARSER_REGISTRY = {
    "comment_list": parse_comment_list,
    "filter_verdicts": parse_filter_verdicts,
    "box": parse_box,
    "refine_step": parse_refine_step,
    "verdict": parse_verdict,
    "text_refine_step": parse_text_refine_step,
}

_REMINDERS = {
    TEXTFILTER: "Reminder: output only a list of tuples like [(0, True), (1, False)] covering every comment index exactly once.",
    BOXGEN: "Reminder: output only the bounding box as (left, top, right, bottom) within the coordinate ranges.",
    BOXREFINE: f"Reminder: output only the updated bounding box as (left, top, right, bottom) or '{BOX_ACCEPT_SENTINEL}'.",
    VALIDATION: "Reminder: output only one of 'Both Correct', 'Incorrect Comment', 'Incorrect Bbox', 'Both Incorrect'.",
    TEXTREFINE: f"Reminder: output only the refined comment or '{COMMENT_ACCEPT_SENTINEL}'.",
}


@dataclass(frozen=True)
class PipelineConfig:
    max_box_refine_iters: int = 5
    max_text_refine_iters: int = 5
    max_validation_cycles: int = 2
    k_textgen: int = 4
    k_textfilter: int = 4
    k_boxgen: int = 3
    k_boxrefine: int = 3
    k_validation: int = 3
    k_textrefine: int = 3
    k_filter_invalid: int = 1
    parse_retry: int = 1
    context_frac: float = 0.25
    max_num_perturb: int = 4
    temperature: float = 0.0
    filtering_on: bool = True
    box_refine_on: bool = True
    validation_on: bool = True
    space: GridSpace = DEFAULT_SPACE
    style: AnnotationStyle = AnnotationStyle()

    def __post_init__(self) -> None:
        for name in (
            "max_box_refine_iters",
            "max_text_refine_iters",
            "max_validation_cycles",
            "k_textgen",
            "k_textfilter",
            "k_boxgen",
            "k_boxrefine",
            "k_validation",
            "k_textrefine",
            "k_filter_invalid",
            "parse_retry",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.context_frac < 0:
            raise ValueError(f"context_frac must be >= 0, got {self.context_frac}")
        if self.max_num_perturb < 1:
            raise ValueError(f"max_num_perturb must be >= 1, got {self.max_num_perturb}")
        if self.temperature < 0:
            raise ValueError(f"temperature must be >= 0, got {self.temperature}")

    def to_json_dict(self) -> dict:
        return {
            "max_box_refine_iters": self.max_box_refine_iters,
            "max_text_refine_iters": self.max_text_refine_iters,
            "max_validation_cycles": self.max_validation_cycles,
            "k_textgen": self.k_textgen,
            "k_textfilter": self.k_textfilter,
            "k_boxgen": self.k_boxgen,
            "k_boxrefine": self.k_boxrefine,
            "k_validation": self.k_validation,
            "k_textrefine": self.k_textrefine,
            "k_filter_invalid": self.k_filter_invalid,
            "parse_retry": self.parse_retry,
            "context_frac": self.context_frac,
            "max_num_perturb": self.max_num_perturb,
            "temperature": self.temperature,
            "filtering_on": self.filtering_on,
            "box_refine_on": self.box_refine_on,
            "validation_on": self.validation_on,
            "space": {"width_units": self.space.width_units, "height_units": self.space.height_units},
        }


def _box_list(box: GridBox) -> list[float]:
    return [box.left, box.top, box.right, box.bottom]


@dataclass
class CritiqueItem:
    """One text item's full journey through the pipeline."""

    item_id: str
    comment: str
    box: GridBox | None = None
    status: str = GENERATED
    discard_reason: str | None = None
    box_trace: list[GridBox] = field(default_factory=list)
    text_trace: list[str] = field(default_factory=list)
    verdicts: list[ValidationVerdict] = field(default_factory=list)
    calls: dict[str, int] = field(default_factory=dict)
    box_trace_truncated: bool = False

    def to_json_dict(self) -> dict:
        return {
            "item_id": self.item_id,
            "comment": self.comment,
            "box": _box_list(self.box) if self.box else None,
            "status": self.status,
            "discard_reason": self.discard_reason,
            "box_trace": [_box_list(b) for b in self.box_trace],
            "box_trace_truncated": self.box_trace_truncated,
            "text_trace": list(self.text_trace),
            "verdicts": [v.label for v in self.verdicts],
            "calls": {s: self.calls.get(s, 0) for s in STAGES if self.calls.get(s, 0)},
        }


@dataclass(frozen=True)
class TranscriptEntry:
    index: int
    stage: str
    item_id: str | None
    request: tuple[dict, ...]
    response: str

    def to_json_dict(self) -> dict:
        return {
            "index": self.index,
            "stage": self.stage,
            "item_id": self.item_id,
            "request": list(self.request),
            "response": self.response,
        }


@dataclass
class PipelineReport:
    task: str
    ground_only: bool
    config: PipelineConfig
    items: list[CritiqueItem]
    stage_calls: dict[str, int]
    transcript: list[TranscriptEntry]

    @property
    def total_calls(self) -> int:
        return sum(self.stage_calls.values())

    def with_status(self, status: str) -> list[CritiqueItem]:
        return [it for it in self.items if it.status == status]

    @property
    def emitted(self) -> list[CritiqueItem]:
        return self.with_status(EMITTED)

    def validate(self) -> None:
        """Conservation, call accounting, and emission gating."""
        terminal = {FILTERED_OUT, EMITTED, DISCARDED}
        for it in self.items:
            if it.status not in terminal:
                raise ReportInvariantError(f"{it.item_id} ended in non-terminal status {it.status!r}")
            if it.status == DISCARDED and not it.discard_reason:
                raise ReportInvariantError(f"{it.item_id} discarded without a reason")
            if it.status == EMITTED:
                if it.box is None:
                    raise ReportInvariantError(f"{it.item_id} emitted without a box")
                if self.config.validation_on and (
                    not it.verdicts or it.verdicts[-1] is not ValidationVerdict.BOTH_CORRECT
                ):
                    raise ReportInvariantError(f"{it.item_id} emitted without a closing Both Correct verdict")
            if it.calls.get(BOXREFINE, 0) > self.config.max_box_refine_iters:
                raise ReportInvariantError(f"{it.item_id} exceeded the box refinement budget")
            if it.calls.get(VALIDATION, 0) > self.config.max_validation_cycles:
                raise ReportInvariantError(f"{it.item_id} exceeded the validation budget")
            if it.calls.get(TEXTREFINE, 0) > self.config.max_text_refine_iters:
                raise ReportInvariantError(f"{it.item_id} exceeded the text refinement budget")
        conserved = sum(len(self.with_status(s)) for s in terminal)
        if conserved != len(self.items):
            raise ReportInvariantError("item conservation violated")
        per_item = {}
        for it in self.items:
            for stage, n in it.calls.items():
                per_item[stage] = per_item.get(stage, 0) + n
        for stage in (BOXGEN, BOXREFINE, VALIDATION, TEXTREFINE):
            if per_item.get(stage, 0) != self.stage_calls.get(stage, 0):
                raise ReportInvariantError(f"stage {stage} call count disagrees with item accounting")
        if self.total_calls != len(self.transcript):
            raise ReportInvariantError(
                f"{self.total_calls} counted calls but {len(self.transcript)} transcript entries"
            )

    def to_json_dict(self) -> dict:
        return {
            "task": self.task,
            "ground_only": self.ground_only,
            "config": self.config.to_json_dict(),
            "stage_calls": {s: self.stage_calls.get(s, 0) for s in STAGES},
            "total_calls": self.total_calls,
            "items": [it.to_json_dict() for it in self.items],
            "transcript": [e.to_json_dict() for e in self.transcript],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)


class _BackendFailure(Exception):
    def __init__(self, stage: str, cause: BackendError):
        super().__init__(f"backend failure during {stage}: {cause}")
        self.stage = stage
        self.cause = cause


_Sink = list[tuple[str, str | None, tuple[dict, ...], str]]


def _describe_parts(parts: Sequence[Part]) -> tuple[dict, ...]:
    out = []
    for p in parts:
        if isinstance(p, TextPart):
            out.append({"type": "text", "text": p.text})
        else:
            out.append(
                {
                    "type": "image",
                    "sha256": hashlib.sha256(p.png_bytes).hexdigest(),
                    "bytes": len(p.png_bytes),
                }
            )
    return tuple(out)


class _Runner:
    """Shared run state: prompt assembly, call logging, per-item grounding."""

    def __init__(
        self,
        image: RasterImage,
        profile: TaskProfile,
        store: ExemplarStore,
        backend,
        cfg: PipelineConfig,
        task_text: str,
        item_backends: Sequence | None,
    ):
        self.image = image
        self.profile = profile
        self.store = store
        self.backend = backend
        self.cfg = cfg
        self.task_text = task_text
        self.item_backends = item_backends
        self.raw_png = image.png_bytes()
        self.axes_png = draw_coordinate_axes(image, cfg.space, cfg.style).png_bytes()

    def call(self, backend, stage: str, item_id: str | None, parts: list[Part], sink: _Sink, counters: dict) -> str:
        req = ChatRequest(parts=tuple(parts), temperature=self.cfg.temperature)
        try:
            resp = backend.chat(req)
        except BackendError as exc:
            raise _BackendFailure(stage, exc) from exc
        sink.append((stage, item_id, _describe_parts(parts), resp.text))
        counters[stage] = counters.get(stage, 0) + 1
        return resp.text

    def parser(self, stage: str):
        name = self.profile.parsers[stage]
        if name not in PARSER_REGISTRY:
            raise ValueError(f"profile names unknown parser {name!r} for stage {stage}")
        return PARSER_REGISTRY[name]

    def patch_png(self, box: GridBox) -> bytes:
        return render_zoom_patch(
            self.image, box, self.cfg.space, self.cfg.style, self.cfg.context_frac
        ).png_bytes()

    # -- per-stage example assembly -------------------------------------

    def textgen_examples(self) -> StageExamples:
        records = select_by_joint_similarity(self.store, self.raw_png, self.task_text, self.cfg.k_textgen)
        blocks = []
        for r in records:
            axes = draw_coordinate_axes(self.store.load_image(r), self.cfg.space, self.cfg.style)
            answer = "\n\n".join(c.text for c in r.comments if c.valid)
            blocks.append(
                ExampleBlock(
                    parts=(TextPart("UI Screenshot:"), ImagePart(axes.png_bytes())), answer=answer
                )
            )
        return StageExamples(stage=TEXTGEN, blocks=tuple(blocks))

    def filter_examples(self, rng: random.Random) -> StageExamples:
        records = select_by_joint_similarity(self.store, self.raw_png, self.task_text, self.cfg.k_textfilter)
        pool = self.store.invalid_comments()
        k_invalid = self.cfg.k_filter_invalid
        if len(pool) < k_invalid:
            pool = pool + self.store.foreign_comments("")
        k_invalid = min(k_invalid, len(pool))
        return build_filter_examples(
            self.store, records, pool, k_invalid, rng, self.cfg.space, self.cfg.style
        )

    def boxgen_examples(self, comment: str) -> StageExamples:
        triples = select_by_text_similarity(self.store, comment, self.cfg.k_boxgen)
        blocks = []
        for text, box, record in triples:
            axes = draw_coordinate_axes(self.store.load_image(record), self.cfg.space, self.cfg.style)
            parts = (
                TextPart(f"Design comment: {text}"),
                TextPart("UI Screenshot:"),
                ImagePart(axes.png_bytes()),
            )
            blocks.append(ExampleBlock(parts=parts, answer=format_box(box)))
        return StageExamples(stage=BOXGEN, blocks=tuple(blocks))

    def boxrefine_examples(self, comment: str, rng: random.Random) -> StageExamples:
        triples = select_by_text_similarity(self.store, comment, self.cfg.k_boxrefine)
        blocks: list[ExampleBlock] = []
        for text, box, record in triples:
            trace = build_box_refine_trace(
                text,
                box,
                self.store.load_image(record),
                PerturbConfig(max_num_perturb=self.cfg.max_num_perturb),
                rng,
                self.cfg.space,
                self.cfg.style,
                self.cfg.context_frac,
            )
            blocks.extend(trace.blocks)
        return StageExamples(stage=BOXREFINE, blocks=tuple(blocks))

    def validation_examples(self, rng: random.Random) -> StageExamples:
        records = select_by_joint_similarity(self.store, self.raw_png, self.task_text, self.cfg.k_validation)
        return build_validation_examples(
            self.store,
            records,
            rng,
            PerturbConfig(max_num_perturb=self.cfg.max_num_perturb),
            self.cfg.space,
            self.cfg.style,
            self.cfg.context_frac,
        )

    def textrefine_examples(self, comment: str) -> StageExamples:
        triples = select_by_text_similarity(self.store, comment, 1)
        if not triples:
            return StageExamples(stage=TEXTREFINE, blocks=())
        target_text, _, record = triples[0]
        pool = [t for t in self.store.invalid_comments() if t != target_text]
        pool += [t for t in self.store.foreign_comments(record.id) if t != target_text and t not in pool]
        steps = min(self.cfg.k_textrefine, len(pool))
        if steps < 1:
            return StageExamples(stage=TEXTREFINE, blocks=())
        return build_text_refine_trace(target_text, pool, steps, self.store.embedder)

    # -- per-item grounding ----------------------------------------------

    def ground_item(self, item: CritiqueItem, seed: int, backend) -> tuple[CritiqueItem, _Sink, _BackendFailure | None]:
        sink: _Sink = []
        rng = random.Random(seed)
        try:
            self._ground_item_inner(item, rng, backend, sink)
        except _BackendFailure as failure:
            return item, sink, failure
        return item, sink, None

    def _attempt_parse(self, backend, stage, item_id, parts, parse, sink, counters, budget_left):
        """Call with up to parse_retry re-asks, bounded by budget_left calls.

        Returns (parsed value or None, last ParseError or None).
        """
        attempts_allowed = min(self.cfg.parse_retry + 1, budget_left)
        req_parts = list(parts)
        last: ParseError | None = None
        for _ in range(attempts_allowed):
            text = self.call(backend, stage, item_id, req_parts, sink, counters)
            try:
                return parse(text), None
            except ParseError as exc:
                last = exc
                req_parts = list(parts) + [TextPart(_REMINDERS[stage])]
        return None, last

    def _ground_item_inner(self, item: CritiqueItem, rng: random.Random, backend, sink: _Sink) -> None:
        cfg = self.cfg
        counters = item.calls

        examples = self.boxgen_examples(item.comment)
        parts = (
            [TextPart(self.profile.instruction(BOXGEN, len(examples.blocks)))]
            + examples.as_parts()
            + [
                TextPart(f"Design comment: {item.comment}"),
                TextPart("UI Screenshot:"),
                ImagePart(self.axes_png),
            ]
        )
        box_parser = self.parser(BOXGEN)
        box, _ = self._attempt_parse(
            backend, BOXGEN, item.item_id, parts,
            lambda t: box_parser(t, cfg.space), sink, counters, cfg.parse_retry + 1,
        )
        if box is None:
            item.status = DISCARDED
            item.discard_reason = REASON_PARSE
            return
        item.box = box
        item.box_trace = [box]
        item.status = GROUNDED

        if cfg.box_refine_on and cfg.max_box_refine_iters > 0:
            refine_examples = self.boxrefine_examples(item.comment, rng)
            if not self._box_refine_loop(item, refine_examples, rng, backend, sink):
                return

        if not cfg.validation_on:
            item.status = EMITTED
            return
        self._validation_loop(item, rng, backend, sink)

    def _box_refine_loop(self, item: CritiqueItem, examples: StageExamples, rng: random.Random, backend, sink: _Sink) -> bool:
        """Iterate refinement until Accept or budget. False only on render failure."""
        cfg = self.cfg
        counters = item.calls
        parse = self.parser(BOXREFINE)
        instruction = TextPart(self.profile.instruction(BOXREFINE, len(examples.blocks)))
        while counters.get(BOXREFINE, 0) < cfg.max_box_refine_iters:
            try:
                patch = self.patch_png(item.box)
            except (ImageError, BoxError):
                item.status = DISCARDED
                item.discard_reason = REASON_RENDER
                return False
            history = " -> ".join(format_box(b) for b in item.box_trace)
            parts = (
                [instruction]
                + examples.as_parts()
                + [
                    TextPart(f"Design comment: {item.comment}"),
                    TextPart("UI Screenshot:"),
                    ImagePart(self.axes_png),
                    TextPart(f"Refinement history: {history}"),
                    TextPart(f"Bounding box candidate: {format_box(item.box)}"),
                    ImagePart(patch),
                ]
            )
            budget_left = cfg.max_box_refine_iters - counters.get(BOXREFINE, 0)
            step, _ = self._attempt_parse(
                backend, BOXREFINE, item.item_id, parts,
                lambda t: parse(t, cfg.space), sink, counters, budget_left,
            )
            if step is None:
                item.box_trace_truncated = True
                return True
            if step.accept:
                return True
            item.box = step.box
            item.box_trace.append(step.box)
        return True

    def _refine_box_once(self, item: CritiqueItem, rng: random.Random, backend, sink: _Sink) -> bool:
        """One routed box refinement call; keeps the old box on parse failure."""
        cfg = self.cfg
        counters = item.calls
        examples = self.boxrefine_examples(item.comment, rng)
        parse = self.parser(BOXREFINE)
        try:
            patch = self.patch_png(item.box)
        except (ImageError, BoxError):
            item.status = DISCARDED
            item.discard_reason = REASON_RENDER
            return False
        history = " -> ".join(format_box(b) for b in item.box_trace)
        parts = (
            [TextPart(self.profile.instruction(BOXREFINE, len(examples.blocks)))]
            + examples.as_parts()
            + [
                TextPart(f"Design comment: {item.comment}"),
                TextPart("UI Screenshot:"),
                ImagePart(self.axes_png),
                TextPart(f"Refinement history: {history}"),
                TextPart(f"Bounding box candidate: {format_box(item.box)}"),
                ImagePart(patch),
            ]
        )
        budget_left = cfg.max_box_refine_iters - counters.get(BOXREFINE, 0)
        step, _ = self._attempt_parse(
            backend, BOXREFINE, item.item_id, parts,
            lambda t: parse(t, cfg.space), sink, counters, budget_left,
        )
        if step is None:
            item.box_trace_truncated = True
        elif not step.accept:
            item.box = step.box
            item.box_trace.append(step.box)
        return True

    def _refine_text_once(self, item: CritiqueItem, backend, sink: _Sink) -> None:
        """One routed comment refinement call; keeps the old text on parse failure."""
        cfg = self.cfg
        counters = item.calls
        examples = self.textrefine_examples(item.comment)
        parse = self.parser(TEXTREFINE)
        try:
            patch = self.patch_png(item.box)
        except (ImageError, BoxError):
            patch = None
        parts = [TextPart(self.profile.instruction(TEXTREFINE, len(examples.blocks)))]
        parts += examples.as_parts()
        parts += [TextPart("UI Screenshot:"), ImagePart(self.axes_png)]
        if patch is not None:
            parts += [TextPart("Zoomed-in Patch:"), ImagePart(patch)]
        parts += [TextPart(f"Design comment candidate: {item.comment}")]
        budget_left = cfg.max_text_refine_iters - counters.get(TEXTREFINE, 0)
        step, _ = self._attempt_parse(
            backend, TEXTREFINE, item.item_id, parts, parse, sink, counters, budget_left,
        )
        if step is not None and not step.accept:
            item.comment = step.comment
            item.text_trace.append(step.comment)

    def _validation_loop(self, item: CritiqueItem, rng: random.Random, backend, sink: _Sink) -> None:
        cfg = self.cfg
        counters = item.calls
        examples = self.validation_examples(rng)
        parse = self.parser(VALIDATION)
        instruction = TextPart(self.profile.instruction(VALIDATION, len(examples.blocks)))
        while True:
            if counters.get(VALIDATION, 0) >= cfg.max_validation_cycles:
                item.status = DISCARDED
                item.discard_reason = REASON_BUDGET
                return
            try:
                patch = self.patch_png(item.box)
            except (ImageError, BoxError):
                item.status = DISCARDED
                item.discard_reason = REASON_RENDER
                return
            parts = (
                [instruction]
                + examples.as_parts()
                + [
                    TextPart("UI Screenshot:"),
                    ImagePart(self.axes_png),
                    TextPart(f"Design Comment: {item.comment}"),
                    TextPart("Zoomed-in Patch:"),
                    ImagePart(patch),
                    TextPart("Label:"),
                ]
            )
            budget_left = cfg.max_validation_cycles - counters.get(VALIDATION, 0)
            verdict, _ = self._attempt_parse(
                backend, VALIDATION, item.item_id, parts, parse, sink, counters, budget_left,
            )
            if verdict is None:
                item.status = DISCARDED
                item.discard_reason = REASON_PARSE
                return
            item.verdicts.append(verdict)
            if verdict is ValidationVerdict.BOTH_CORRECT:
                item.status = EMITTED
                return
            if verdict is ValidationVerdict.BOTH_INCORRECT:
                item.status = DISCARDED
                item.discard_reason = REASON_BOTH_INCORRECT
                return
            # a refinement is pointless when no validation cycle remains to recheck it
            if counters.get(VALIDATION, 0) >= cfg.max_validation_cycles:
                item.status = DISCARDED
                item.discard_reason = REASON_BUDGET
                return
            if verdict is ValidationVerdict.INCORRECT_COMMENT:
                if counters.get(TEXTREFINE, 0) >= cfg.max_text_refine_iters:
                    item.status = DISCARDED
                    item.discard_reason = REASON_BUDGET
                    return
                self._refine_text_once(item, backend, sink)
            else:
                if counters.get(BOXREFINE, 0) >= cfg.max_box_refine_iters:
                    item.status = DISCARDED
                    item.discard_reason = REASON_BUDGET
                    return
                if not self._refine_box_once(item, rng, backend, sink):
                    return


def _finalize(
    runner: _Runner,
    ground_only: bool,
    items: list[CritiqueItem],
    run_sink: _Sink,
    run_counters: dict,
    item_results: list[tuple[CritiqueItem, _Sink, _BackendFailure | None]],
) -> PipelineReport:
    transcript_raw = list(run_sink)
    failure: _BackendFailure | None = None
    for _, sink, fail in item_results:
        transcript_raw.extend(sink)
        if fail is not None and failure is None:
            failure = fail
    stage_calls = dict(run_counters)
    for it, _, _ in item_results:
        for stage, n in it.calls.items():
            stage_calls[stage] = stage_calls.get(stage, 0) + n
    transcript = [
        TranscriptEntry(index=i, stage=s, item_id=iid, request=req, response=resp)
        for i, (s, iid, req, resp) in enumerate(transcript_raw)
    ]
    if failure is not None:
        raise BackendAbort(str(failure), transcript, stage_calls)
    report = PipelineReport(
        task=runner.profile.name,
        ground_only=ground_only,
        config=runner.cfg,
        items=items,
        stage_calls=stage_calls,
        transcript=transcript,
    )
    report.validate()
    return report


def _run_items(
    runner: _Runner, retained: list[CritiqueItem], seeds: list[int], parallel_items: int
) -> list[tuple[CritiqueItem, _Sink, _BackendFailure | None]]:
    if runner.item_backends is not None and len(runner.item_backends) < len(retained):
        raise ValueError(
            f"{len(retained)} items to ground but only {len(runner.item_backends)} item backends"
        )

    def backend_for(i: int):
        return runner.item_backends[i] if runner.item_backends is not None else runner.backend

    if parallel_items <= 1 or len(retained) <= 1:
        return [
            runner.ground_item(item, seed, backend_for(i))
            for i, (item, seed) in enumerate(zip(retained, seeds))
        ]
    with ThreadPoolExecutor(max_workers=parallel_items) as pool:
        futures = [
            pool.submit(runner.ground_item, item, seed, backend_for(i))
            for i, (item, seed) in enumerate(zip(retained, seeds))
        ]
        return [f.result() for f in futures]


def run(
    image: RasterImage,
    profile: TaskProfile,
    store: ExemplarStore,
    backend,
    cfg: PipelineConfig,
    rng: random.Random,
    task_text: str | None = None,
    item_backends: Sequence | None = None,
    parallel_items: int = 1,
) -> PipelineReport:
    """Full pipeline: TextGen, TextFilter, then per-item grounding."""
    runner = _Runner(image, profile, store, backend, cfg, task_text or profile.name, item_backends)
    run_sink: _Sink = []
    run_counters: dict[str, int] = {}
    items: list[CritiqueItem] = []
    item_results: list[tuple[CritiqueItem, _Sink, _BackendFailure | None]] = []
    try:
        examples = runner.textgen_examples()
        parts = (
            [TextPart(profile.instruction(TEXTGEN, len(examples.blocks)))]
            + examples.as_parts()
            + [TextPart("UI Screenshot:"), ImagePart(runner.raw_png)]
        )
        text = runner.call(backend, TEXTGEN, None, parts, run_sink, run_counters)
        comments = runner.parser(TEXTGEN)(text)
        items = [
            CritiqueItem(item_id=f"item{i}", comment=c, text_trace=[c]) for i, c in enumerate(comments)
        ]

        if cfg.filtering_on and items:
            examples = runner.filter_examples(rng)
            listing = "\n".join(f"{i}. {it.comment}" for i, it in enumerate(items))
            parts = (
                [TextPart(profile.instruction(TEXTFILTER, len(examples.blocks)))]
                + examples.as_parts()
                + [
                    TextPart("UI Screenshot:"),
                    ImagePart(runner.raw_png),
                    TextPart("Design comments:\n" + listing),
                ]
            )
            filter_parser = runner.parser(TEXTFILTER)
            verdicts = None
            last_err: ParseError | None = None
            req_parts = list(parts)
            for _ in range(cfg.parse_retry + 1):
                text = runner.call(backend, TEXTFILTER, None, req_parts, run_sink, run_counters)
                try:
                    verdicts = filter_parser(text, len(items))
                    break
                except ParseError as exc:
                    last_err = exc
                    req_parts = list(parts) + [TextPart(_REMINDERS[TEXTFILTER])]
            if verdicts is None:
                raise ParseAbort(
                    f"text filter output unparseable after {cfg.parse_retry + 1} attempts: {last_err}",
                    [
                        TranscriptEntry(index=i, stage=s, item_id=iid, request=req, response=resp)
                        for i, (s, iid, req, resp) in enumerate(run_sink)
                    ],
                    dict(run_counters),
                )
            for idx, ok in verdicts:
                if not ok:
                    items[idx].status = FILTERED_OUT

        retained = [it for it in items if it.status == GENERATED]
        seeds = [rng.getrandbits(64) for _ in retained]
        item_results = _run_items(runner, retained, seeds, parallel_items)
    except _BackendFailure as failure:
        transcript = [
            TranscriptEntry(index=i, stage=s, item_id=iid, request=req, response=resp)
            for i, (s, iid, req, resp) in enumerate(run_sink)
        ]
        raise BackendAbort(str(failure), transcript, dict(run_counters)) from failure
    return _finalize(runner, False, items, run_sink, run_counters, item_results)


def run_ground_only(
    image: RasterImage,
    comment: str,
    profile: TaskProfile,
    store: ExemplarStore,
    backend,
    cfg: PipelineConfig,
    rng: random.Random,
    item_backends: Sequence | None = None,
) -> PipelineReport:
    """Skip TextGen/TextFilter: ground one provided comment."""
    if not comment.strip():
        raise ValueError("ground-only mode needs a nonempty comment")
    runner = _Runner(image, profile, store, backend, cfg, profile.name, item_backends)
    item = CritiqueItem(item_id="item0", comment=comment.strip(), text_trace=[comment.strip()])
    seeds = [rng.getrandbits(64)]
    item_results = _run_items(runner, [item], seeds, parallel_items=1)
    return _finalize(runner, True, [item], [], {}, item_results)
