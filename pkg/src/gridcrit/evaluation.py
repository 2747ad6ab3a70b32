"""Automatic metrics, dataset loaders, and DOM snapping.

Predictions carry no confidence scores, so emission order stands in as the
confidence ranking wherever average precision needs one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

from gridcrit.backends import cosine
from gridcrit.geometry import DEFAULT_SPACE, BoxError, GridBox, GridSpace, iou, validate_in_space


class EvalError(ValueError):
    """Bad metric inputs."""


class SchemaError(EvalError):
    """A dataset file violates its documented schema; names the line."""


def _mean(values: list[float]) -> float | None:
    return sum(values) / len(values) if values else None


# -- critique metrics ------------------------------------------------------


def comment_similarity(preds: list[str], gt: list[str], embedder) -> tuple[list[float], float | None]:
    """Per-prediction max cosine against the ground-truth comments, plus mean."""
    if not gt:
        raise EvalError("comment similarity needs at least one ground-truth comment")
    gt_vecs = [embedder.embed_text(g) for g in gt]
    scores = []
    for pred in preds:
        vec = embedder.embed_text(pred)
        scores.append(max(cosine(vec, g) for g in gt_vecs))
    return scores, _mean(scores)


def estimated_iou(
    preds: list[tuple[str, GridBox]],
    gt: list[tuple[str, GridBox]],
    embedder,
) -> tuple[list[float], float | None]:
    """IoU against the box of the most similar ground-truth comment.

    Similarity ties break toward the lowest ground-truth index.
    """
    if not gt:
        raise EvalError("estimated IoU needs at least one ground-truth comment")
    gt_vecs = [embedder.embed_text(text) for text, _ in gt]
    scores = []
    for text, box in preds:
        vec = embedder.embed_text(text)
        best_idx = max(range(len(gt)), key=lambda j: (cosine(vec, gt_vecs[j]), -j))
        scores.append(iou(box, gt[best_idx][1]))
    return scores, _mean(scores)


def direct_iou(pred_boxes: list[GridBox], gt_boxes: list[GridBox]) -> tuple[list[float], float | None]:
    """Pairwise IoU when predictions line up one-to-one with ground truth."""
    if len(pred_boxes) != len(gt_boxes):
        raise EvalError(f"{len(pred_boxes)} predictions vs {len(gt_boxes)} ground-truth boxes")
    scores = [iou(p, g) for p, g in zip(pred_boxes, gt_boxes)]
    return scores, _mean(scores)


# -- average precision -----------------------------------------------------


def match_and_ap(
    preds: list[tuple[str, GridBox]],
    gts: list[tuple[str, GridBox]],
    iou_threshold: float = 0.5,
) -> float | None:
    """Greedy matching in prediction order, then all-points PR integration.

    Entries are (image_id, box); matching never crosses images. Returns None
    when there is no ground truth (AP undefined).
    """
    if not gts:
        return None
    matched = [False] * len(gts)
    tp = []
    for image_id, box in preds:
        best = None
        for j, (gt_image, gt_box) in enumerate(gts):
            if matched[j] or gt_image != image_id:
                continue
            v = iou(box, gt_box)
            if v >= iou_threshold and (best is None or v > best[0]):
                best = (v, j)
        if best is None:
            tp.append(False)
        else:
            matched[best[1]] = True
            tp.append(True)
    n_gt = len(gts)
    precisions = []
    recalls = []
    hits = 0
    for i, is_tp in enumerate(tp):
        hits += int(is_tp)
        precisions.append(hits / (i + 1))
        recalls.append(hits / n_gt)
    ap = 0.0
    prev_recall = 0.0
    for i, is_tp in enumerate(tp):
        if not is_tp:
            continue
        interp = max(precisions[i:])
        ap += (recalls[i] - prev_recall) * interp
        prev_recall = recalls[i]
    return ap


# -- detection datasets ----------------------------------------------------


@dataclass(frozen=True)
class DetectionObject:
    category: str
    attributes: tuple[str, ...]
    box: GridBox


@dataclass(frozen=True)
class DetectionImageGT:
    image: str
    objects: tuple[DetectionObject, ...]


@dataclass(frozen=True)
class DetectionDataset:
    base_categories: tuple[str, ...]
    novel_categories: tuple[str, ...]
    attributes: tuple[str, ...]
    images: tuple[DetectionImageGT, ...]

    @property
    def categories(self) -> tuple[str, ...]:
        return self.base_categories + self.novel_categories


@dataclass(frozen=True)
class DetectionPrediction:
    image: str
    category: str
    attributes: tuple[str, ...]
    box: GridBox


def map_score(
    preds: list[DetectionPrediction],
    dataset: DetectionDataset,
    mode: str,
    iou_threshold: float = 0.5,
) -> tuple[float, dict[str, float]]:
    """mAP on the 0-100 scale plus per-category AP (0-1) for defined categories.

    mode "ovad" groups by attribute membership, "ovd" by object category.
    Categories without ground truth are excluded from the mean.
    """
    if mode == "ovad":
        keys = dataset.attributes
        pred_has = lambda p, key: key in p.attributes
        gt_has = lambda o, key: key in o.attributes
    elif mode == "ovd":
        keys = dataset.categories
        pred_has = lambda p, key: p.category == key
        gt_has = lambda o, key: o.category == key
    else:
        raise EvalError(f"unknown detection mode {mode!r}")
    if not keys:
        raise EvalError(f"the {mode} vocabulary is empty")
    # emission order within an image, images in name order, is the ranking
    ranked = sorted(enumerate(preds), key=lambda t: (t[1].image, t[0]))
    per_category: dict[str, float] = {}
    for key in keys:
        preds_k = [(p.image, p.box) for _, p in ranked if pred_has(p, key)]
        gts_k = [
            (img.image, o.box) for img in dataset.images for o in img.objects if gt_has(o, key)
        ]
        ap = match_and_ap(preds_k, gts_k, iou_threshold)
        if ap is not None:
            per_category[key] = ap
    if not per_category:
        raise EvalError("no category has ground truth; mAP is undefined")
    return 100.0 * (sum(per_category.values()) / len(per_category)), per_category


# -- DOM snapping ----------------------------------------------------------


def snap_to_dom(box: GridBox, dom_boxes: list[GridBox], min_iou: float = 0.3) -> GridBox:
    """Replace `box` by the best-overlapping DOM rectangle when IoU clears
    the threshold; ties go to the smaller rectangle, then list order."""
    best_key = None
    best_box = None
    for i, dom in enumerate(dom_boxes):
        key = (-iou(box, dom), dom.area, i)
        if best_key is None or key < best_key:
            best_key = key
            best_box = dom
    if best_key is not None and -best_key[0] >= min_iou:
        return best_box
    return box


# -- loaders ---------------------------------------------------------------


@dataclass(frozen=True)
class CritiqueImageGT:
    image: str
    task: str
    comments: tuple[tuple[str, GridBox], ...]


def _load_box(raw, where: str, space: GridSpace) -> GridBox:
    if not isinstance(raw, list) or len(raw) != 4:
        raise SchemaError(f"{where}: box must be [left, top, right, bottom]")
    try:
        box = GridBox(*(float(v) for v in raw))
        validate_in_space(box, space)
    except (BoxError, TypeError, ValueError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc
    return box


def _jsonl_lines(path: str):
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{path}:{lineno}: invalid JSON: {exc}") from exc


def load_critique_dataset(path: str, space: GridSpace = DEFAULT_SPACE) -> list[CritiqueImageGT]:
    """One record per line: {"image", "task"?, "comments": [{"text", "box"}]}."""
    records = []
    for lineno, raw in _jsonl_lines(path):
        where = f"{path}:{lineno}"
        if not isinstance(raw, dict) or "image" not in raw or "comments" not in raw:
            raise SchemaError(f"{where}: record needs 'image' and 'comments'")
        comments = []
        for i, c in enumerate(raw["comments"]):
            if not isinstance(c, dict) or "text" not in c or "box" not in c:
                raise SchemaError(f"{where}: comment {i} needs 'text' and 'box'")
            if not isinstance(c["text"], str) or not c["text"].strip():
                raise SchemaError(f"{where}: comment {i} text must be a nonempty string")
            comments.append((c["text"], _load_box(c["box"], f"{where}: comment {i}", space)))
        records.append(
            CritiqueImageGT(image=raw["image"], task=raw.get("task", ""), comments=tuple(comments))
        )
    return records


def load_detection_dataset(path: str, space: GridSpace = DEFAULT_SPACE) -> DetectionDataset:
    """Header line with vocabularies, then {"image", "objects": [...]} records."""
    header = None
    images = []
    for lineno, raw in _jsonl_lines(path):
        where = f"{path}:{lineno}"
        if header is None:
            for key in ("base_categories", "novel_categories", "attributes"):
                if key not in raw:
                    raise SchemaError(f"{where}: header needs {key!r}")
            header = raw
            continue
        if "image" not in raw or "objects" not in raw:
            raise SchemaError(f"{where}: record needs 'image' and 'objects'")
        vocab = set(header["base_categories"]) | set(header["novel_categories"])
        attr_vocab = set(header["attributes"])
        objects = []
        for i, o in enumerate(raw["objects"]):
            if "category" not in o or "box" not in o:
                raise SchemaError(f"{where}: object {i} needs 'category' and 'box'")
            if o["category"] not in vocab:
                raise SchemaError(f"{where}: object {i} category {o['category']!r} not in vocabulary")
            attrs = tuple(o.get("attributes", []))
            unknown = [a for a in attrs if a not in attr_vocab]
            if unknown:
                raise SchemaError(f"{where}: object {i} attributes not in vocabulary: {unknown}")
            objects.append(
                DetectionObject(
                    category=o["category"],
                    attributes=attrs,
                    box=_load_box(o["box"], f"{where}: object {i}", space),
                )
            )
        images.append(DetectionImageGT(image=raw["image"], objects=tuple(objects)))
    if header is None:
        return DetectionDataset((), (), (), ())
    return DetectionDataset(
        base_categories=tuple(header["base_categories"]),
        novel_categories=tuple(header["novel_categories"]),
        attributes=tuple(header["attributes"]),
        images=tuple(images),
    )


def load_detection_predictions(path: str, space: GridSpace = DEFAULT_SPACE) -> list[DetectionPrediction]:
    """{"image", "objects": [{"category", "attributes"?, "box"}]} per line, in rank order."""
    preds = []
    for lineno, raw in _jsonl_lines(path):
        where = f"{path}:{lineno}"
        if "image" not in raw or "objects" not in raw:
            raise SchemaError(f"{where}: record needs 'image' and 'objects'")
        for i, o in enumerate(raw["objects"]):
            if "category" not in o or "box" not in o:
                raise SchemaError(f"{where}: object {i} needs 'category' and 'box'")
            preds.append(
                DetectionPrediction(
                    image=raw["image"],
                    category=o["category"],
                    attributes=tuple(o.get("attributes", [])),
                    box=_load_box(o["box"], f"{where}: object {i}", space),
                )
            )
    return preds


def _flatten_dom_node(node, where: str, width: float, height: float, space: GridSpace, out: list[GridBox]) -> None:
    if not isinstance(node, dict) or "bounds" not in node:
        raise SchemaError(f"{where}: DOM node needs 'bounds'")
    raw = node["bounds"]
    if not isinstance(raw, list) or len(raw) != 4:
        raise SchemaError(f"{where}: bounds must be [left, top, right, bottom] in pixels")
    left, top, right, bottom = (float(v) for v in raw)
    if right < left or bottom < top:
        raise SchemaError(f"{where}: reversed bounds {raw}")
    # clamp overflowing elements to the viewport, drop the degenerate ones
    left = min(max(left, 0.0), width)
    right = min(max(right, 0.0), width)
    top = min(max(top, 0.0), height)
    bottom = min(max(bottom, 0.0), height)
    if right > left and bottom > top:
        out.append(
            GridBox(
                left * space.width_units / width,
                top * space.height_units / height,
                right * space.width_units / width,
                bottom * space.height_units / height,
            )
        )
    for child in node.get("children", []):
        _flatten_dom_node(child, where, width, height, space, out)


def load_dom(path: str, space: GridSpace = DEFAULT_SPACE) -> list[GridBox]:
    """Header {"width", "height"} in pixels, then one element tree per line.

    Bounds flatten recursively into grid-space boxes; zero-area elements are
    skipped.
    """
    header = None
    boxes: list[GridBox] = []
    for lineno, raw in _jsonl_lines(path):
        where = f"{path}:{lineno}"
        if header is None:
            if "width" not in raw or "height" not in raw:
                raise SchemaError(f"{where}: header needs 'width' and 'height'")
            if raw["width"] <= 0 or raw["height"] <= 0:
                raise SchemaError(f"{where}: viewport must be positive")
            header = (float(raw["width"]), float(raw["height"]))
            continue
        _flatten_dom_node(raw, where, header[0], header[1], space, boxes)
    return boxes


# -- report ----------------------------------------------------------------


@dataclass
class EvalReport:
    mode: str
    n_predictions: int
    n_ground_truth: int
    comment_similarity: float | None = None
    estimated_iou: float | None = None
    direct_iou: float | None = None
    map_value: float | None = None
    per_category_ap: dict[str, float] | None = None

    def to_json_dict(self) -> dict:
        return {
            "mode": self.mode,
            "n_predictions": self.n_predictions,
            "n_ground_truth": self.n_ground_truth,
            "comment_similarity": self.comment_similarity,
            "estimated_iou": self.estimated_iou,
            "direct_iou": self.direct_iou,
            "map": self.map_value,
            "per_category_ap": self.per_category_ap,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), indent=2, sort_keys=True)

    def to_text_table(self) -> str:
        rows = [
            ("mode", self.mode),
            ("predictions", str(self.n_predictions)),
            ("ground truth", str(self.n_ground_truth)),
        ]
        for label, value in (
            ("comment similarity", self.comment_similarity),
            ("estimated iou", self.estimated_iou),
            ("direct iou", self.direct_iou),
            ("map", self.map_value),
        ):
            if value is not None:
                rows.append((label, f"{value:.4f}"))
        width = max(len(label) for label, _ in rows)
        lines = [f"{label.ljust(width)}  {value}" for label, value in rows]
        if self.per_category_ap:
            lines.append("")
            lines.append("per-category AP")
            cat_width = max(len(c) for c in self.per_category_ap)
            for category in sorted(self.per_category_ap):
                lines.append(f"  {category.ljust(cat_width)}  {self.per_category_ap[category]:.4f}")
        return "\n".join(lines) + "\n"


def evaluate_critique(
    preds: list[CritiqueImageGT], dataset: list[CritiqueImageGT], embedder
) -> EvalReport:
    """Comment similarity and estimated IoU of predictions against a dataset.

    Both sides share the critique record shape; predictions are matched to
    ground truth by image name.
    """
    gt_by_image = {r.image: r for r in dataset}
    sim_scores: list[float] = []
    iou_scores: list[float] = []
    n_preds = 0
    for record in preds:
        if record.image not in gt_by_image:
            raise EvalError(f"prediction references unknown image {record.image!r}")
        gt = gt_by_image[record.image]
        texts = [t for t, _ in record.comments]
        n_preds += len(texts)
        if not texts:
            continue
        scores, _ = comment_similarity(texts, [t for t, _ in gt.comments], embedder)
        sim_scores.extend(scores)
        per_box, _ = estimated_iou(list(record.comments), list(gt.comments), embedder)
        iou_scores.extend(per_box)
    n_gt = sum(len(r.comments) for r in dataset)
    return EvalReport(
        mode="critique",
        n_predictions=n_preds,
        n_ground_truth=n_gt,
        comment_similarity=_mean(sim_scores),
        estimated_iou=_mean(iou_scores),
    )


def evaluate_detection(
    preds: list[DetectionPrediction], dataset: DetectionDataset, mode: str, iou_threshold: float = 0.5
) -> EvalReport:
    value, per_category = map_score(preds, dataset, mode, iou_threshold)
    n_gt = sum(len(img.objects) for img in dataset.images)
    return EvalReport(
        mode=mode,
        n_predictions=len(preds),
        n_ground_truth=n_gt,
        map_value=value,
        per_category_ap=per_category,
    )
