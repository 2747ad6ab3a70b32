"""Command line entry points.

Exit codes: 0 success, 2 flag/config/schema error, 3 backend failure,
4 parse-budget exhaustion. Credentials are never read from flags or files;
the HTTP backend takes them from the environment variable named by
--credential-env.
"""

from __future__ import annotations

import argparse
import json
import os
import random
import sys

from gridcrit.backends import (
    BackendConfig,
    BackendError,
    HashEmbedder,
    HttpChatBackend,
    ScriptedBackend,
    load_embedding_table,
)
from gridcrit.evaluation import (
    EvalError,
    EvalReport,
    evaluate_critique,
    evaluate_detection,
    load_critique_dataset,
    load_detection_dataset,
    load_detection_predictions,
    load_dom,
    snap_to_dom,
)
from gridcrit.fewshot import ExemplarStore, FewshotError
from gridcrit.geometry import BoxError, DEFAULT_SPACE, GridBox, validate_in_space
from gridcrit.imaging import (
    AnnotationStyle,
    ImageError,
    RasterImage,
    draw_coordinate_axes,
    draw_result_boxes,
    render_zoom_patch,
)
from gridcrit.orchestrator import (
    BackendAbort,
    ParseAbort,
    PipelineConfig,
    run,
    run_ground_only,
)
from gridcrit.profiles import PROFILE_FACTORIES, TemplateError


class CliError(ValueError):
    """A flag or config problem; reported on stderr with exit code 2."""


_CONFIG_TYPES = {
    "max_box_refine_iters": int,
    "max_text_refine_iters": int,
    "max_validation_cycles": int,
    "k_textgen": int,
    "k_textfilter": int,
    "k_boxgen": int,
    "k_boxrefine": int,
    "k_validation": int,
    "k_textrefine": int,
    "k_filter_invalid": int,
    "parse_retry": int,
    "context_frac": float,
    "max_num_perturb": int,
    "temperature": float,
    "filtering_on": bool,
    "box_refine_on": bool,
    "validation_on": bool,
    "seed": int,
    "parallel_items": int,
}

_TRUE = {"true", "yes", "1", "on"}
_FALSE = {"false", "no", "0", "off"}


def load_config_file(path: str) -> dict:
    """Flat `key = value` lines; # starts a comment; keys are typed."""
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, _, value = (s.strip() for s in line.partition("="))
            if key not in _CONFIG_TYPES:
                raise CliError(f"{path}:{lineno}: unknown config key {key!r}")
            kind = _CONFIG_TYPES[key]
            try:
                if kind is bool:
                    lowered = value.lower()
                    if lowered in _TRUE:
                        values[key] = True
                    elif lowered in _FALSE:
                        values[key] = False
                    else:
                        raise ValueError(f"not a boolean: {value!r}")
                else:
                    values[key] = kind(value)
            except ValueError as exc:
                raise CliError(f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return values


def _resolve_guidelines(value: str) -> str:
    """A path to a text file, or the literal text itself."""
    if value and os.path.isfile(value):
        with open(value) as fh:
            return fh.read()
    return value


def _parse_box_flag(spec: str) -> GridBox:
    parts = spec.split(",")
    if len(parts) != 4:
        raise CliError(f"--box expects 'left,top,right,bottom', got {spec!r}")
    try:
        box = GridBox(*(float(p) for p in parts))
        validate_in_space(box, DEFAULT_SPACE)
    except (ValueError, BoxError) as exc:
        raise CliError(f"invalid --box {spec!r}: {exc}") from exc
    return box


def _write_json(path: str, payload) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(payload, indent=2, sort_keys=True))
        fh.write("\n")


def _build_backend(args) -> tuple[object, dict]:
    if args.backend == "scripted":
        if not args.transcript:
            raise CliError("--backend scripted requires --transcript")
        try:
            backend = ScriptedBackend.from_file(args.transcript)
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        descriptor = {"type": "scripted", "transcript": args.transcript}
    else:
        if not args.endpoint or not args.model:
            raise CliError("--backend http requires --endpoint and --model")
        try:
            cfg = BackendConfig(
                endpoint=args.endpoint,
                model=args.model,
                credential_env=args.credential_env,
                timeout_s=args.timeout,
                max_retries=args.max_retries,
            )
        except ValueError as exc:
            raise CliError(str(exc)) from exc
        backend = HttpChatBackend(cfg)
        descriptor = {
            "type": "http",
            "endpoint": args.endpoint,
            "model": args.model,
            "credential_env": args.credential_env,
            "timeout_s": args.timeout,
            "max_retries": args.max_retries,
        }
    return backend, descriptor


def cmd_critique(args) -> int:
    config_values = load_config_file(args.config) if args.config else {}
    seed = args.seed if args.seed is not None else config_values.pop("seed", 0)
    parallel = (
        args.parallel_items
        if args.parallel_items is not None
        else config_values.pop("parallel_items", 1)
    )
    config_values.pop("seed", None)
    config_values.pop("parallel_items", None)
    if args.no_filter:
        config_values["filtering_on"] = False
    if args.no_box_refine:
        config_values["box_refine_on"] = False
    if args.no_validation:
        config_values["validation_on"] = False
    try:
        cfg = PipelineConfig(**config_values)
    except (TypeError, ValueError) as exc:
        raise CliError(f"bad pipeline config: {exc}") from exc

    if args.ground_only and not args.comment:
        raise CliError("--ground-only requires --comment")
    if args.comment and not args.ground_only:
        raise CliError("--comment only makes sense with --ground-only")
    if args.task_profile not in PROFILE_FACTORIES:
        raise CliError(f"unknown task profile {args.task_profile!r}")

    guidelines = _resolve_guidelines(args.guidelines)
    profile = PROFILE_FACTORIES[args.task_profile](guidelines=guidelines)
    image = RasterImage.load(args.image)
    vectors = None
    if args.embedding_table:
        try:
            vectors = load_embedding_table(args.embedding_table)
        except BackendError as exc:
            raise CliError(str(exc)) from exc
    store = ExemplarStore.from_jsonl(args.fewshot_db, HashEmbedder(), vectors=vectors)
    backend, backend_descriptor = _build_backend(args)

    os.makedirs(args.out_dir, exist_ok=True)
    manifest = {
        "command": "critique",
        "image": args.image,
        "fewshot_db": args.fewshot_db,
        "embedding_table": args.embedding_table,
        "task_profile": args.task_profile,
        "guidelines": guidelines,
        "backend": backend_descriptor,
        "seed": seed,
        "parallel_items": parallel,
        "ground_only": args.ground_only,
        "comment": args.comment,
        "config_file": args.config,
        "config": cfg.to_json_dict(),
    }
    _write_json(os.path.join(args.out_dir, "manifest.json"), manifest)

    rng = random.Random(seed)
    try:
        if args.ground_only:
            report = run_ground_only(image, args.comment, profile, store, backend, cfg, rng)
        else:
            report = run(
                image, profile, store, backend, cfg, rng, parallel_items=parallel
            )
    except (ParseAbort, BackendAbort) as exc:
        _write_json(
            os.path.join(args.out_dir, "transcripts.json"),
            [e.to_json_dict() for e in exc.transcript],
        )
        print(f"error: {exc}", file=sys.stderr)
        return 4 if isinstance(exc, ParseAbort) else 3

    _write_json(os.path.join(args.out_dir, "report.json"), report.to_json_dict())
    _write_json(
        os.path.join(args.out_dir, "transcripts.json"),
        [e.to_json_dict() for e in report.transcript],
    )
    annotated = draw_result_boxes(
        draw_coordinate_axes(image, cfg.space, cfg.style),
        [item.box for item in report.emitted],
        cfg.style,
        cfg.space,
    )
    annotated.save(os.path.join(args.out_dir, "annotated.png"))

    counts = {s: n for s, n in sorted(report.stage_calls.items()) if n}
    print(
        f"emitted {len(report.emitted)} of {len(report.items)} items "
        f"in {report.total_calls} calls"
    )
    print("stage calls: " + ", ".join(f"{s}={n}" for s, n in counts.items()))
    print(f"wrote {args.out_dir}/report.json")
    return 0


_METRIC_FIELDS = {
    "similarity": "comment_similarity",
    "estimated-iou": "estimated_iou",
    "direct-iou": "direct_iou",
    "map": "map_value",
}


def cmd_evaluate(args) -> int:
    if args.mode == "critique":
        preds = load_critique_dataset(args.pred)
        dataset = load_critique_dataset(args.dataset)
        report = evaluate_critique(preds, dataset, HashEmbedder())
    else:
        preds = load_detection_predictions(args.pred)
        dataset = load_detection_dataset(args.dataset)
        report = evaluate_detection(preds, dataset, args.mode, args.iou_threshold)

    if args.metrics != "all":
        requested = [m.strip() for m in args.metrics.split(",") if m.strip()]
        unknown = [m for m in requested if m not in _METRIC_FIELDS]
        if unknown:
            raise CliError(f"unknown metrics: {', '.join(unknown)}")
        keep = {_METRIC_FIELDS[m] for m in requested}
        for field in set(_METRIC_FIELDS.values()) - keep:
            setattr(report, field, None)
        if "map_value" not in keep:
            report.per_category_ap = None

    sys.stdout.write(report.to_text_table())
    if args.out:
        _write_json(args.out, report.to_json_dict())
        print(f"wrote {args.out}")
    return 0


def cmd_render(args) -> int:
    image = RasterImage.load(args.image)
    style = AnnotationStyle()
    if args.mode == "axes":
        out = draw_coordinate_axes(image, DEFAULT_SPACE, style)
    else:
        if not args.box:
            raise CliError("--mode patch requires --box")
        box = _parse_box_flag(args.box)
        out = render_zoom_patch(image, box, DEFAULT_SPACE, style, args.context_frac)
    out.save(args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_snap(args) -> int:
    records = load_critique_dataset(args.pred)
    dom_boxes = load_dom(args.dom)
    snapped = 0
    total = 0
    out_lines = []
    for record in records:
        comments = []
        for text, box in record.comments:
            total += 1
            new_box = snap_to_dom(box, dom_boxes, args.min_iou)
            if new_box != box:
                snapped += 1
            comments.append(
                {"text": text, "box": [new_box.left, new_box.top, new_box.right, new_box.bottom]}
            )
        out_lines.append(
            json.dumps({"image": record.image, "task": record.task, "comments": comments})
        )
    with open(args.out, "w") as fh:
        fh.write("\n".join(out_lines))
        if out_lines:
            fh.write("\n")
    print(f"snapped {snapped} of {total} boxes")
    print(f"wrote {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gridcrit", description="Grounded UI critique pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    critique = sub.add_parser("critique", help="run the critique pipeline on a screenshot")
    critique.add_argument("--image", required=True, help="input screenshot PNG")
    critique.add_argument("--fewshot-db", required=True, help="exemplar store JSONL")
    critique.add_argument("--embedding-table", help="optional precomputed vector table JSON")
    critique.add_argument(
        "--task-profile", default="design-critique", help="task profile name"
    )
    critique.add_argument(
        "--guidelines", default="", help="guidelines text, or a path to a text file"
    )
    critique.add_argument("--backend", choices=("scripted", "http"), required=True)
    critique.add_argument("--transcript", help="scripted backend reply file (JSON)")
    critique.add_argument("--endpoint", help="http backend endpoint URL")
    critique.add_argument("--model", help="http backend model name")
    critique.add_argument("--timeout", type=float, default=120.0, help="http timeout seconds")
    critique.add_argument("--max-retries", type=int, default=2, help="http transport retries")
    critique.add_argument(
        "--credential-env",
        default="LLM_API_KEY",
        help="environment variable holding the API key",
    )
    critique.add_argument("--config", help="flat key = value config file")
    critique.add_argument("--seed", type=int, help="run seed (default 0)")
    critique.add_argument("--out-dir", required=True, help="run directory to write")
    critique.add_argument("--no-filter", action="store_true", help="disable the text filter stage")
    critique.add_argument(
        "--no-box-refine", action="store_true", help="disable the box refinement loop"
    )
    critique.add_argument("--no-validation", action="store_true", help="disable validation routing")
    critique.add_argument("--ground-only", action="store_true", help="ground one given comment")
    critique.add_argument("--comment", help="comment text for --ground-only")
    critique.add_argument("--parallel-items", type=int, help="concurrent item grounding")
    critique.set_defaults(func=cmd_critique)

    evaluate = sub.add_parser("evaluate", help="score predictions against a dataset")
    evaluate.add_argument("--pred", required=True, help="prediction JSONL")
    evaluate.add_argument("--dataset", required=True, help="ground-truth dataset JSONL")
    evaluate.add_argument("--mode", choices=("critique", "ovad", "ovd"), required=True)
    evaluate.add_argument(
        "--metrics", default="all", help="comma list: similarity, estimated-iou, direct-iou, map"
    )
    evaluate.add_argument("--iou-threshold", type=float, default=0.5)
    evaluate.add_argument("--out", help="also write the report JSON here")
    evaluate.set_defaults(func=cmd_evaluate)

    render = sub.add_parser("render", help="write an axis overlay or zoom patch PNG")
    render.add_argument("--image", required=True)
    render.add_argument("--mode", choices=("axes", "patch"), required=True)
    render.add_argument("--box", help="left,top,right,bottom in grid units (patch mode)")
    render.add_argument("--context-frac", type=float, default=0.25)
    render.add_argument("--out", required=True)
    render.set_defaults(func=cmd_render)

    snap = sub.add_parser("snap", help="snap predicted boxes to DOM rectangles")
    snap.add_argument("--pred", required=True, help="critique prediction JSONL")
    snap.add_argument("--dom", required=True, help="DOM hierarchy JSONL")
    snap.add_argument("--min-iou", type=float, default=0.3)
    snap.add_argument("--out", required=True)
    snap.set_defaults(func=cmd_snap)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (CliError, EvalError, FewshotError, TemplateError, BoxError, ImageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackendError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
