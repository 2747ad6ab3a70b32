"""CLI subcommands: exit codes, run directory contents, determinism."""

import json
from pathlib import Path

import pytest

from gridcrit.cli import CliError, load_config_file, main
from gridcrit.evaluation import load_critique_dataset
from gridcrit.geometry import GridBox, iou
from gridcrit.imaging import RasterImage, rgba_checksum

FIXTURES = Path(__file__).parent / "fixtures"
IMAGE = str(FIXTURES / "screen_90x160.png")
DB = str(FIXTURES / "fewshot_store.jsonl")
CANONICAL = str(FIXTURES / "cli_canonical.json")

GOLDEN = json.loads((FIXTURES / "golden_checksums.json").read_text())


def write_json(path, payload):
    path.write_text(json.dumps(payload))
    return str(path)


def critique_args(out_dir, transcript=CANONICAL, *extra):
    return [
        "critique",
        "--image", IMAGE,
        "--fewshot-db", DB,
        "--backend", "scripted",
        "--transcript", transcript,
        "--out-dir", str(out_dir),
        *extra,
    ]


class TestConfigFile:
    def test_types_and_comments(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text(
            "# header comment\n"
            "max_box_refine_iters = 3\n"
            "context_frac = 0.5   # trailing comment\n"
            "filtering_on = false\n"
            "validation_on = TRUE\n"
            "seed = 9\n"
            "\n"
        )
        got = load_config_file(str(cfg))
        assert got == {
            "max_box_refine_iters": 3,
            "context_frac": 0.5,
            "filtering_on": False,
            "validation_on": True,
            "seed": 9,
        }

    def test_unknown_key(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus = 1\n")
        with pytest.raises(CliError, match="unknown config key"):
            load_config_file(str(cfg))

    def test_bad_value(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("parse_retry = often\n")
        with pytest.raises(CliError, match="run.cfg:1"):
            load_config_file(str(cfg))

    def test_bad_boolean(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("filtering_on = maybe\n")
        with pytest.raises(CliError, match="boolean"):
            load_config_file(str(cfg))

    def test_missing_equals(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("just words\n")
        with pytest.raises(CliError, match="expected 'key = value'"):
            load_config_file(str(cfg))

    def test_empty_and_comment_only(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("\n# nothing here\n")
        assert load_config_file(str(cfg)) == {}


class TestCritique:
    def test_canonical_run(self, tmp_path, capsys):
        out = tmp_path / "run"
        assert main(critique_args(out, CANONICAL, "--seed", "7")) == 0
        stdout = capsys.readouterr().out
        assert "emitted 2 of 2 items in 8 calls" in stdout

        report = json.loads((out / "report.json").read_text())
        assert [i["status"] for i in report["items"]] == ["emitted", "emitted"]
        assert report["ground_only"] is False
        transcript = json.loads((out / "transcripts.json").read_text())
        assert len(transcript) == 8
        assert transcript[0]["stage"] == "textgen"
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 7
        assert manifest["backend"]["type"] == "scripted"
        assert (out / "annotated.png").exists()

    def test_rerun_is_byte_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        assert main(critique_args(a, CANONICAL, "--seed", "7")) == 0
        assert main(critique_args(b, CANONICAL, "--seed", "7")) == 0
        for name in ("manifest.json", "report.json", "transcripts.json", "annotated.png"):
            assert (a / name).read_bytes() == (b / name).read_bytes(), name

    def test_config_file_feeds_run(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("validation_on = false\nmax_box_refine_iters = 2\nseed = 11\n")
        transcript = write_json(
            tmp_path / "t.json",
            [
                {"text": "Comment one.\n\nComment two."},
                {"text": "(0, True)\n(1, False)"},
                {"text": "(1, 2, 4, 5)"},
                {"text": "BOUNDING BOX IS ACCURATE, PLEASE TERMINATE"},
            ],
        )
        out = tmp_path / "run"
        assert main(critique_args(out, transcript, "--config", str(cfg))) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["seed"] == 11
        assert manifest["config"]["validation_on"] is False
        assert manifest["config"]["max_box_refine_iters"] == 2

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("seed = 11\nvalidation_on = false\nbox_refine_on = false\n")
        transcript = write_json(
            tmp_path / "t.json",
            [
                {"text": "Comment one."},
                {"text": "(0, True)"},
                {"text": "(1, 2, 4, 5)"},
            ],
        )
        out = tmp_path / "run"
        args = critique_args(out, transcript, "--config", str(cfg), "--seed", "3")
        assert main(args) == 0
        assert json.loads((out / "manifest.json").read_text())["seed"] == 3

    def test_ablation_flags_reach_config(self, tmp_path):
        transcript = write_json(
            tmp_path / "t.json",
            [{"text": "Comment one."}, {"text": "(1, 2, 4, 5)"}],
        )
        out = tmp_path / "run"
        args = critique_args(
            out, transcript, "--no-filter", "--no-box-refine", "--no-validation"
        )
        assert main(args) == 0
        cfg = json.loads((out / "manifest.json").read_text())["config"]
        assert cfg["filtering_on"] is False
        assert cfg["box_refine_on"] is False
        assert cfg["validation_on"] is False
        report = json.loads((out / "report.json").read_text())
        nonzero = {k: v for k, v in report["stage_calls"].items() if v}
        assert nonzero == {"textgen": 1, "boxgen": 1}

    def test_ground_only(self, tmp_path, capsys):
        transcript = write_json(
            tmp_path / "t.json",
            [
                {"text": "(1, 2, 4, 5)", "expect": "misaligned"},
                {"text": "BOUNDING BOX IS ACCURATE, PLEASE TERMINATE"},
                {"text": "Both Correct"},
            ],
        )
        out = tmp_path / "run"
        args = critique_args(
            out, transcript, "--ground-only", "--comment", "The avatar is misaligned."
        )
        assert main(args) == 0
        assert "emitted 1 of 1 items in 3 calls" in capsys.readouterr().out
        report = json.loads((out / "report.json").read_text())
        assert report["ground_only"] is True
        assert report["stage_calls"]["textgen"] == 0
        assert report["stage_calls"]["textfilter"] == 0

    def test_guidelines_file_is_inlined(self, tmp_path):
        guide = tmp_path / "guide.txt"
        guide.write_text("Favor grouping over decoration.")
        out = tmp_path / "run"
        args = critique_args(out, CANONICAL, "--guidelines", str(guide), "--seed", "7")
        assert main(args) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["guidelines"] == "Favor grouping over decoration."

    def test_comment_without_ground_only(self, tmp_path, capsys):
        assert main(critique_args(tmp_path / "r", CANONICAL, "--comment", "x")) == 2
        assert "--ground-only" in capsys.readouterr().err

    def test_ground_only_without_comment(self, tmp_path, capsys):
        assert main(critique_args(tmp_path / "r", CANONICAL, "--ground-only")) == 2
        assert "--comment" in capsys.readouterr().err

    def test_scripted_needs_transcript(self, tmp_path, capsys):
        args = [
            "critique", "--image", IMAGE, "--fewshot-db", DB,
            "--backend", "scripted", "--out-dir", str(tmp_path / "r"),
        ]
        assert main(args) == 2
        assert "--transcript" in capsys.readouterr().err

    def test_http_needs_endpoint_and_model(self, tmp_path, capsys):
        args = [
            "critique", "--image", IMAGE, "--fewshot-db", DB,
            "--backend", "http", "--out-dir", str(tmp_path / "r"),
        ]
        assert main(args) == 2
        assert "--endpoint" in capsys.readouterr().err

    def test_unknown_profile(self, tmp_path, capsys):
        args = critique_args(tmp_path / "r", CANONICAL, "--task-profile", "nope")
        assert main(args) == 2
        assert "task profile" in capsys.readouterr().err

    def test_missing_image(self, tmp_path, capsys):
        args = [
            "critique", "--image", str(tmp_path / "absent.png"), "--fewshot-db", DB,
            "--backend", "scripted", "--transcript", CANONICAL,
            "--out-dir", str(tmp_path / "r"),
        ]
        assert main(args) == 2
        capsys.readouterr()

    def test_malformed_transcript_file(self, tmp_path, capsys):
        bad = tmp_path / "t.json"
        bad.write_text('{"not": "a list"}')
        assert main(critique_args(tmp_path / "r", str(bad))) == 2
        assert "JSON array" in capsys.readouterr().err

    def test_bad_embedding_table(self, tmp_path, capsys):
        table = tmp_path / "vectors.json"
        table.write_text("[1, 2, 3]")
        args = critique_args(tmp_path / "r", CANONICAL, "--embedding-table", str(table))
        assert main(args) == 2
        assert "JSON object" in capsys.readouterr().err

    def test_exhausted_transcript_exits_3(self, tmp_path, capsys):
        transcript = write_json(tmp_path / "t.json", [{"text": "Only one comment."}])
        out = tmp_path / "run"
        assert main(critique_args(out, transcript)) == 3
        assert "backend failure" in capsys.readouterr().err
        # partial artifacts are still written, minus the report
        assert (out / "manifest.json").exists()
        stages = [e["stage"] for e in json.loads((out / "transcripts.json").read_text())]
        assert stages == ["textgen"]
        assert not (out / "report.json").exists()

    def test_expect_mismatch_exits_3(self, tmp_path, capsys):
        transcript = write_json(
            tmp_path / "t.json", [{"text": "A comment.", "expect": "never in the prompt"}]
        )
        assert main(critique_args(tmp_path / "r", transcript)) == 3
        assert "expected request text" in capsys.readouterr().err

    def test_filter_parse_exhaustion_exits_4(self, tmp_path, capsys):
        transcript = write_json(
            tmp_path / "t.json",
            [
                {"text": "A comment.\n\nAnother comment."},
                {"text": "not a verdict"},
                {"text": "still not a verdict"},
            ],
        )
        out = tmp_path / "run"
        assert main(critique_args(out, transcript)) == 4
        assert "unparseable" in capsys.readouterr().err
        stages = [e["stage"] for e in json.loads((out / "transcripts.json").read_text())]
        assert stages == ["textgen", "textfilter", "textfilter"]

    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("bogus = 1\n")
        assert main(critique_args(tmp_path / "r", CANONICAL, "--config", str(cfg))) == 2
        assert "unknown config key" in capsys.readouterr().err


class TestRender:
    def test_axes_matches_golden(self, tmp_path):
        out = tmp_path / "axes.png"
        args = ["render", "--image", IMAGE, "--mode", "axes", "--out", str(out)]
        assert main(args) == 0
        assert rgba_checksum(RasterImage.load(str(out))) == GOLDEN["axes_90x160"]["checksum"]

    def test_patch_matches_golden(self, tmp_path):
        out = tmp_path / "patch.png"
        args = [
            "render", "--image", IMAGE, "--mode", "patch",
            "--box", "3,4,6,8", "--out", str(out),
        ]
        assert main(args) == 0
        assert rgba_checksum(RasterImage.load(str(out))) == GOLDEN["zoom_90x160"]["checksum"]

    def test_reversed_box(self, tmp_path, capsys):
        args = [
            "render", "--image", IMAGE, "--mode", "patch",
            "--box", "3,9,1,2", "--out", str(tmp_path / "x.png"),
        ]
        assert main(args) == 2
        assert "left < right" in capsys.readouterr().err

    def test_box_wrong_arity(self, tmp_path, capsys):
        args = [
            "render", "--image", IMAGE, "--mode", "patch",
            "--box", "1,2,3", "--out", str(tmp_path / "x.png"),
        ]
        assert main(args) == 2
        assert "left,top,right,bottom" in capsys.readouterr().err

    def test_patch_requires_box(self, tmp_path, capsys):
        args = ["render", "--image", IMAGE, "--mode", "patch", "--out", str(tmp_path / "x.png")]
        assert main(args) == 2
        assert "--box" in capsys.readouterr().err

    def test_out_of_range_box(self, tmp_path, capsys):
        args = [
            "render", "--image", IMAGE, "--mode", "patch",
            "--box", "1,2,4,17", "--out", str(tmp_path / "x.png"),
        ]
        assert main(args) == 2
        capsys.readouterr()


class TestSnap:
    def make_pred(self, tmp_path):
        pred = tmp_path / "pred.jsonl"
        pred.write_text(
            json.dumps(
                {
                    "image": "a.png",
                    "comments": [
                        {"text": "Low contrast button.", "box": [1, 2, 4, 5]},
                        {"text": "Overflowing banner.", "box": [2, 6, 7, 9]},
                    ],
                }
            )
            + "\n"
        )
        return str(pred)

    def make_dom(self, tmp_path, rects):
        dom = tmp_path / "dom.jsonl"
        lines = [json.dumps({"width": 90, "height": 160})]
        lines += [json.dumps({"bounds": r}) for r in rects]
        dom.write_text("\n".join(lines) + "\n")
        return str(dom)

    def test_identity_dom_keeps_boxes(self, tmp_path, capsys):
        pred = self.make_pred(tmp_path)
        dom = self.make_dom(tmp_path, [[10, 20, 40, 50], [20, 60, 70, 90]])
        out = tmp_path / "snapped.jsonl"
        assert main(["snap", "--pred", pred, "--dom", dom, "--out", str(out)]) == 0
        assert "snapped 0 of 2 boxes" in capsys.readouterr().out
        got = load_critique_dataset(str(out))
        assert got[0].comments[0][1] == GridBox(1, 2, 4, 5)
        assert got[0].comments[1][1] == GridBox(2, 6, 7, 9)

    def test_nearby_dom_attracts_boxes(self, tmp_path, capsys):
        pred = self.make_pred(tmp_path)
        dom = self.make_dom(tmp_path, [[9, 19, 41, 51], [18, 58, 72, 92]])
        out = tmp_path / "snapped.jsonl"
        assert main(["snap", "--pred", pred, "--dom", dom, "--out", str(out)]) == 0
        assert "snapped 2 of 2 boxes" in capsys.readouterr().out
        got = load_critique_dataset(str(out))
        snapped = [box for _, box in got[0].comments]
        assert snapped[0] == GridBox(0.9, 1.9, 4.1, 5.1)
        assert snapped[1] == GridBox(1.8, 5.8, 7.2, 9.2)
        for new, old in zip(snapped, [GridBox(1, 2, 4, 5), GridBox(2, 6, 7, 9)]):
            assert iou(new, old) >= 0.3

    def test_far_dom_leaves_boxes(self, tmp_path, capsys):
        pred = self.make_pred(tmp_path)
        dom = self.make_dom(tmp_path, [[0, 140, 20, 160]])
        out = tmp_path / "snapped.jsonl"
        assert main(["snap", "--pred", pred, "--dom", dom, "--out", str(out)]) == 0
        assert "snapped 0 of 2 boxes" in capsys.readouterr().out

    def test_bad_dom_exits_2(self, tmp_path, capsys):
        pred = self.make_pred(tmp_path)
        dom = tmp_path / "dom.jsonl"
        dom.write_text(json.dumps({"width": 90, "height": 160}) + "\n" + json.dumps({"bounds": [40, 20, 10, 50]}) + "\n")
        args = ["snap", "--pred", pred, "--dom", str(dom), "--out", str(tmp_path / "o.jsonl")]
        assert main(args) == 2
        assert "reversed" in capsys.readouterr().err


class TestEvaluate:
    def make_critique_pair(self, tmp_path):
        gt = tmp_path / "gt.jsonl"
        gt.write_text(
            json.dumps(
                {
                    "image": "a.png",
                    "task": "checkout flow",
                    "comments": [
                        {"text": "The button is low contrast.", "box": [1, 2, 4, 5]},
                        {"text": "The banner overflows.", "box": [2, 6, 7, 9]},
                    ],
                }
            )
            + "\n"
        )
        pred = tmp_path / "pred.jsonl"
        pred.write_text(
            json.dumps(
                {
                    "image": "a.png",
                    "comments": [
                        {"text": "The button is low contrast.", "box": [1, 2, 4, 5]},
                        {"text": "The banner overflows.", "box": [2, 6, 7, 9]},
                    ],
                }
            )
            + "\n"
        )
        return str(pred), str(gt)

    def make_detection_pair(self, tmp_path):
        gt = tmp_path / "det_gt.jsonl"
        gt.write_text(
            json.dumps({"base_categories": ["button"], "novel_categories": [], "attributes": []})
            + "\n"
            + json.dumps({"image": "a.png", "objects": [{"category": "button", "box": [1, 2, 4, 5]}]})
            + "\n"
        )
        pred = tmp_path / "det_pred.jsonl"
        pred.write_text(
            json.dumps({"image": "a.png", "objects": [{"category": "button", "box": [1, 2, 4, 5]}]})
            + "\n"
        )
        return str(pred), str(gt)

    def test_critique_mode_table_and_json(self, tmp_path, capsys):
        pred, gt = self.make_critique_pair(tmp_path)
        out = tmp_path / "report.json"
        args = ["evaluate", "--pred", pred, "--dataset", gt, "--mode", "critique", "--out", str(out)]
        assert main(args) == 0
        stdout = capsys.readouterr().out
        assert "comment similarity  1.0000" in stdout
        assert "estimated iou       1.0000" in stdout
        payload = json.loads(out.read_text())
        assert payload["mode"] == "critique"
        assert payload["comment_similarity"] == pytest.approx(1.0, abs=1e-9)

    def test_metrics_filter(self, tmp_path, capsys):
        pred, gt = self.make_critique_pair(tmp_path)
        args = ["evaluate", "--pred", pred, "--dataset", gt, "--mode", "critique",
                "--metrics", "similarity"]
        assert main(args) == 0
        stdout = capsys.readouterr().out
        assert "comment similarity" in stdout
        assert "estimated iou" not in stdout

    def test_unknown_metric(self, tmp_path, capsys):
        pred, gt = self.make_critique_pair(tmp_path)
        args = ["evaluate", "--pred", pred, "--dataset", gt, "--mode", "critique",
                "--metrics", "bleu"]
        assert main(args) == 2
        assert "unknown metrics: bleu" in capsys.readouterr().err

    def test_detection_mode(self, tmp_path, capsys):
        pred, gt = self.make_detection_pair(tmp_path)
        args = ["evaluate", "--pred", pred, "--dataset", gt, "--mode", "ovd"]
        assert main(args) == 0
        stdout = capsys.readouterr().out
        map_lines = [ln for ln in stdout.splitlines() if ln.startswith("map")]
        assert map_lines and map_lines[0].endswith("100.0000")
        assert "button  1.0000" in stdout

    def test_mode_dataset_mismatch(self, tmp_path, capsys):
        pred, gt = self.make_critique_pair(tmp_path)
        args = ["evaluate", "--pred", pred, "--dataset", gt, "--mode", "ovd"]
        assert main(args) == 2
        assert "objects" in capsys.readouterr().err


class TestArgparse:
    def test_no_subcommand(self, capsys):
        assert main([]) == 2
        capsys.readouterr()

    def test_help_exits_0(self, capsys):
        assert main(["--help"]) == 0
        assert "critique" in capsys.readouterr().out

    def test_unknown_mode_value(self, tmp_path, capsys):
        args = ["render", "--image", IMAGE, "--mode", "bogus", "--out", str(tmp_path / "x.png")]
        assert main(args) == 2
        capsys.readouterr()

    def test_missing_required_flag(self, capsys):
        assert main(["evaluate", "--pred", "x.jsonl"]) == 2
        capsys.readouterr()
