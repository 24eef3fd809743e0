import json

import numpy as np
import pytest

from neggrounding import embio
from neggrounding.cli import dispatch
from neggrounding.pipeline.posthoc import CROP_VERIFY


def run(capsys, *argv):
    code = dispatch([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def inflated(fixtures_dir):
    root = fixtures_dir / "inflated_ap"
    return root / "detections.jsonl", root / "queries.json"


class TestUsage:
    def test_unknown_subcommand(self, capsys):
        code, _, err = run(capsys, "frobnicate")
        assert code == 2
        assert "usage" in err

    def test_missing_required_flag(self, capsys):
        assert run(capsys, "eval", "--queries", "q.json")[0] == 2

    def test_unknown_config_key(self, capsys, tmp_path, inflated):
        cfg = tmp_path / "cfg.json"
        cfg.write_text('{"gamma": 1}')
        dets, queries = inflated
        code, _, err = run(capsys, "eval", "--detections", dets, "--queries", queries, "--config", cfg)
        assert code == 1
        assert "UnknownKey" in err

    def test_missing_input_file(self, capsys, tmp_path):
        code, _, err = run(capsys, "mcq", "--scores", tmp_path / "absent.jsonl")
        assert code == 1
        assert "FileNotFoundError" in err

    @pytest.mark.parametrize(
        "argv",
        [
            ["posthoc", "--detections", "d.jsonl", "--queries", "q.json", "--mode", "crop", "--k", "0"],
            ["adapter-check", "--max-d", "1"],
            ["adapter-check", "--max-r", "0"],
            ["adapter-check", "--trials", "two"],
        ],
    )
    def test_out_of_range_integers(self, capsys, argv):
        code, _, err = run(capsys, *argv)
        assert code == 2
        assert "error:" in err


class TestParseAndMerge:
    def test_parse(self, capsys):
        code, out, _ = run(capsys, "parse", "a dog without a collar")
        assert code == 0
        parsed = json.loads(out)
        assert parsed["raw"] == "a dog without a collar"
        assert any(p["is_negated"] for p in parsed["phrases"])

    def test_merge_jsonl(self, capsys, tmp_path, rng):
        _, out, _ = run(capsys, "parse", "a dog without a collar")
        parsed = json.loads(out)
        n = len(parsed["tokens"])
        emb = tmp_path / "emb.jsonl"
        emb.write_text(json.dumps({"caption": parsed["raw"], "embeddings": rng.normal(size=(n, 3)).tolist()}) + "\n")
        code, out, _ = run(capsys, "merge", "--embeddings", emb, "--beta", "3")
        assert code == 0
        merged = json.loads(out)
        assert merged["caption"] == "a dog without a collar"
        assert len(merged["rows"]) == len(merged["spans"]) == len(parsed["phrases"])
        for w in merged["weights"]:
            assert sum(w) == pytest.approx(1.0)

    def test_merge_row_mismatch(self, capsys, tmp_path):
        emb = tmp_path / "emb.jsonl"
        emb.write_text(json.dumps({"caption": "a dog without a collar", "embeddings": [[1.0, 0.0]]}) + "\n")
        code, out, err = run(capsys, "merge", "--embeddings", emb)
        assert code == 1
        assert out == ""
        assert "DimensionMismatch" in err

    def test_parse_then_binary_merge(self, capsys, tmp_path, rng):
        parsed_path = tmp_path / "parsed.jsonl"
        assert run(capsys, "parse", "a man not wearing glasses", "two dogs", "--out", parsed_path)[0] == 0
        parsed = [json.loads(line) for line in parsed_path.read_text().splitlines()]
        emb = tmp_path / "emb.bin"
        with open(emb, "wb") as fh:
            for p in parsed:
                embio.write_block(fh, rng.normal(size=(len(p["tokens"]), 4)))
        merged = tmp_path / "merged.bin"
        code, _, _ = run(capsys, "merge", "--embeddings", emb, "--parsed", parsed_path,
                         "--format", "binary", "--out", merged)
        assert code == 0
        with open(merged, "rb") as fh:
            blocks = list(embio.iter_blocks(fh))
        assert [b.shape for b in blocks] == [(len(p["phrases"]), 4) for p in parsed]

    def test_binary_needs_parsed(self, capsys, tmp_path):
        emb = tmp_path / "emb.bin"
        with open(emb, "wb") as fh:
            embio.write_block(fh, np.ones((2, 2)))
        code, _, err = run(capsys, "merge", "--embeddings", emb)
        assert code == 1
        assert "FormatError" in err

    def test_cue_file_changes_merge(self, capsys, tmp_path, rng):
        cues = tmp_path / "cues.txt"
        cues.write_text("lacking\n")
        emb = tmp_path / "emb.jsonl"
        emb.write_text(json.dumps({"caption": "a dog lacking a collar", "embeddings": rng.normal(size=(5, 3)).tolist()}) + "\n")
        _, plain, _ = run(capsys, "merge", "--embeddings", emb, "--beta", "4")
        code, boosted, _ = run(capsys, "merge", "--embeddings", emb, "--beta", "4", "--cue-file", cues)
        assert code == 0
        assert json.loads(plain)["spans"] == [[0, 1], [2], [3, 4]]
        merged = json.loads(boosted)
        assert merged["spans"] == [[0, 1], [2, 3, 4]]
        assert merged["weights"][1] == pytest.approx([4 / 6, 1 / 6, 1 / 6])

    def test_missing_cue_file(self, capsys, tmp_path):
        emb = tmp_path / "emb.jsonl"
        emb.write_text(json.dumps({"caption": "a dog", "embeddings": [[1.0], [0.0]]}) + "\n")
        code, _, err = run(capsys, "merge", "--embeddings", emb, "--cue-file", tmp_path / "absent.txt")
        assert code == 1
        assert "MalformedConfig" in err

    @pytest.mark.parametrize("line", ["{not json", '{"raw": "a dog"}', '{"raw": "a dog", "tokens": [], "phrases": [{"indices": []}]}'])
    def test_bad_parsed_record(self, capsys, tmp_path, line):
        parsed = tmp_path / "parsed.jsonl"
        parsed.write_text(line + "\n")
        emb = tmp_path / "emb.bin"
        with open(emb, "wb") as fh:
            embio.write_block(fh, np.ones((2, 2)))
        code, _, err = run(capsys, "merge", "--embeddings", emb, "--parsed", parsed)
        assert code == 1
        assert "FormatError" in err


class TestAmplify:
    @pytest.fixture
    def direction(self, tmp_path):
        path = tmp_path / "direction.json"
        path.write_text("[1.0, 0.0]")
        return path

    def test_bound_holds(self, capsys, tmp_path, direction):
        rows = [[0.0, 1.0], [0.0, 1.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]
        emb = tmp_path / "emb.jsonl"
        emb.write_text(json.dumps({"caption": "a dog without a collar", "embeddings": rows}) + "\n")
        code, out, _ = run(capsys, "amplify", "--embeddings", emb, "--direction", direction, "--beta", "3")
        assert code == 0
        report = json.loads(out)
        assert report["holds"]
        assert (report["n"], report["m"], report["beta"]) == (5, 2, 3.0)
        assert report["bound_factor"] == pytest.approx(3 / 4 * 5 / 2)
        assert report["ratio"] == pytest.approx(report["bound_factor"])

    def test_caption_without_cue(self, capsys, tmp_path, direction):
        emb = tmp_path / "emb.jsonl"
        emb.write_text(json.dumps({"caption": "a dog", "embeddings": [[1.0, 0.0], [0.0, 1.0]]}) + "\n")
        code, _, err = run(capsys, "amplify", "--embeddings", emb, "--direction", direction)
        assert code == 1
        assert "NoCue" in err


class TestEvaluation:
    def test_eval(self, capsys, inflated):
        dets, queries = inflated
        code, out, err = run(capsys, "eval", "--detections", dets, "--queries", queries)
        assert code == 0
        report = json.loads(out)
        assert report["ap"] == pytest.approx(100.0)
        assert report["fpr"] == 0.0
        assert report["protocol"] == "coco"
        assert "NMS-AP" in err

    def test_eval_without_nms(self, capsys, inflated):
        dets, queries = inflated
        code, out, _ = run(capsys, "eval", "--detections", dets, "--queries", queries, "--no-nms",
                           "--protocol", "ap50")
        assert code == 0
        report = json.loads(out)
        assert report["fpr"] == 100.0
        assert report["protocol"] == "ap50"

    def test_nms(self, capsys, inflated):
        dets, _ = inflated
        code, out, _ = run(capsys, "nms", "--detections", dets)
        assert code == 0
        kept = [json.loads(line) for line in out.splitlines()]
        assert [d["caption_id"] for d in kept] == ["1"]

    def test_mcq(self, capsys, fixtures_dir):
        code, out, _ = run(capsys, "mcq", "--scores", fixtures_dir / "mcq.jsonl")
        assert code == 0
        result = json.loads(out)
        assert [s["selected"] for s in result["selections"]] == [1, 0, 3, 0, 1]
        assert result["accuracy"] == 75.0

    @pytest.mark.parametrize("line", ['{"question_id": "q1", "scores": [0.1', '{"question_id": "q1", "answer": 0}'])
    def test_mcq_malformed_line(self, capsys, tmp_path, line):
        scores = tmp_path / "scores.jsonl"
        scores.write_text('{"question_id": "q0", "scores": [0.2, 0.8]}\n' + line + "\n")
        code, out, err = run(capsys, "mcq", "--scores", scores)
        assert code == 1
        assert out == ""
        assert "FormatError" in err


class TestAdapterCommands:
    def test_adapter_check(self, capsys):
        code, out, _ = run(capsys, "adapter-check", "--trials", "5", "--fit-steps", "20", "--scheme", "strided")
        assert code == 0
        report = json.loads(out)
        assert report["passed"]
        assert report["max_relative_error"] < 1e-4
        assert report["placement"] == {"shallow": [0, 1, 2], "strided": [1, 3, 5], "deep": [3, 4, 5]}
        assert report["selected"] == {"scheme": "strided", "blocks": [1, 3, 5]}
        assert report["toy_fit"]["steps"] == 20

    def test_diag_attn(self, capsys, tmp_path):
        attn = tmp_path / "attn.json"
        attn.write_text(json.dumps({"blocks": [[[0.5, 0.5, 0.0], [0.0, 0.0, 1.0]]], "classes": ["NOUN", "NEG", "NOUN"]}))
        code, out, _ = run(capsys, "diag-attn", "--attention", attn, "--scheme", "deep")
        assert code == 0
        diag = json.loads(out)
        assert diag["per_class"] == {"NEG": pytest.approx(0.25), "NOUN": pytest.approx(0.375)}
        assert diag["adapted_blocks"] == [3, 4, 5]

    def test_diag_attn_bad_rows(self, capsys, tmp_path):
        attn = tmp_path / "attn.json"
        attn.write_text(json.dumps({"blocks": [[[0.5, 0.2]]], "classes": ["NOUN", "NEG"]}))
        code, _, err = run(capsys, "diag-attn", "--attention", attn)
        assert code == 1
        assert "RowNotNormalized" in err


class TestPipelineCommands:
    def test_build_dataset_is_reproducible(self, capsys, tmp_path, fixtures_dir):
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.jsonl"
            summary = tmp_path / f"{name}.summary.json"
            code, _, _ = run(
                capsys, "build-dataset",
                "--annotations", fixtures_dir / "annotations.jsonl",
                "--mock-fixtures", fixtures_dir / "mock_responses",
                "--seed", "7", "--out", out, "--summary", summary,
            )
            assert code == 0
            outputs.append(out.read_bytes())
        assert outputs[0] == outputs[1]
        assert len(outputs[0].splitlines()) == 4
        assert json.loads(summary.read_text())["records"] == 4

    def test_llamacpp_needs_model_paths(self, capsys, fixtures_dir):
        code, _, err = run(capsys, "build-dataset", "--annotations", fixtures_dir / "annotations.jsonl",
                           "--client", "llamacpp")
        assert code == 1
        assert "--model-path" in err

    def test_stats(self, capsys, fixtures_dir):
        code, out, _ = run(capsys, "stats", fixtures_dir / "corpora" / "plain.txt")
        assert code == 0
        report = json.loads(out)
        assert report["negation_frequency"] == 12.5

    def test_posthoc_crop(self, capsys, tmp_path, inflated):
        mock_dir = tmp_path / "mock"
        mock_dir.mkdir()
        (mock_dir / "responses.jsonl").write_text(json.dumps({"kind": CROP_VERIFY, "response": "yes"}) + "\n")
        dets, queries = inflated
        code, out, _ = run(capsys, "posthoc", "--detections", dets, "--queries", queries,
                           "--mode", "crop", "--k", "1", "--mock-fixtures", mock_dir)
        assert code == 0
        assert [json.loads(line)["caption_id"] for line in out.splitlines()] == ["1", "2"]

    def test_flickr_convert(self, capsys, tmp_path):
        ann, sent = tmp_path / "Annotations", tmp_path / "Sentences"
        ann.mkdir()
        sent.mkdir()
        (ann / "9.xml").write_text(
            "<annotation><size><width>100</width><height>80</height></size>"
            "<object><name>1</name><bndbox><xmin>5</xmin><ymin>5</ymin><xmax>50</xmax><ymax>60</ymax></bndbox></object>"
            "</annotation>"
        )
        (sent / "9.txt").write_text("[/EN#1/people A woman] reads .\n")
        code, out, _ = run(capsys, "flickr-convert", "--annotations-dir", ann, "--sentences-dir", sent)
        assert code == 0
        image = json.loads(out)
        assert image["image_id"] == "9"
        assert image["regions"][0]["phrase"] == "A woman"
