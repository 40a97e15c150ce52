import hashlib
import json
import math

import numpy as np
import pytest

from dan.checkpoint import load_checkpoint
from dan.cli import graymap, main, read_graymap
from dan.container import read_records

SMALL = ["--concepts", "8", "--attributes", "3", "--feature-dim", "12", "--regions", "4",
         "--train", "24", "--val", "6", "--test", "6"]
FAST = ["--dim", "6", "--epochs", "2", "--batch-size", "8", "--clip", "1", "--lr", "0.05"]


def sha(p):
    return hashlib.sha256(p.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--task", "vqa", "--out", str(root / "vqa"), "--seed", "7"] + SMALL) == 0
    assert main(["gen-data", "--task", "match", "--out", str(root / "match"), "--seed", "7",
                 "--caption-min", "2", "--caption-max", "3"] + SMALL) == 0
    assert main(["train", "--model", "rdan", "--data", str(root / "vqa"), "--out", str(root / "r")] + FAST) == 0
    assert main(["train", "--model", "mdan", "--data", str(root / "match"), "--out", str(root / "m"),
                 "--margin", "1"] + FAST) == 0
    return root


class TestGenData:
    def test_same_seed_same_hashes(self, workspace, tmp_path):
        assert main(["gen-data", "--task", "vqa", "--out", str(tmp_path), "--seed", "7"] + SMALL) == 0
        for name in ("train.dan", "val.dan", "test.dan", "vocab.txt", "manifest.json"):
            assert sha(tmp_path / name) == sha(workspace / "vqa" / name)

    def test_missing_out_is_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["gen-data", "--task", "vqa"])
        assert e.value.code == 2

    def test_manifest_hashes_verify(self, workspace):
        manifest = json.loads((workspace / "vqa" / "run_manifest.json").read_text())
        assert manifest["command"] == "gen-data" and manifest["seed"] == 7
        assert manifest["hashes"]
        for path, digest in manifest["hashes"].items():
            assert hashlib.sha256(open(path, "rb").read()).hexdigest() == digest

    def test_caption_flags_rejected_for_vqa(self, tmp_path):
        assert main(["gen-data", "--task", "vqa", "--out", str(tmp_path), "--caption-min", "2"] + SMALL) == 2

    def test_seed_precedence(self, tmp_path, monkeypatch):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 11}))
        monkeypatch.setenv("DAN_SEED", "5")
        main(["gen-data", "--task", "vqa", "--out", str(tmp_path / "env")] + SMALL)
        main(["gen-data", "--task", "vqa", "--out", str(tmp_path / "cfg"), "--config", str(cfg)] + SMALL)
        main(["gen-data", "--task", "vqa", "--out", str(tmp_path / "flag"), "--config", str(cfg), "--seed", "3"] + SMALL)
        seeds = [json.loads((tmp_path / d / "manifest.json").read_text())["seed"] for d in ("env", "cfg", "flag")]
        assert seeds == [5, 11, 3]

    def test_bad_config_json(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        assert main(["gen-data", "--task", "vqa", "--out", str(tmp_path / "x"), "--config", str(bad)] + SMALL) == 2


class TestTrain:
    def test_checkpoint_loads(self, workspace):
        ckpt = load_checkpoint(workspace / "r" / "best.ckpt")
        assert ckpt.kind == "rdan" and ckpt.epoch >= 1
        log = (workspace / "r" / "train_log.jsonl").read_text().splitlines()
        assert len(log) == 4

    def test_paper_preset_recorded(self, workspace, tmp_path):
        assert main(["train", "--model", "rdan", "--data", str(workspace / "vqa"), "--out", str(tmp_path),
                     "--preset", "paper", "--epochs", "0"]) == 0
        m = json.loads((tmp_path / "run_manifest.json").read_text())["config"]
        assert m["optimizer"]["learning_rate"] == 0.1 and m["optimizer"]["momentum"] == 0.9
        assert m["model"]["margin"] == 100.0 and m["model"]["steps"] == 2 and m["model"]["dim"] == 512

    def test_zero_epochs_keeps_init(self, workspace, tmp_path):
        args = ["train", "--model", "rdan", "--data", str(workspace / "vqa"), "--dim", "6", "--epochs", "0"]
        main(args + ["--out", str(tmp_path / "a"), "--seed", "4"])
        main(args + ["--out", str(tmp_path / "b"), "--seed", "4"])
        assert (tmp_path / "a" / "last.ckpt").read_bytes() == (tmp_path / "b" / "last.ckpt").read_bytes()

    def test_missing_dataset_is_io_error(self, tmp_path):
        assert main(["train", "--model", "rdan", "--data", str(tmp_path / "nope"), "--out", str(tmp_path / "o")]) == 4

    def test_wrong_task(self, workspace, tmp_path):
        assert main(["train", "--model", "mdan", "--data", str(workspace / "vqa"), "--out", str(tmp_path)] + FAST) == 2

    def test_divergence_exit_code(self, workspace, tmp_path):
        code = main(["train", "--model", "rdan", "--data", str(workspace / "vqa"), "--out", str(tmp_path),
                     "--dim", "6", "--epochs", "2", "--batch-size", "8", "--lr", "1e300", "--clip", "1e300", "--momentum", "0"])
        assert code == 3

    def test_resume_config_mismatch(self, workspace, tmp_path):
        code = main(["train", "--model", "rdan", "--data", str(workspace / "vqa"), "--out", str(tmp_path),
                     "--dim", "7", "--epochs", "3", "--resume", str(workspace / "r" / "last.ckpt")])
        assert code == 2


class TestQueries:
    def test_evaluate(self, workspace, capsys):
        assert main(["evaluate", "--checkpoint", str(workspace / "r" / "best.ckpt"), "--data", str(workspace / "vqa")]) == 0
        assert 0.0 <= json.loads(capsys.readouterr().out)["accuracy"] <= 1.0

    def test_answer(self, workspace, capsys):
        test_id = json.loads((workspace / "vqa" / "manifest.json").read_text())["counts"]["train"] + 6
        assert main(["answer", "--checkpoint", str(workspace / "r" / "best.ckpt"), "--data", str(workspace / "vqa"),
                     "--item-id", str(test_id)]) == 0
        answer, name, prob = capsys.readouterr().out.split()
        assert 0 <= int(answer) < 3 and 0 < float(prob) <= 1

    def test_answer_kind_mismatch(self, workspace, capsys):
        code = main(["answer", "--checkpoint", str(workspace / "m" / "best.ckpt"), "--data", str(workspace / "vqa"),
                     "--item-id", "30"])
        assert code == 2
        assert "mdan" in capsys.readouterr().err

    def test_unknown_item(self, workspace):
        assert main(["answer", "--checkpoint", str(workspace / "r" / "best.ckpt"), "--data", str(workspace / "vqa"),
                     "--item-id", "99999"]) == 2

    def test_retrieve_single_gallery(self, workspace, capsys):
        first = 30
        main(["retrieve", "--checkpoint", str(workspace / "m" / "best.ckpt"), "--data", str(workspace / "match"),
              "--query-id", str(first), "--gallery", str(first)])
        rank, item, _ = capsys.readouterr().out.split()
        assert (rank, item) == ("1", str(first))

    def test_embed_then_offline_dot_equals_retrieve(self, workspace, tmp_path, capsys):
        ck, data = str(workspace / "m" / "best.ckpt"), str(workspace / "match")
        assert main(["embed", "--checkpoint", ck, "--data", data, "--modality", "image", "--out", str(tmp_path / "i.dan")]) == 0
        assert main(["embed", "--checkpoint", ck, "--data", data, "--modality", "text", "--out", str(tmp_path / "t.dan")]) == 0
        images = {m["item_id"]: z for m, z in read_records(tmp_path / "i.dan")}
        texts = {m["item_id"]: z for m, z in read_records(tmp_path / "t.dan")}
        assert all(m["modality"] == "image" for m, _ in read_records(tmp_path / "i.dan"))
        query = min(images)
        capsys.readouterr()
        assert main(["retrieve", "--checkpoint", ck, "--data", data, "--query-id", str(query), "--top-k", "6"]) == 0
        printed = [line.split() for line in capsys.readouterr().out.splitlines()]
        offline = sorted(((-math.fsum(a * b for a, b in zip(images[query], z)), i) for i, z in texts.items()))
        assert [(int(i), float(s)) for _, i, s in printed] == [(i, -s) for s, i in offline]
        scores = [float(s) for _, _, s in printed]
        assert scores == sorted(scores, reverse=True)

    def test_embed_kind_mismatch(self, workspace, tmp_path):
        assert main(["embed", "--checkpoint", str(workspace / "r" / "best.ckpt"), "--data", str(workspace / "match"),
                     "--modality", "image", "--out", str(tmp_path / "x.dan")]) == 2


class TestDumpAttention:
    @pytest.mark.parametrize("model,data", [("r", "vqa"), ("m", "match")])
    def test_json_and_graymaps_agree(self, workspace, tmp_path, model, data):
        out = tmp_path / "att"
        assert main(["dump-attention", "--checkpoint", str(workspace / model / "best.ckpt"),
                     "--data", str(workspace / data), "--item-id", "31", "--out", str(out)]) == 0
        trace = json.loads((out / "attention.json").read_text())
        assert len(trace["steps"]) == 2
        for step in trace["steps"]:
            for modality in ("visual", "textual"):
                w = np.array(step[modality])
                assert abs(w.sum() - 1) <= 1e-9
                pixels = read_graymap((out / f"step{step['step']}_{modality}.pgm").read_bytes())
                assert pixels.shape == (1, len(w))
                np.testing.assert_array_equal(pixels[0], np.rint(255 * w / w.max()).astype(np.uint8))
                # quantisation can tie near-equal weights, so check brightness rather than index
                assert pixels[0, int(np.argmax(w))] == pixels.max() == 255
        manifest = json.loads((out / "run_manifest.json").read_text())
        assert str(out / "attention.json") in manifest["hashes"]

    def test_uniform_is_flat(self):
        pixels = read_graymap(graymap(np.full(5, 0.2)))
        assert (pixels == pixels[0, 0]).all()
        assert graymap([0.25, 0.75]).startswith(b"P5\n2 1\n255\n")

    def test_missing_example(self, workspace, tmp_path):
        assert main(["dump-attention", "--checkpoint", str(workspace / "r" / "best.ckpt"),
                     "--data", str(workspace / "vqa"), "--item-id", "12345", "--out", str(tmp_path)]) == 2
