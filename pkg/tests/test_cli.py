import json

import numpy as np
import pytest

from wsmots.cli import DEFAULTS, compute_losses, load_config, main
from wsmots.formats import read_blob, read_detections, write_blob
from wsmots.synth import SynthConfig, generate


def closed_loop(tmp_path, *synth_args):
    out = tmp_path / "run"
    assert main(["synth", "--out", str(out), "--seed", "3", *synth_args]) == 0
    assert main(["track", "--detections", str(out / "0000.jsonl"), "--out", str(out / "tracked.jsonl"),
                 "--kitti", str(out / "pred" / "0000.txt")]) == 0
    assert main(["eval", "--gt", str(out / "gt"), "--pred", str(out / "pred"),
                 "--json", str(out / "scores.json")]) == 0
    return out, json.loads((out / "scores.json").read_text())


class TestSynth:
    def test_deterministic(self):
        a, b = generate(SynthConfig(seed=5)), generate(SynthConfig(seed=5))
        assert a.ground_truth == b.ground_truth
        assert [[d.bbox for d in f] for f in a.detections] == [[d.bbox for d in f] for f in b.detections]

    def test_byte_identical_files(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--seed", "9", "--embedding-noise", "0.1",
                         "--box-jitter", "1", "--distractors", "2"]) == 0
        for rel in ("gt/0000.txt", "0000.jsonl"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_masks_do_not_overlap(self):
        seq = generate(SynthConfig(objects=6, seed=1))
        from wsmots.masks import rle_decode
        for fa in seq.ground_truth.values():
            total = sum(rle_decode(i.mask).astype(int) for i in fa.instances)
            assert total.max() <= 1

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            SynthConfig(occlusion=2.0)


class TestClosedLoop:
    def test_zero_noise_perfect(self, tmp_path):
        _, scores = closed_loop(tmp_path)
        for s in scores.values():
            assert (s["smotsa"], s["motsa"], s["motsp"]) == (1.0, 1.0, 1.0)

    def test_distractors_filtered(self, tmp_path):
        _, scores = closed_loop(tmp_path, "--distractors", "3")
        for s in scores.values():
            assert s["fp"] == 0 and s["motsa"] == 1.0

    def test_id_switch(self, tmp_path):
        _, scores = closed_loop(tmp_path, "--id-switch", "0:8")
        assert sum(s["ids"] for s in scores.values()) == 1

    def test_long_disappearance_new_id(self, tmp_path):
        out, scores = closed_loop(tmp_path, "--disappear", "0:4:11")
        tracked = read_detections(out / "tracked.jsonl")
        assert len({d.identity for d in tracked}) == 5
        assert sum(s["ids"] for s in scores.values()) == 1

    def test_short_disappearance_keeps_id(self, tmp_path):
        out, scores = closed_loop(tmp_path, "--disappear", "0:4:5")
        assert len({d.identity for d in read_detections(out / "tracked.jsonl")}) == 4
        assert sum(s["ids"] for s in scores.values()) == 0


class TestCommands:
    def test_eval_missing_dir(self, tmp_path, capsys):
        assert main(["eval", "--gt", str(tmp_path / "no"), "--pred", str(tmp_path)]) == 2
        assert "error" in capsys.readouterr().err

    def test_eval_bad_file(self, tmp_path):
        (tmp_path / "gt").mkdir()
        (tmp_path / "gt" / "0000.txt").write_text("0 1001 1 4 4\n")
        assert main(["eval", "--gt", str(tmp_path / "gt"), "--pred", str(tmp_path / "gt")]) == 2

    def test_eval_txt(self, tmp_path):
        out = tmp_path / "run"
        main(["synth", "--out", str(out), "--frames", "3"])
        assert main(["eval", "--gt", str(out / "gt"), "--pred", str(out / "gt"), "--txt", str(tmp_path / "s.txt")]) == 0
        assert "smotsa 1.0" in (tmp_path / "s.txt").read_text()

    def test_track_bad_detections(self, tmp_path):
        p = tmp_path / "d.jsonl"
        p.write_text("{not json}\n")
        assert main(["track", "--detections", str(p), "--out", str(tmp_path / "o.jsonl")]) == 2
        assert not (tmp_path / "o.jsonl").exists()

    def test_track_threshold_flag(self, tmp_path):
        main(["synth", "--out", str(tmp_path), "--frames", "2", "--distractors", "2"])
        main(["track", "--detections", str(tmp_path / "0000.jsonl"), "--out", str(tmp_path / "t.jsonl"),
              "--det-thresh", "0.0"])
        assert len(read_detections(tmp_path / "t.jsonl")) == len(read_detections(tmp_path / "0000.jsonl"))

    def test_track_overlay(self, tmp_path):
        main(["synth", "--out", str(tmp_path), "--frames", "2"])
        assert main(["track", "--detections", str(tmp_path / "0000.jsonl"), "--out", str(tmp_path / "t.jsonl"),
                     "--overlay", str(tmp_path / "png")]) == 0
        assert len(list((tmp_path / "png").glob("*.png"))) == 2

    def test_synth_bad_flag(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path), "--disappear", "1:2"]) == 2

    def test_gradcheck_injected_error_fails(self, capsys):
        assert main(["gradcheck", "--trials", "1", "--inject-error"]) == 1
        out = capsys.readouterr().out
        for name in ("loc_loss", "crf_loss", "triplet_loss"):
            assert name in out

    def test_config_file(self, tmp_path):
        p = tmp_path / "c.cfg"
        p.write_text("# comment\nwindow = 4\nmu_a=0.3\n")
        assert load_config(p) == {"window": 4, "mu_a": 0.3}
        p.write_text("colour = 1\n")
        assert main(["track", "--detections", "x", "--out", "y", "--config", str(p)]) == 2


class TestLosses:
    def _two_by_two(self, batch):
        # heatmap [[1,0],[0,1]] with mu_a 0.5 gives labels [[1,void],[void,1]]
        write_blob(np.array([[[1.0, 0.0], [0.0, 1.0]]]), batch / "heatmaps.motk")
        write_blob(np.array([[[0.5, 0.3], [0.9, 0.5]]]), batch / "pred_masks.motk")

    def test_hand_batch(self, tmp_path, capsys):
        self._two_by_two(tmp_path)
        assert main(["losses", "--batch", str(tmp_path), "--grads", str(tmp_path / "g")]) == 0
        res = json.loads(capsys.readouterr().out)
        assert res["l_loc"] == pytest.approx(np.log(2))
        assert res["lambda_crf"] == DEFAULTS["lambda_crf"] == 2e-7
        g = read_blob(tmp_path / "g" / "loc_grad.motk")
        assert g[0, 0, 1] == 0 and g[0, 1, 0] == 0

    def test_perfect_prediction(self, tmp_path):
        write_blob(np.ones((2, 4, 4)), tmp_path / "heatmaps.motk")
        write_blob(np.ones((2, 4, 4)), tmp_path / "pred_masks.motk")
        bundle, _ = compute_losses(tmp_path, DEFAULTS)
        assert bundle.l_loc < 1e-6

    def test_all_terms(self, tmp_path, rng):
        write_blob(rng.random((2, 3, 6, 6)), tmp_path / "activations.motk")
        write_blob(rng.standard_normal((2, 3, 6, 6)), tmp_path / "gradients.motk")
        write_blob(rng.uniform(0.1, 0.9, (2, 6, 6)), tmp_path / "pred_masks.motk")
        write_blob(np.array([[0, 0, 10, 10], [5, 5, 20, 20]]), tmp_path / "roi_boxes.motk")
        write_blob(np.array([[0, 0, 10, 10], [5, 5, 20, 20]]), tmp_path / "gt_boxes.motk")
        write_blob(rng.random((2, 8, 8, 3)), tmp_path / "images.motk")
        write_blob(rng.standard_normal((6, 4)), tmp_path / "embeddings.motk")
        write_blob(np.array([0, 0, 1, 1, 2, 2]), tmp_path / "ids.motk")
        cfg = dict(DEFAULTS, **{"lambda": 0.5})
        bundle, grads = compute_losses(tmp_path, cfg, method="dense")
        assert bundle.l_loc > 0 and bundle.l_crf > 0 and bundle.l_t >= 0
        assert bundle.total == pytest.approx(bundle.l_t + 0.5 * (bundle.l_loc + 2e-7 * bundle.l_crf))
        assert set(grads) == {"loc_grad", "crf_grad", "triplet_grad"}

    def test_shape_mismatch(self, tmp_path):
        write_blob(np.ones((1, 4, 4)), tmp_path / "heatmaps.motk")
        write_blob(np.ones((1, 3, 3)), tmp_path / "pred_masks.motk")
        assert main(["losses", "--batch", str(tmp_path)]) == 2
