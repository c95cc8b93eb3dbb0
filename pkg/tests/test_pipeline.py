import numpy as np
import pytest

from rvdet.boxgeom import corners, rotated_iou
from rvdet.errors import InvalidInputError
from rvdet.lidarsim import NoiseSpec, encode_targets, oracle_predictions, random_scene, raycast_sweep
from rvdet.mixture import fuse
from rvdet.pipeline import PipelineConfig, detect
from rvdet.rangeview import build_range_image


def frame(seed, cfg, noise=NoiseSpec()):
    scene = random_scene(seed, cfg.sensor)
    tg = encode_targets(build_range_image(raycast_sweep(scene, cfg.sensor), cfg.sensor), cfg.sensor, scene)
    return scene, tg, oracle_predictions(tg, noise, cfg.C, cfg.K, seed)


class TestConfig:
    def test_round_trip(self, tmp_path):
        cfg = PipelineConfig(bin_size=0.7, nms_mode="soft", noise=NoiseSpec(center=0.1), seed=4)
        cfg.save(tmp_path / "c.json")
        assert PipelineConfig.load(tmp_path / "c.json") == cfg

    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.C == 4 and cfg.K == [3, 1, 1] and cfg.threshold == 0.25
        assert cfg.nms_config().widths == {1: 2.0, 2: 0.7, 3: 0.7}

    @pytest.mark.parametrize("kw", [{"bin_size": 0}, {"iterations": -1}, {"backend": "gpu"}, {"nms_mode": "x"}])
    def test_invalid(self, kw):
        with pytest.raises((InvalidInputError, ValueError)):
            PipelineConfig(**kw)

    def test_unknown_key(self):
        with pytest.raises(InvalidInputError):
            PipelineConfig.from_dict({"nope": 1})


class TestDetect:
    def test_row_mismatch(self):
        cfg = PipelineConfig()
        _, tg, raw = frame(1, cfg)
        with pytest.raises(InvalidInputError):
            detect(tg.points, raw[:-1], cfg)

    def test_noiseless_frames_recover_truth(self):
        cfg = PipelineConfig()
        for seed in range(5):
            scene, tg, raw = frame(seed, cfg)
            res = detect(tg.points, raw, cfg)
            for o in scene.objects:
                best = max((d for d in res.detections if d.class_id == o.class_id),
                           key=lambda d: rotated_iou(d.corners, corners(o.box)))
                assert np.abs(best.corners - corners(o.box)).max() < 1e-5

    def test_streams_carry_fused_boxes(self):
        cfg = PipelineConfig()
        _, tg, raw = frame(2, cfg, NoiseSpec(center=0.2))
        res = detect(tg.points, raw, cfg)
        for st in res.streams.values():
            for lab in np.unique(st.labels)[:5]:
                members = np.flatnonzero(st.labels == lab)
                want = fuse([(st.raw_corners[m], st.raw_sigma[m]) for m in members])
                assert np.allclose(st.corners[members], want.corners, rtol=0, atol=1e-9)
                assert np.allclose(st.sigma[members], want.sigma, rtol=1e-12)

    def test_no_fusion_keeps_raw_boxes(self):
        cfg = PipelineConfig(fusion=False)
        _, tg, raw = frame(3, cfg, NoiseSpec(center=0.2))
        res = detect(tg.points, raw, cfg)
        for st in res.streams.values():
            assert np.array_equal(st.corners, st.raw_corners)
        assert len(res.pre_nms) == sum(len(s.labels) for s in res.streams.values())

    def test_deterministic(self):
        cfg = PipelineConfig()
        _, tg, raw = frame(4, cfg, NoiseSpec(center=0.1))
        a = detect(tg.points, raw, cfg).detections
        b = detect(tg.points, raw, cfg).detections
        assert [tuple(d.corners) + (d.score,) for d in a] == [tuple(d.corners) + (d.score,) for d in b]

    def test_sorted_by_score(self):
        cfg = PipelineConfig(nms_mode="soft")
        _, tg, raw = frame(5, cfg, NoiseSpec(center=0.2))
        s = [d.score for d in detect(tg.points, raw, cfg).detections]
        assert s == sorted(s, reverse=True)

    def test_backends_agree(self):
        _, tg, raw = frame(6, PipelineConfig(), NoiseSpec(center=0.2))
        a = detect(tg.points, raw, PipelineConfig(backend="dense")).detections
        b = detect(tg.points, raw, PipelineConfig(backend="sparse")).detections
        assert len(a) == len(b)
        for x, y in zip(a, b):
            assert np.allclose(x.corners, y.corners, atol=1e-9)

    def test_threshold_is_strict(self):
        cfg = PipelineConfig()
        _, tg, raw = frame(7, cfg)
        uniform = raw.copy()
        uniform[:, : cfg.C] = 0.0  # every class exactly at 1/C
        res = detect(tg.points, uniform, cfg)
        assert res.detections == [] and res.streams == {}

    def test_empty_frame(self):
        cfg = PipelineConfig()
        _, tg, raw = frame(8, cfg)
        res = detect(tg.points.__class__(tg.points.rows[:0], tg.points.cols[:0], tg.points.xyz[:0],
                                         tg.points.theta[:0]), raw[:0], cfg)
        assert res.detections == []
        assert set(res.timings) == {"decode", "cluster", "nms", "total"}
