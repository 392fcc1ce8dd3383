"""Smoke test for the Python bindings.

Build and install the extension first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o /tmp/wheels
    pip install /tmp/wheels/mapgr-*.whl

Then run `python python/smoke_test.py` or `pytest python/`.
"""

import json
import pathlib

import jsonschema

import mapgr

SCHEMA = pathlib.Path(__file__).resolve().parent.parent / "schemas" / "eval_report.schema.json"

TINY = {
    "seeds": [0],
    "generator": {"points": 4, "max_instances": 3},
    "decoder": {
        "layers": 2,
        "applied": 1,
        "queries": 4,
        "query_dim": 8,
        "attn_dim": 4,
        "ffn_hidden": 8,
        "points": 4,
        "map_h": 16,
        "map_w": 8,
        "features": {"h": 8, "w": 4, "fourier": [1.0]},
        "d_grl": 8,
        "grl_h": 4,
        "grl_w": 2,
        "phi_hidden": 4,
        "d_g": 6,
    },
    "steps": 3,
    "batch_size": 1,
    "warmup_steps": 1,
    "eval_scenes": 2,
    "audit_scenes": 1,
}


def validate(report_json):
    schema = json.loads(SCHEMA.read_text())
    report = json.loads(report_json)
    jsonschema.validate(report, schema)
    return report


def test_scene_roundtrip_and_raster():
    scene = mapgr.Scene([(0, [[-5.0, -20.0], [-5.0, 20.0]]), (2, [[10.0, -30.0], [10.0, 30.0]])])
    assert len(scene) == 2
    again = mapgr.Scene.from_json(scene.to_json())
    assert again.instances() == scene.instances()
    data, (c, h, w) = scene.rasterize()
    assert (c, h, w) == (3, 64, 32)
    assert set(data) <= {0.0, 1.0}
    assert sum(data[h * w : 2 * h * w]) == 0.0
    assert sum(data[:h * w]) > 0 and sum(data[2 * h * w :]) > 0
    assert len(mapgr.Scene.generate(7)) > 0


def test_geometry_and_matching():
    a = [[0.0, 0.0], [1.0, 0.0]]
    b = [[0.0, 1.0], [1.0, 1.0]]
    assert abs(mapgr.chamfer_distance(a, b) - 1.0) < 1e-12
    pts = mapgr.resample_polyline([[0.0, 0.0], [0.0, 3.0]], 4)
    assert [p[1] for p in pts] == [0.0, 1.0, 2.0, 3.0]
    assert mapgr.hungarian([[1.0, 2.0], [2.0, 1.0]]) == [0, 1]
    assert mapgr.THRESHOLDS_2 == [0.5, 1.0, 1.5]
    assert mapgr.CLASSES == ["divider", "ped_crossing", "boundary"]


def test_evaluate_perfect_predictions():
    scene = mapgr.Scene.generate(3)
    gt = json.loads(scene.to_json())
    preds = [[{"class_id": i["class_id"], "score": 0.9, "points": i["points"]} for i in gt["instances"]]]
    report = validate(mapgr.evaluate(json.dumps(preds), json.dumps([gt])))
    present = {mapgr.CLASSES[i["class_id"]] for i in gt["instances"]}
    for c in present:
        assert report["ap2"][c] == 1.0


def test_tiny_training_run():
    cfg = json.dumps(TINY)
    report_json, loss_csv = mapgr.train(cfg, "grl_grg")
    report = validate(report_json)
    assert report["failed"] is None
    assert loss_csv.startswith("step,layer,L_global,L_det,total\n")
    assert mapgr.train(cfg, "grl_grg")[1] == loss_csv

    dec = mapgr.Decoder(cfg, "grl_grg", 0)
    assert dec.num_parameters() > 0
    scene = mapgr.Scene.generate(1, cfg)
    preds = dec.predict(scene)
    assert len(preds) == TINY["decoder"]["queries"]
    rows = dec.audit(scene)
    assert all(r[2] is not None and r[2] > 1e-12 for r in rows)


if __name__ == "__main__":
    for name, fn in list(globals().items()):
        if name.startswith("test_") and callable(fn):
            fn()
            print(f"ok {name}")
