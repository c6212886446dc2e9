import math
import sys
import textwrap

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import nll
from cribwatch.classify import (TASKS, LatencyModelBackend, OracleBackend, PlattParams, RawScores,
                                apply_quantization, argmax_first, calibrate, clamped_normal_moments,
                                classify, find_profile, fit_clamped_normal, load_profiles,
                                make_backend, platt_apply, platt_fit)
from cribwatch.detect import BoundingBox, RoiTensor
from cribwatch.errors import BackendFailure, ConfigError, DegenerateData, NonFinite

CRY = TASKS["cry_normal"]


def roi(truth="crying", index=0):
    return RoiTensor(np.zeros((256, 256, 3), np.float32), BoundingBox(0, 0, 10, 10), index, truth)


def test_oracle_label():
    p = classify(OracleBackend(), roi("crying"), CRY)
    assert p.label == "crying" and p.confidence >= 0.99
    assert abs(sum(p.calibrated) - 1) < 1e-6
    assert p.latency_ms >= 0


def test_oracle_agreement_over_scenario():
    from cribwatch.frames import load_scenario, synth_stream
    from cribwatch.detect import detect_faces, extract_roi, to_rgb
    s = load_scenario("crying_12s.scn")
    be = OracleBackend()
    for f in list(synth_stream(s))[::20]:
        rgb = to_rgb(f)
        b = detect_faces(rgb)[0]
        assert classify(be, extract_roi(rgb, b), CRY).label == f.ground_truth


def test_oracle_noise_reproducible():
    a = [classify(OracleBackend(0.5, 3), roi("normal", i), CRY).label for i in range(200)]
    b = [classify(OracleBackend(0.5, 3), roi("normal", i), CRY).label for i in range(200)]
    assert a == b
    assert 60 < a.count("crying") < 140


def test_oracle_unknown_truth():
    with pytest.raises(BackendFailure):
        classify(OracleBackend(), roi("sleep"), CRY)


def test_uniform_probs_tie_breaks_first():
    class Flat:
        name = "flat"

        def predict(self, r, task):
            return RawScores((0.5, 0.5), "probs")

    p = classify(Flat(), roi(), CRY)
    assert p.label == "crying" and p.confidence == 0.5


def test_argmax_first():
    assert argmax_first([0.2, 0.2]) == 0
    assert argmax_first([0.1, 0.3, 0.3]) == 1


def test_platt_apply_values():
    assert platt_apply(0.0, PlattParams(1, 0)) == 0.5
    assert platt_apply(50.0, PlattParams(1, 0)) > 0.999999
    assert platt_apply(1.0, PlattParams(2, -1)) == pytest.approx(0.731059, abs=1e-6)
    assert 0.0 <= platt_apply(-1000.0, PlattParams(1, 0)) < 1e-300


@settings(max_examples=200)
@given(st.floats(0.01, 20), st.floats(-20, 20), st.floats(-30, 30), st.floats(0.01, 10))
def test_platt_monotone(a, b, z1, dz):
    # strictness is limited by float resolution near saturation
    lo, hi = platt_apply(z1, PlattParams(a, b)), platt_apply(z1 + dz, PlattParams(a, b))
    assert hi >= lo
    if abs(a * z1 + b) < 15 and a * dz > 1e-6:
        assert hi > lo


@settings(max_examples=100)
@given(st.lists(st.floats(-20, 20), min_size=2, max_size=2), st.floats(0.1, 5), st.floats(-3, 3))
def test_calibrated_sums_to_one(vals, a, b):
    cal = calibrate(RawScores(tuple(vals)), PlattParams(a, b))
    assert abs(sum(cal) - 1) < 1e-6 and all(0 <= c <= 1 for c in cal)


@pytest.mark.parametrize("name", ["separated", "random", "noisy"])
def test_platt_fit_beats_grid(derived, name):
    fx = derived["platt"][name]
    p = platt_fit(list(zip(fx["z"], fx["y"])))
    assert nll(p.a, p.b, fx["z"], fx["y"]) <= fx["grid_nll"] + 1e-3


def test_platt_fit_separated_sanity(derived):
    fx = derived["platt"]["separated"]
    p = platt_fit(list(zip(fx["z"], fx["y"])))
    assert p.a > 0 and platt_apply(1.0, p) > 0.9


def test_platt_fit_random_flat(derived):
    fx = derived["platt"]["random"]
    assert abs(platt_fit(list(zip(fx["z"], fx["y"]))).a) <= 0.2


def test_platt_fit_degenerate():
    with pytest.raises(DegenerateData):
        platt_fit([(0.1, 1), (0.5, 1), (2.0, 1)])
    with pytest.raises(NonFinite):
        platt_fit([(math.inf, 1), (0.0, 0)])


def test_platt_params_roundtrip(tmp_path):
    PlattParams(1.5, -0.25).save(tmp_path / "c.json", "cry_normal")
    assert PlattParams.load(tmp_path / "c.json", "cry_normal") == PlattParams(1.5, -0.25)
    with pytest.raises(ConfigError):
        PlattParams.load(tmp_path / "c.json", "sleep_awake")
    with pytest.raises(NonFinite):
        PlattParams(math.nan, 0)


def test_profiles_bundled_text():
    profs = load_profiles()
    assert [p.name for p in profs] == ["MobileNet", "LeNet", "ResNet", "EfficientB0", "InceptionV3"]
    mob = profs[0]
    assert (mob.mean_ms, mob.std_ms, mob.min_ms, mob.max_ms) == (7.57, 0.05, 7.47, 7.65)
    assert find_profile("LeNet").formatted("max_ms") == "10.10"


def test_quantization_deltas():
    q = apply_quantization(find_profile("ResNet"))
    assert q.stored_size_mb == pytest.approx(10.70 * 0.4)
    assert q.mean_ms == pytest.approx(40.41 * 0.78)


@pytest.mark.parametrize("name", ["MobileNet", "EfficientB0", "InceptionV3", "LeNet"])
def test_clamped_fit_moments(name):
    p = find_profile(name)
    loc, scale = fit_clamped_normal(p.mean_ms, p.std_ms, p.min_ms, p.max_ms)
    m, s = clamped_normal_moments(loc, scale, p.min_ms, p.max_ms)
    assert m == pytest.approx(p.mean_ms, abs=1e-3)
    assert s == pytest.approx(p.std_ms, rel=0.05)


def test_latency_draws_converge():
    for name in ("MobileNet", "EfficientB0"):
        p = find_profile(name)
        be = LatencyModelBackend(p, seed=1)
        d = np.array([be.draw_ms() for _ in range(1000)])
        assert d.min() >= p.min_ms and d.max() <= p.max_ms
        assert abs(d.mean() - p.mean_ms) < 3 * p.std_ms / math.sqrt(1000) + 1e-9


def test_latency_sample_mean_with_slack():
    p = find_profile("EfficientB0")
    be = LatencyModelBackend(p, seed=2)
    d = [be.draw_ms() for _ in range(1000)]
    assert abs(np.mean(d) - p.mean_ms) < 3 * p.std_ms / math.sqrt(1000) + 1.0


def test_latency_model_mobilenet_window():
    # 0.25 ms of declared slack covers timer and call overhead on loaded hosts
    be = LatencyModelBackend(find_profile("MobileNet"), seed=0)
    lat = [classify(be, roi(), CRY).latency_ms for _ in range(30)]
    assert min(lat) >= 7.47
    assert np.median(lat) <= 7.65 + 0.25


@pytest.mark.slow
def test_latency_model_inception_mean():
    be = make_backend("latency_model", {"profile": "InceptionV3", "seed": 0})
    lat = [classify(be, roi(), CRY).latency_ms for _ in range(200)]
    assert abs(np.mean(lat) - 66.19) <= 1.0


def test_latency_model_labels():
    be = LatencyModelBackend(find_profile("MobileNet"), labels="fixed:normal")
    assert classify(be, roi("crying"), CRY).label == "normal"
    with pytest.raises(ConfigError):
        LatencyModelBackend(find_profile("MobileNet"), labels="bogus")


def test_make_backend_errors():
    with pytest.raises(ConfigError):
        make_backend("tflite", {})
    with pytest.raises(ConfigError):
        make_backend("latency_model", {})
    with pytest.raises(ConfigError):
        make_backend("oracle", {"noise": 2})


CHILD = textwrap.dedent('''
    import hashlib, json, sys
    import numpy as np
    for line in sys.stdin:
        req = json.loads(line)
        blob = open(req["tensor_path"], "rb").read()
        assert hashlib.sha256(blob).hexdigest() == req["roi_digest"]
        data = np.frombuffer(blob, dtype=np.float32).reshape(256, 256, 3)
        m = float(data.mean())
        if req["frame_index"] == 99:
            print("not json", flush=True)
        else:
            print(json.dumps([1.0 - m, m]), flush=True)
''')


def test_external_backend(tmp_path):
    script = tmp_path / "child.py"
    script.write_text(CHILD)
    be = make_backend("external", {"command": [sys.executable, str(script)], "scores": "probs"})
    try:
        r = roi()
        r.data[:] = 0.75
        p = classify(be, r, CRY)
        assert p.label == "normal" and p.confidence == pytest.approx(0.75, abs=1e-6)
        with pytest.raises(BackendFailure):
            classify(be, roi(index=99), CRY)
    finally:
        be.close()


def test_external_backend_dead_child(tmp_path):
    be = make_backend("external", {"command": [sys.executable, "-c", "pass"]})
    try:
        with pytest.raises(BackendFailure):
            classify(be, roi(), CRY)
    finally:
        be.close()
