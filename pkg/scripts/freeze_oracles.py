"""Recompute oracle-derived expected values and write tests/derived_values.json.

Run after changing an oracle or a bundled fixture; the tests read the frozen
file and also check that the oracles still reproduce it.
"""

import json
import random
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "tests"))

import oracles  # noqa: E402
from cribwatch.frames import load_scenario  # noqa: E402  (fixture timeline only)


def scenario_truth(name):
    script = load_scenario(name)
    period = 1000.0 / script.fps
    labels, times = [], []
    for i in range(script.frame_count):
        t = i * period
        seg = script.segment_at(t)
        labels.append(seg.label if seg else "absent")
        times.append(t)
    return script, labels, times


def alert_fixture():
    script, labels, times = scenario_truth("crying_12s.scn")
    stable, counters = oracles.brute_force_filter(labels, None, 5, ["crying", "normal"], "majority", script.fps)
    alerts = oracles.whole_trace_alerts(stable, times, "crying", 10000.0, 60000.0)
    onset = next(s.start_ms for s in script.timeline if s.label == "crying")
    return {"alerts": [list(a) for a in alerts], "crying_onset_ms": onset,
            "delay_ms": alerts[0][0] - onset, "counters": counters}


def two_episode_fixture():
    # 12 s crying, 30 s normal, 12 s crying at 25 FPS.
    labels = ["crying"] * 300 + ["normal"] * 750 + ["crying"] * 300
    times = [i * 40.0 for i in range(len(labels))]
    stable, _ = oracles.brute_force_filter(labels, None, 5, ["crying", "normal"])
    return {"cooldown_60s": len(oracles.whole_trace_alerts(stable, times, "crying", 10000.0, 60000.0)),
            "cooldown_0": len(oracles.whole_trace_alerts(stable, times, "crying", 10000.0, 0.0))}


def platt_fixtures():
    sep_z = [-1.0, 1.0] * 50
    sep_y = [0, 1] * 50
    rng = random.Random(11)
    rnd_z = [rng.gauss(0, 2) for _ in range(400)]
    rnd_y = [rng.randint(0, 1) for _ in range(400)]
    noisy_z, noisy_y = [], []
    for _ in range(300):
        y = rng.randint(0, 1)
        noisy_z.append(rng.gauss(1.5 if y else -1.5, 1.0))
        noisy_y.append(y)
    out = {}
    for name, zs, ys in (("separated", sep_z, sep_y), ("random", rnd_z, rnd_y), ("noisy", noisy_z, noisy_y)):
        best, a, b = oracles.grid_platt(zs, ys)
        out[name] = {"z": zs, "y": ys, "grid_nll": best, "grid_a": a, "grid_b": b}
    return out


def checkerboard():
    img = [[[0] * 3, [255] * 3], [[255] * 3, [0] * 3]]
    samples = [(0, 0), (0, 255), (255, 0), (255, 255), (128, 64), (1, 1), (200, 37)]
    vals = oracles.bilinear_oracle(img, 256, 256, samples)
    return [{"i": i, "j": j, "value": [v / 255.0 for v in vals[(i, j)]]} for i, j in samples]


def queueing():
    out = {}
    for name, svc in (("InceptionV3", 66.19), ("MobileNet", 7.57)):
        done, dropped = oracles.des_drop_oldest(150, 40.0, svc, 8)
        out[name] = {"frames": 150, "service_ms": svc, "dropped": dropped, "processed": len(done)}
    return out


def cost_model():
    read, face, pose, infer = (10, 33), (10, 50), (20, 60), (5, 20)
    k360 = 640 * 360 / (1280 * 720)
    k480 = 854 * 480 / (1280 * 720)
    return {
        "mid_pose_off": oracles.feasibility_mid(read, face, pose, infer, 1, False),
        "mid_pose_on": oracles.feasibility_mid(read, face, pose, infer, 1, True),
        "lo_zero_faces": read[0] + face[0],
        "factor_360p": k360, "face_360p": [face[0] * k360, face[1] * k360],
        "factor_480p": k480, "face_480p": [face[0] * k480, face[1] * k480],
        "mid_skip2": oracles.feasibility_mid(read, face, pose, infer, 1, False, skip=2),
    }


def main():
    values = {
        "alert_crying_12s": alert_fixture(),
        "two_episodes": two_episode_fixture(),
        "sleep_250_counter_ms": oracles.brute_force_filter(["sleep"] * 250, None, 5, ["sleep", "awake"])[1]["sleep"],
        "platt": platt_fixtures(),
        "checkerboard": checkerboard(),
        "queueing": queueing(),
        "cost_model": cost_model(),
        "batch_schedule": oracles.flush_schedule([i * 10.0 for i in range(100)], 15000.0, 30000.0),
    }
    path = ROOT / "tests" / "derived_values.json"
    path.write_text(json.dumps(values, indent=1) + "\n")
    print(f"wrote {path}")


if __name__ == "__main__":
    main()
