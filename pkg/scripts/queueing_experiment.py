"""Realtime drop counts per latency profile, next to a discrete-event prediction.

Streams the crying_12s fixture at 25 FPS through each bundled profile and
prints measured drops alongside the drop count a single-server drop-oldest
queue would produce with the measured per-frame service time.
"""

import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))

from oracles import des_drop_oldest  # noqa: E402
from cribwatch.classify import load_profiles  # noqa: E402
from cribwatch.frames import load_scenario, synth_stream  # noqa: E402
from cribwatch.pipeline import PipelineConfig, run  # noqa: E402

SERVICE_STAGES = ("to_rgb", "detect", "preprocess", "classify", "filter", "telemetry")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--frames", type=int, default=150)
    ap.add_argument("--fps", type=float, default=25.0)
    ap.add_argument("--queue", type=int, default=8)
    args = ap.parse_args()

    script = load_scenario("crying_12s.scn")
    print("profile,profile_mean_ms,service_ms,dropped,des_dropped,processed")
    for prof in load_profiles():
        cfg = PipelineConfig(resolution=script.resolution, fps=args.fps, mode="realtime",
                             queue_capacity=args.queue,
                             backend={"kind": "latency_model", "profile": prof.name})
        rep = run(synth_stream(script, args.frames), cfg)
        service = sum(v.mean_ms for k, v in rep.stage_latency.items() if k in SERVICE_STAGES)
        _, des = des_drop_oldest(args.frames, 1000.0 / args.fps, service, args.queue)
        print(f"{prof.name},{prof.mean_ms},{service:.2f},{rep.frames_dropped},{des},{rep.frames_processed}")


if __name__ == "__main__":
    main()
