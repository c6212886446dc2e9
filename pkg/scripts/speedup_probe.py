"""Achieved throughput per worker count with a compute-bound latency-model backend.

Busy mode burns CPU time, so the numbers only improve with worker count when
the host has cores to spare.
"""

import argparse
import os

from cribwatch.frames import Region, Resolution, Timeline, synth_stream
from cribwatch.pipeline import PipelineConfig, parallel_speedup_probe


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--profile", default="ResNet")
    ap.add_argument("--workers", default="1,2,4")
    ap.add_argument("--frames", type=int, default=120)
    ap.add_argument("--wait", choices=["busy", "sleep"], default="busy")
    ap.add_argument("--executor", choices=["process", "thread"], default="process")
    args = ap.parse_args()

    script = (Timeline(resolution=Resolution(160, 120))
              .add("crying", args.frames * 40.0, Region(40, 30, 60, 50)).build())
    cfg = PipelineConfig(resolution=script.resolution, queue_capacity=16,
                         backend={"kind": "latency_model", "profile": args.profile, "wait": args.wait})
    workers = [int(w) for w in args.workers.split(",")]
    fps = parallel_speedup_probe(cfg, workers, lambda: synth_stream(script), executor=args.executor)
    cores = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count()
    print(f"host cores: {cores}")
    base = fps[workers[0]]
    for w in workers:
        print(f"workers={w} fps={fps[w]:.2f} speedup={fps[w] / base:.2f}")


if __name__ == "__main__":
    main()
