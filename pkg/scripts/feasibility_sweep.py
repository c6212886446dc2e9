"""Print the per-frame cost model over resolution, faces, pose and frame skipping."""

import argparse

from cribwatch.bench import feasibility_sweep, load_cost_model, write_feasibility_csv
from cribwatch.frames import Resolution


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--model", help="cost model JSON; bundled table by default")
    ap.add_argument("--csv", help="also write the rows here")
    args = ap.parse_args()

    model = load_cost_model(args.model)
    resolutions = [Resolution.parse(r) for r in ("720p", "480p", "360p")]
    rows = feasibility_sweep(model, resolutions, faces=[1, 2, 5], pose=[False, True], skips=[1, 2, 3],
                             fps=[30.0, 25.0])
    print(f"{'res':>9} {'faces':>5} {'pose':>4} {'skip':>4} {'fps':>4} {'lo':>7} {'mid':>7} {'hi':>7}  limiting")
    for r in rows:
        mark = "ok" if r.feasible_mid else "--"
        print(f"{str(r.resolution):>9} {r.max_faces:>5} {'on' if r.include_pose else 'off':>4} {r.skip:>4} "
              f"{r.target_fps:>4g} {r.per_frame_ms.lo:7.2f} {r.per_frame_ms.mid:7.2f} {r.per_frame_ms.hi:7.2f}"
              f"  {r.limiting_stage} {mark}")
    feasible = [r for r in rows if r.feasible_mid]
    print(f"{len(feasible)}/{len(rows)} configurations fit the frame budget at the midpoint")
    if args.csv:
        write_feasibility_csv(args.csv, rows)


if __name__ == "__main__":
    main()
