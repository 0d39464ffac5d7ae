#!/usr/bin/env python3
"""Convert NASA PCoE battery .mat files (B0005.mat, ...) to canonical CSV.

Only discharge cycles are kept and renumbered 1, 2, ... in file order.
Samples with non-increasing time are dropped. Usage:

    tools/nasa_to_csv.py --rated 2.0 --out data/nasa B0005.mat B0006.mat B0007.mat B0018.mat
"""

import argparse
import csv
import pathlib
import sys

import numpy as np
from scipy.io import loadmat

HEADER = ["battery_id", "rated_capacity_ah", "cycle", "capacity_ah", "time_s",
          "vm_v", "cm_a", "vl_v", "cl_a", "temp_c"]


def discharge_cycles(mat_path):
    battery_id = pathlib.Path(mat_path).stem
    root = loadmat(mat_path, simplify_cells=True)[battery_id]
    for entry in root["cycle"]:
        if str(entry["type"]).strip() != "discharge":
            continue
        data = entry["data"]
        capacity = float(np.ravel(data["Capacity"])[0])
        cols = [np.ravel(data[k]).astype(float) for k in
                ("Time", "Voltage_measured", "Current_measured", "Voltage_load",
                 "Current_load", "Temperature_measured")]
        n = min(len(c) for c in cols)
        yield capacity, np.stack([c[:n] for c in cols], axis=1)


def convert(mat_path, out_dir, rated):
    battery_id = pathlib.Path(mat_path).stem
    out = pathlib.Path(out_dir) / f"{battery_id}.csv"
    cycle = 0
    dropped = 0
    with open(out, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(HEADER)
        for capacity, rows in discharge_cycles(mat_path):
            keep = np.concatenate([[True], np.diff(rows[:, 0]) > 0])
            # a later sample can still be behind an earlier kept one
            last = -np.inf
            for i in range(len(rows)):
                keep[i] = keep[i] and rows[i, 0] > last
                if keep[i]:
                    last = rows[i, 0]
            rows = rows[keep & np.all(np.isfinite(rows), axis=1)]
            if len(rows) < 2 or not capacity > 0:
                dropped += 1
                continue
            cycle += 1
            for row in rows.tolist():
                w.writerow([battery_id, repr(rated), cycle, repr(capacity)] + [repr(v) for v in row])
    print(f"{out}: {cycle} discharge cycles ({dropped} unusable dropped)", file=sys.stderr)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("mat", nargs="+")
    ap.add_argument("--out", required=True)
    ap.add_argument("--rated", type=float, default=2.0, help="rated capacity in Ah")
    args = ap.parse_args()
    pathlib.Path(args.out).mkdir(parents=True, exist_ok=True)
    for m in args.mat:
        convert(m, args.out, args.rated)


if __name__ == "__main__":
    main()
