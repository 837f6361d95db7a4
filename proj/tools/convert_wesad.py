#!/usr/bin/env python3
"""Convert WESAD subject pickles to the adapter CSV read by `ecgstress import`.

Each WESAD/S<k>/S<k>.pkl holds the 700 Hz chest ECG and the 700 Hz condition
label stream; both are written unchanged, one sample per line.
"""

import argparse
import pathlib
import pickle
import sys


def convert(pkl: pathlib.Path, out_dir: pathlib.Path) -> pathlib.Path:
    with pkl.open("rb") as f:
        data = pickle.load(f, encoding="latin1")
    ecg = data["signal"]["chest"]["ECG"].reshape(-1)
    labels = data["label"].reshape(-1)
    if len(ecg) != len(labels):
        raise ValueError(f"{pkl}: {len(ecg)} ECG samples but {len(labels)} labels")
    out = out_dir / f"{pkl.stem}.csv"
    with out.open("w", newline="") as f:
        f.write("# fs_hz=700\necg,condition\n")
        for v, c in zip(ecg, labels):
            f.write(f"{float(v)!r},{int(c)}\n")
    return out


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("wesad_root", type=pathlib.Path, help="directory containing S2 ... S17")
    ap.add_argument("out_dir", type=pathlib.Path)
    args = ap.parse_args()
    args.out_dir.mkdir(parents=True, exist_ok=True)
    pickles = sorted(args.wesad_root.glob("S*/S*.pkl"))
    if not pickles:
        print(f"no S*/S*.pkl files under {args.wesad_root}", file=sys.stderr)
        return 1
    for pkl in pickles:
        print(convert(pkl, args.out_dir))
    return 0


if __name__ == "__main__":
    sys.exit(main())
