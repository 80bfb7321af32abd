"""Desk-scale detection, uncertainty and likelihood run, printed and saved as JSON.

    python scripts/run_desk.py                          # FashionMNIST vs MNIST
    python scripts/run_desk.py --dataset animalmnist    # stand-in ID set
    python scripts/run_desk.py --gamma 1 --epochs 50 --out runs/desk.json
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from incpvae.desk import DeskConfig, run


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    for f in dataclasses.fields(DeskConfig):
        if f.name in ("hidden", "noise_levels"):
            continue
        kind = type(f.default) if f.default is not None else str
        ap.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, type=kind, default=None)
    ap.add_argument("--no-vae", action="store_true", help="skip the plain-VAE likelihood control")
    ap.add_argument("--out", type=Path)
    args = vars(ap.parse_args(argv))
    out, no_vae = args.pop("out"), args.pop("no_vae")
    cfg = DeskConfig(**{k: v for k, v in args.items() if v is not None})
    try:
        result = run(cfg, with_vae=not no_vae).to_dict()
    except FileNotFoundError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    text = json.dumps(result, indent=2, default=str)
    print(text)
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
