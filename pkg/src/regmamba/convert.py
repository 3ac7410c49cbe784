"""Build a JSON-lines manifest from an on-disk optical/SAR dataset.

Two layouts are understood:

``paired-dirs``
    ``<root>/<optical_dir>/NAME`` paired with ``<root>/<sar_dir>/NAME`` (same file
    name in both folders), as in datasets shipped as ``opt/`` and ``sar/`` folders.
``sen12``
    Season/ROI folders where each scene has an ``s1_*`` (SAR) and an ``s2_*``
    (optical) subfolder and file names differ only in the ``_s1_`` / ``_s2_`` token,
    e.g. ``ROIs1158_spring/s1_1/ROIs1158_spring_s1_1_p30.png``.

SAR images are listed at full size without ground truth; templates are cropped
at training time. Usage::

    python -m regmamba.convert sen12 /data/SEN1-2 /data/SEN1-2/manifest.jsonl
    python -m regmamba.convert paired-dirs /data/OS /data/OS/manifest.jsonl --optical-dir opt --sar-dir sar
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .data import ManifestRecord, write_manifest

IMAGE_SUFFIXES = {".png", ".tif", ".tiff"}


def _images(d: Path) -> list[Path]:
    return sorted(p for p in d.rglob("*") if p.suffix.lower() in IMAGE_SUFFIXES)


def paired_dirs(root: Path, optical_dir: str = "opt", sar_dir: str = "sar") -> list[ManifestRecord]:
    opt_root, sar_root = root / optical_dir, root / sar_dir
    records = []
    for opt in _images(opt_root):
        rel = opt.relative_to(opt_root)
        sar = sar_root / rel
        if sar.is_file():
            records.append(ManifestRecord(opt, sar, rel.with_suffix("").as_posix()))
    return records


def sen12(root: Path) -> list[ManifestRecord]:
    records = []
    for sar in _images(root):
        if not sar.parent.name.startswith("s1_") or "_s1_" not in sar.name:
            continue
        opt = sar.parent.parent / sar.parent.name.replace("s1_", "s2_", 1) / sar.name.replace("_s1_", "_s2_", 1)
        if opt.is_file():
            records.append(ManifestRecord(opt, sar, sar.stem.replace("_s1_", "_", 1)))
    return records


def main(argv=None) -> int:
    p = argparse.ArgumentParser(prog="python -m regmamba.convert", description=__doc__.split("\n")[0])
    p.add_argument("layout", choices=["paired-dirs", "sen12"])
    p.add_argument("root", type=Path)
    p.add_argument("manifest", type=Path, help="output path; must lie under root")
    p.add_argument("--optical-dir", default="opt")
    p.add_argument("--sar-dir", default="sar")
    a = p.parse_args(argv)
    recs = sen12(a.root) if a.layout == "sen12" else paired_dirs(a.root, a.optical_dir, a.sar_dir)
    write_manifest(a.manifest, recs)
    print(f"{len(recs)} pairs -> {a.manifest}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
