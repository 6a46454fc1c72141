"""Command-line surface: protect, restore, verify, stats.

Exit codes: 0 success, 1 runtime failure, 2 usage/validation error. The key
path resolves as --key flag, then the DSGUARD_KEY environment variable,
then (for protect) "<output>.key". Every command validates its full
configuration before writing anything.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import statistics
import sys
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import dataset as ds
from .errors import DsguardError
from .fsp import GENERATORS, PerturbConfig
from .imageops import psnr
from .rit import RitParams, plan_serialized_size
from .stego import HEADER_LEN, TAG_LEN, KeyRecord, lsb_capacity

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
KEY_ENV = "DSGUARD_KEY"


class UsageError(Exception):
    pass


def _key_path(args, default: str | None = None) -> Path:
    if args.key:
        return Path(args.key)
    env = os.environ.get(KEY_ENV)
    if env:
        return Path(env)
    if default is not None:
        return Path(default)
    raise UsageError(f"no key path: pass --key or set {KEY_ENV}")


def _build_configs(args) -> tuple[RitParams, PerturbConfig]:
    try:
        params = RitParams(block_size=args.block_size, quant_step=args.quant_step)
        pcfg = PerturbConfig(
            epsilon=args.epsilon,
            step_size=args.step_size,
            iterations=args.iterations,
            layer=args.layer,
            seed=args.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.generator not in GENERATORS:
        raise UsageError(
            f"unknown generator {args.generator!r}; choose from {sorted(GENERATORS)}"
        )
    return params, pcfg


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} {path} does not exist")
    return path


def _fmt_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.2f}"


def _json_psnr(value: float):
    return "inf" if math.isinf(value) else round(value, 4)


def cmd_protect(args) -> int:
    params, pcfg = _build_configs(args)
    input_path = _require(Path(args.input), "input dataset")
    output = Path(args.output)
    key_path = _key_path(args, default=str(output) + ".key")
    records = ds.load_dataset(input_path)
    if args.limit:
        records = records[: args.limit]

    if key_path.exists():
        key = KeyRecord.load(key_path)
        wrote_key = False
    else:
        key = KeyRecord.generate()
        wrote_key = True

    protected, manifest = ds.protect_dataset(
        records, key, params, pcfg, generator=args.generator, jobs=args.jobs
    )
    output.mkdir(parents=True, exist_ok=True)
    if wrote_key:
        key.save(key_path)
    ds.write_protected(output, protected, manifest)

    if records:
        mean_psnr = statistics.mean(
            psnr(p.image, c.image) for p, c in zip(protected, records)
        )
        h, w, ch = protected[0].image.shape
        n_blocks = (h // params.block_size) * (w // params.block_size)
        payload_bits = 8 * (
            HEADER_LEN + plan_serialized_size(n_blocks, ch) + TAG_LEN
        )
        capacity = lsb_capacity(protected[0].image)
        print(f"protected {len(protected)} records -> {output}")
        print(f"mean PSNR(protected, clean): {_fmt_psnr(mean_psnr)} dB")
        print(
            f"capacity headroom: {capacity - payload_bits} bits "
            f"({payload_bits}/{capacity} used)"
        )
    else:
        print(f"protected 0 records -> {output}")
    print(f"key file: {key_path}")
    return EXIT_OK


def cmd_restore(args) -> int:
    input_path = _require(Path(args.input), "protected dataset")
    key_path = _require(_key_path(args), "key file")
    output = Path(args.output)
    records, manifest = ds.load_protected(input_path)
    key = KeyRecord.load(key_path)
    restored, failures = ds.restore_dataset(records, manifest, key)
    output.mkdir(parents=True, exist_ok=True)
    ds.write_flat(output, restored)
    for f in failures:
        print(f"record {f.index:06d}: {f.reason}", file=sys.stderr)
    print(f"restored {len(restored)}/{len(records)} records -> {output}")
    return EXIT_OK if not failures else EXIT_RUNTIME


def _contact_sheet(
    triples: list[tuple[np.ndarray, np.ndarray, np.ndarray]], path: Path, scale: int = 2
) -> None:
    """Tile (clean | protected | recovered) rows into one PNG."""
    gap, cells = 2, []
    for triple in triples:
        row = []
        for img in triple:
            big = np.repeat(np.repeat(img, scale, axis=0), scale, axis=1)
            if big.shape[2] == 1:
                big = np.repeat(big, 3, axis=2)
            row.append(big)
        cells.append(row)
    ch, cw, _ = cells[0][0].shape
    sheet = np.full(
        (len(cells) * (ch + gap) - gap, 3 * (cw + gap) - gap, 3), 255, dtype=np.uint8
    )
    for r, row in enumerate(cells):
        for c, img in enumerate(row):
            y, x = r * (ch + gap), c * (cw + gap)
            sheet[y : y + ch, x : x + cw] = img
    PILImage.fromarray(sheet).save(path)


def cmd_verify(args) -> int:
    clean_path = _require(Path(args.clean), "clean dataset")
    protected_path = _require(Path(args.protected), "protected dataset")
    key_path = _require(_key_path(args), "key file")
    report_dir = Path(args.report)

    clean = ds.load_dataset(clean_path)
    protected, manifest = ds.load_protected(protected_path)
    key = KeyRecord.load(key_path)

    clean_by_index = {r.index: r for r in clean}
    report: dict = {
        "clean_records": len(clean),
        "protected_records": len(protected),
        "flags": {},
        "failures": [],
    }
    if not protected:
        report["stats"] = None
        report_dir.mkdir(parents=True, exist_ok=True)
        (report_dir / "report.json").write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n"
        )
        print("empty dataset: nothing to verify")
        return EXIT_OK

    restored, failures = ds.restore_dataset(protected, manifest, key)
    report["failures"] = [{"index": f.index, "reason": f.reason} for f in failures]

    psnr_protected, psnr_recovered = [], []
    identical = 0
    triples = []
    restored_by_index = {r.index: r for r in restored}
    for prot in protected:
        cl = clean_by_index.get(prot.index)
        if cl is None:
            continue
        p = psnr(prot.image, cl.image)
        psnr_protected.append(p)
        if math.isinf(p):
            identical += 1
        rec = restored_by_index.get(prot.index)
        if rec is not None:
            psnr_recovered.append(psnr(rec.image, cl.image))
            if len(triples) < args.samples:
                triples.append((cl.image, prot.image, rec.image))

    report["flags"]["protected_identical_to_clean"] = identical == len(psnr_protected)
    report["flags"]["clean_coverage_incomplete"] = len(psnr_protected) != len(
        protected
    )
    report["stats"] = {
        "psnr_protected_vs_clean_median": _json_psnr(
            statistics.median(psnr_protected)
        ),
        "psnr_recovered_vs_clean_median": _json_psnr(
            statistics.median(psnr_recovered)
        )
        if psnr_recovered
        else None,
        "psnr_recovered_vs_clean_min": _json_psnr(min(psnr_recovered))
        if psnr_recovered
        else None,
        "restored": len(restored),
        "failed": len(failures),
    }

    report_dir.mkdir(parents=True, exist_ok=True)
    (report_dir / "report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n"
    )
    if triples:
        _contact_sheet(triples, report_dir / "triplets.png")

    s = report["stats"]
    print(f"records: {len(protected)} protected, {len(restored)} restored")
    print(f"median PSNR(protected, clean): {s['psnr_protected_vs_clean_median']} dB")
    print(f"median PSNR(recovered, clean): {s['psnr_recovered_vs_clean_median']} dB")
    print(f"min    PSNR(recovered, clean): {s['psnr_recovered_vs_clean_min']} dB")
    if report["flags"]["protected_identical_to_clean"]:
        print("FLAG: protected dataset is identical to clean input", file=sys.stderr)
    for f in failures:
        print(f"record {f.index:06d}: {f.reason}", file=sys.stderr)
    return EXIT_OK


def cmd_stats(args) -> int:
    input_path = _require(Path(args.input), "dataset")
    records = ds.load_dataset(input_path)
    out: dict = {"path": str(input_path), "records": len(records)}
    if records:
        h, w, c = records[0].image.shape
        out["geometry"] = {"height": h, "width": w, "channels": c}
        out["classes"] = len({r.label for r in records})
        out["lsb_capacity_bits"] = lsb_capacity(records[0].image)
    manifest_path = Path(input_path) / ds.MANIFEST_NAME
    if input_path.is_dir() and manifest_path.is_file():
        manifest = ds.load_manifest(input_path)
        entries = {e.index: e for e in manifest.entries}
        ok = sum(
            1
            for r in records
            if r.index in entries
            and ds.image_checksum(r.image) == entries[r.index].checksum
        )
        out["manifest"] = {
            "params": manifest.params,
            "key_id": manifest.key_id,
            "entries": len(manifest.entries),
            "checksums_verified": ok,
        }
    print(json.dumps(out, sort_keys=True, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dsguard",
        description="Protect an image dataset against unauthorized training; "
        "restore it with the secret key.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("protect", help="transform a clean dataset into a protected one")
    p.add_argument("input", help="clean dataset: CIFAR-10 .bin, class tree, or flat dir")
    p.add_argument("output", help="output directory for the protected dataset")
    p.add_argument("--key", help="key file path (created if absent)")
    p.add_argument("--block-size", type=int, default=4)
    p.add_argument("--quant-step", type=int, default=4)
    p.add_argument("--epsilon", type=float, default=16 / 255)
    p.add_argument("--step-size", type=float, default=2 / 255)
    p.add_argument("--iterations", type=int, default=40)
    p.add_argument("--layer", type=int, default=2, choices=(1, 2))
    p.add_argument("--generator", default="fsp")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--limit", type=int, default=0, help="use only the first N records")
    p.set_defaults(func=cmd_protect)

    p = sub.add_parser("restore", help="recover clean images with the secret key")
    p.add_argument("input", help="protected dataset directory")
    p.add_argument("output", help="output directory for recovered images")
    p.add_argument("--key", help="key file path")
    p.set_defaults(func=cmd_restore)

    p = sub.add_parser("verify", help="restore in memory and report quality stats")
    p.add_argument("--clean", required=True, help="original clean dataset")
    p.add_argument("--protected", required=True, help="protected dataset directory")
    p.add_argument("--key", help="key file path")
    p.add_argument("--report", required=True, help="directory for report artifacts")
    p.add_argument("--samples", type=int, default=8, help="triplet rows in the sheet")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("stats", help="machine-readable dataset facts")
    p.add_argument("input", help="dataset path")
    p.set_defaults(func=cmd_stats)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DsguardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
