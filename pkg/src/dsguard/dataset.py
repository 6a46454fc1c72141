"""Dataset loading, protection, restoration, and the on-disk layout.

Clean datasets come from CIFAR-10 binary files, class-directory trees, or
the flat images/ + labels.txt layout. Protected datasets are always written
to the frozen flat layout: images/NNNNNN.png (lossless PNG only), a
canonical JSON `manifest`, and labels.txt.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import (
    AuthenticationError,
    CapacityError,
    DatasetError,
    DsguardError,
    GeometryError,
    LossyFormatError,
    MalformedPayloadError,
    PlanFormatError,
)
from .fsp import GENERATORS, FeatureExtractor, PerturbConfig, choose_target
from .imageops import as_image
from .rit import (
    RitParams,
    build_plan,
    invert_plan,
    parse_plan,
    plan_serialized_size,
    serialize_plan,
)
from .stego import (
    HEADER_LEN,
    NONCE_LEN,
    TAG_LEN,
    KeyRecord,
    build_payload,
    decrypt_sequence,
    extract_payload,
    lsb_embed,
    parse_payload,
)

MANIFEST_NAME = "manifest"
LABELS_NAME = "labels.txt"
IMAGES_DIR = "images"
MANIFEST_VERSION = 1

CIFAR_RECORD_LEN = 3073
CIFAR_SIDE = 32
CIFAR_CLASSES = 10

LOSSLESS_EXTENSIONS = {".png", ".bmp"}
LOSSY_EXTENSIONS = {".jpg", ".jpeg", ".webp"}

_SALT_TAG = b"dsguard.nonce-salt.v1"


@dataclass
class DatasetRecord:
    index: int
    label: int
    image: np.ndarray
    source_name: str = ""


@dataclass
class ManifestEntry:
    index: int
    label: int
    nonce: str
    checksum: str


@dataclass
class Manifest:
    """Public bookkeeping that travels with a protected dataset (no secrets)."""

    params: dict
    key_id: str
    entries: list[ManifestEntry] = field(default_factory=list)
    dataset_checksum: str = ""
    format_version: int = MANIFEST_VERSION

    def to_json(self) -> str:
        obj = {
            "format_version": self.format_version,
            "params": self.params,
            "key_id": self.key_id,
            "entries": [vars(e) for e in self.entries],
            "dataset_checksum": self.dataset_checksum,
        }
        return json.dumps(obj, sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"manifest is not valid JSON: {exc}") from exc
        try:
            if obj["format_version"] != MANIFEST_VERSION:
                raise DatasetError(
                    f"unsupported manifest version {obj['format_version']}"
                )
            entries = [ManifestEntry(**e) for e in obj["entries"]]
            return cls(
                params=obj["params"],
                key_id=obj["key_id"],
                entries=entries,
                dataset_checksum=obj["dataset_checksum"],
                format_version=obj["format_version"],
            )
        except (KeyError, TypeError) as exc:
            raise DatasetError(f"manifest missing field: {exc}") from exc


@dataclass
class RestoreFailure:
    index: int
    reason: str


def image_checksum(image: np.ndarray) -> str:
    img = as_image(image)
    h = hashlib.sha256()
    h.update(np.asarray(img.shape, dtype=np.uint32).tobytes())
    h.update(img.tobytes())
    return h.hexdigest()


def _dataset_digest(records: list[DatasetRecord]) -> bytes:
    h = hashlib.sha256()
    h.update(len(records).to_bytes(8, "big"))
    for rec in records:
        h.update(rec.index.to_bytes(8, "big"))
        h.update(int(rec.label).to_bytes(4, "big", signed=True))
        img = as_image(rec.image)
        h.update(np.asarray(img.shape, dtype=np.uint32).tobytes())
        h.update(img.tobytes())
    return h.digest()


def derive_nonce(salt: bytes, index: int) -> bytes:
    return hashlib.sha256(salt + index.to_bytes(8, "big")).digest()[:NONCE_LEN]


def dataset_salt(key: KeyRecord, records: list[DatasetRecord]) -> bytes:
    """Per-dataset nonce salt: deterministic for identical inputs, distinct
    across datasets so one key never reuses a nonce."""
    return hashlib.sha256(
        _SALT_TAG + key.master_key + _dataset_digest(records)
    ).digest()[:16]


def load_cifar_binary(path) -> list[DatasetRecord]:
    """Read a CIFAR-10 binary file: per record 1 label byte + 3072 pixel
    bytes in channel-planar order, converted to interleaved 32x32x3."""
    data = Path(path).read_bytes()
    if len(data) % CIFAR_RECORD_LEN != 0:
        raise DatasetError(
            f"{path}: length {len(data)} not divisible by {CIFAR_RECORD_LEN}"
        )
    n = len(data) // CIFAR_RECORD_LEN
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD_LEN)
    labels = raw[:, 0]
    if n and labels.max() >= CIFAR_CLASSES:
        bad = int(np.argmax(labels >= CIFAR_CLASSES))
        raise DatasetError(
            f"{path}: record {bad} has label {labels[bad]} > {CIFAR_CLASSES - 1}"
        )
    records = []
    for i in range(n):
        planes = raw[i, 1:].reshape(3, CIFAR_SIDE, CIFAR_SIDE)
        records.append(
            DatasetRecord(
                index=i,
                label=int(labels[i]),
                image=np.ascontiguousarray(planes.transpose(1, 2, 0)),
                source_name=f"{path}#{i}",
            )
        )
    return records


def _load_image_file(path: Path) -> np.ndarray:
    ext = path.suffix.lower()
    if ext in LOSSY_EXTENSIONS:
        raise LossyFormatError(
            f"{path}: {ext} is a lossy format; the embedded payload would not "
            "survive re-encoding"
        )
    if ext not in LOSSLESS_EXTENSIONS:
        raise DatasetError(f"{path}: unsupported image extension {ext}")
    with PILImage.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.uint8)[:, :, np.newaxis]
        else:
            arr = np.asarray(img.convert("RGB"), dtype=np.uint8)
    return np.ascontiguousarray(arr)


def load_image_dir(root) -> list[DatasetRecord]:
    """Read a class-directory tree: one subdirectory per class, sorted names
    mapping to label ids, files in sorted order."""
    rootp = Path(root)
    if not rootp.is_dir():
        raise DatasetError(f"{root} is not a directory")
    classes = sorted(p for p in rootp.iterdir() if p.is_dir())
    records = []
    for label, cls_dir in enumerate(classes):
        for f in sorted(p for p in cls_dir.iterdir() if p.is_file()):
            if f.name.startswith("."):
                continue
            records.append(
                DatasetRecord(
                    index=len(records),
                    label=label,
                    image=_load_image_file(f),
                    source_name=str(f),
                )
            )
    return records


def load_flat_dir(root) -> list[DatasetRecord]:
    """Read the flat layout: images/NNNNNN.png plus labels.txt lines
    "NNNNNN <label>"."""
    rootp = Path(root)
    labels_path = rootp / LABELS_NAME
    images_dir = rootp / IMAGES_DIR
    if not labels_path.is_file() or not images_dir.is_dir():
        raise DatasetError(f"{root} is not a flat dataset (images/ + {LABELS_NAME})")
    records = []
    for line in labels_path.read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        name, label_s = line.split()
        path = images_dir / f"{name}.png"
        records.append(
            DatasetRecord(
                index=int(name),
                label=int(label_s),
                image=_load_image_file(path),
                source_name=str(path),
            )
        )
    return records


def load_dataset(path) -> list[DatasetRecord]:
    """Dispatch on the container: file -> CIFAR binary; directory with
    images/ + labels.txt -> flat layout; directory of subdirectories ->
    class tree."""
    p = Path(path)
    if p.is_file():
        return load_cifar_binary(p)
    if p.is_dir():
        if (p / LABELS_NAME).is_file() and (p / IMAGES_DIR).is_dir():
            return load_flat_dir(p)
        if any(child.is_dir() for child in p.iterdir()):
            return load_image_dir(p)
        if not any(p.iterdir()):
            return []
        raise DatasetError(f"{path}: unrecognized dataset layout")
    raise DatasetError(f"{path}: no such file or directory")


def _check_uniform(records: list[DatasetRecord]) -> tuple[int, int, int]:
    shapes = {as_image(r.image).shape for r in records}
    if len(shapes) > 1:
        raise GeometryError(f"dataset geometry not uniform: {sorted(shapes)}")
    return next(iter(shapes))


_FE_CACHE: dict[tuple[int, int], FeatureExtractor] = {}


def _get_extractor(seed: int, in_channels: int) -> FeatureExtractor:
    key = (seed, in_channels)
    if key not in _FE_CACHE:
        _FE_CACHE[key] = FeatureExtractor(seed, in_channels)
    return _FE_CACHE[key]


def _protect_one(args) -> tuple[int, np.ndarray]:
    (
        clean,
        target,
        index,
        nonce,
        params,
        pcfg,
        generator,
        master_key,
        key_id,
    ) = args
    try:
        fe = _get_extractor(pcfg.seed, clean.shape[2])
        rng = np.random.default_rng([pcfg.seed, index, 1])
        carrier = GENERATORS[generator](clean, target, fe, pcfg, rng)
        core, plan = build_plan(clean, carrier, params)
        key = KeyRecord(master_key=master_key, key_id=key_id)
        payload = build_payload(serialize_plan(plan), key, nonce)
        protected = lsb_embed(core, payload)
        return index, protected
    except DsguardError as exc:
        raise DatasetError(f"record {index}: {exc}") from exc


def protect_dataset(
    records: list[DatasetRecord],
    key: KeyRecord,
    params: RitParams | None = None,
    pcfg: PerturbConfig | None = None,
    generator: str = "fsp",
    jobs: int = 1,
) -> tuple[list[DatasetRecord], Manifest]:
    """Transform every record into its protected form and build the manifest.

    Deterministic: the same records, key, and configs produce byte-identical
    protected images and manifest, regardless of the worker count.
    """
    params = params or RitParams()
    pcfg = pcfg or PerturbConfig()
    if generator not in GENERATORS:
        raise DatasetError(
            f"unknown generator {generator!r}; choose from {sorted(GENERATORS)}"
        )
    manifest_params = {
        "block_size": params.block_size,
        "quant_step": params.quant_step,
        "sd_scale": params.sd_scale,
        "epsilon": pcfg.epsilon,
        "step_size": pcfg.step_size,
        "iterations": pcfg.iterations,
        "layer": pcfg.layer,
        "seed": pcfg.seed,
        "generator": generator,
    }
    manifest = Manifest(params=manifest_params, key_id=key.key_id.hex())
    if not records:
        manifest.dataset_checksum = hashlib.sha256(b"").hexdigest()
        return [], manifest

    h, w, c = _check_uniform(records)
    if h % params.block_size or w % params.block_size:
        raise GeometryError(
            f"dataset geometry {h}x{w} not divisible by block size "
            f"{params.block_size}"
        )
    n_blocks = (h // params.block_size) * (w // params.block_size)
    payload_bits = 8 * (HEADER_LEN + plan_serialized_size(n_blocks, c) + TAG_LEN)
    capacity = h * w * c
    if payload_bits > capacity:
        raise CapacityError(
            f"sequence payload needs {payload_bits} bits but {h}x{w}x{c} images "
            f"hold {capacity}; increase block_size"
        )
    salt = dataset_salt(key, records)
    images = [as_image(r.image) for r in records]
    labels = [r.label for r in records]
    single_class = len(set(labels)) < 2
    tasks = []
    for pos, rec in enumerate(records):
        # cross-class targeting needs a second class; degrade to self-target
        # (carrier == clean) so tiny single-class datasets still round-trip
        target_pos = pos if single_class else choose_target(labels, pos, pcfg.seed)
        tasks.append(
            (
                images[pos],
                images[target_pos],
                rec.index,
                derive_nonce(salt, rec.index),
                params,
                pcfg,
                generator,
                key.master_key,
                key.key_id,
            )
        )
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_protect_one, tasks, chunksize=4))
    else:
        results = [_protect_one(t) for t in tasks]

    protected_records = []
    checksum_stream = hashlib.sha256()
    for (index, protected), rec, task in zip(results, records, tasks):
        checksum = image_checksum(protected)
        checksum_stream.update(bytes.fromhex(checksum))
        manifest.entries.append(
            ManifestEntry(
                index=rec.index,
                label=rec.label,
                nonce=task[3].hex(),
                checksum=checksum,
            )
        )
        protected_records.append(
            DatasetRecord(
                index=rec.index,
                label=rec.label,
                image=protected,
                source_name=rec.source_name,
            )
        )
    manifest.dataset_checksum = checksum_stream.hexdigest()
    return protected_records, manifest


def restore_dataset(
    records: list[DatasetRecord], manifest: Manifest, key: KeyRecord
) -> tuple[list[DatasetRecord], list[RestoreFailure]]:
    """Invert protection record by record.

    A record that fails authentication (or any integrity check) is reported
    and skipped; the rest proceed. A key-id mismatch aborts outright. No
    image is ever emitted for a record whose payload did not authenticate.
    """
    if key.key_id.hex() != manifest.key_id:
        raise DatasetError(
            f"key id {key.key_id.hex()[:8]}... does not match manifest "
            f"{manifest.key_id[:8]}..."
        )
    entries = {e.index: e for e in manifest.entries}
    restored: list[DatasetRecord] = []
    failures: list[RestoreFailure] = []
    for rec in records:
        entry = entries.get(rec.index)
        if entry is None:
            failures.append(RestoreFailure(rec.index, "no manifest entry"))
            continue
        img = as_image(rec.image)
        if image_checksum(img) != entry.checksum:
            failures.append(RestoreFailure(rec.index, "checksum mismatch"))
            continue
        try:
            payload = parse_payload(extract_payload(img))
            if payload.nonce.hex() != entry.nonce:
                failures.append(RestoreFailure(rec.index, "nonce mismatch"))
                continue
            plan_bytes = decrypt_sequence(payload, key)
            plan = parse_plan(plan_bytes)
            recovered = invert_plan(img, plan)
        except AuthenticationError:
            failures.append(RestoreFailure(rec.index, "authentication failed"))
            continue
        except (MalformedPayloadError, PlanFormatError, CapacityError,
                GeometryError) as exc:
            failures.append(RestoreFailure(rec.index, str(exc)))
            continue
        restored.append(
            DatasetRecord(
                index=rec.index,
                label=entry.label,
                image=recovered,
                source_name=rec.source_name,
            )
        )
    return restored, failures


def write_flat(root, records: list[DatasetRecord]) -> None:
    """Write the flat layout: images/NNNNNN.png + labels.txt."""
    rootp = Path(root)
    (rootp / IMAGES_DIR).mkdir(parents=True, exist_ok=True)
    lines = []
    for rec in records:
        img = as_image(rec.image)
        name = f"{rec.index:06d}"
        pil = PILImage.fromarray(img[:, :, 0] if img.shape[2] == 1 else img)
        pil.save(rootp / IMAGES_DIR / f"{name}.png")
        lines.append(f"{name} {rec.label}")
    (rootp / LABELS_NAME).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_protected(root, records: list[DatasetRecord], manifest: Manifest) -> None:
    write_flat(root, records)
    (Path(root) / MANIFEST_NAME).write_text(manifest.to_json())


def load_manifest(root) -> Manifest:
    path = Path(root) / MANIFEST_NAME
    if not path.is_file():
        raise DatasetError(f"no manifest at {path}")
    return Manifest.from_json(path.read_text())


def load_protected(root) -> tuple[list[DatasetRecord], Manifest]:
    return load_flat_dir(root), load_manifest(root)
