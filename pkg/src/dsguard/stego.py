"""Encrypt the transformation recipe and hide it in the image's LSB plane.

Payload wire format (frozen): 4-byte magic "DSG1", 1-byte version, 4-byte
little-endian ciphertext length, 12-byte nonce, then AES-256-GCM ciphertext
with its 16-byte tag. The 21-byte header is authenticated as associated
data, so any tampering with it fails decryption loudly.
"""

from __future__ import annotations

import os
import secrets
from dataclasses import dataclass

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import (
    AuthenticationError,
    CapacityError,
    KeyFileError,
    MalformedPayloadError,
)
from .imageops import as_image

PAYLOAD_MAGIC = b"DSG1"
PAYLOAD_VERSION = 1
HEADER_LEN = 21
NONCE_LEN = 12
TAG_LEN = 16

KEY_MAGIC = b"DSGK"
KEY_LEN = 32
KEY_ID_LEN = 16


@dataclass(frozen=True)
class KeyRecord:
    """Master secret: 32-byte AES key plus a public 16-byte identifier."""

    master_key: bytes
    key_id: bytes

    def __post_init__(self):
        if len(self.master_key) != KEY_LEN:
            raise KeyFileError(f"master key must be {KEY_LEN} bytes")
        if len(self.key_id) != KEY_ID_LEN:
            raise KeyFileError(f"key id must be {KEY_ID_LEN} bytes")

    @classmethod
    def generate(cls) -> "KeyRecord":
        return cls(secrets.token_bytes(KEY_LEN), secrets.token_bytes(KEY_ID_LEN))

    def save(self, path) -> None:
        """Write the key file (magic + id + key) with owner-only permissions."""
        data = KEY_MAGIC + self.key_id + self.master_key
        fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
        try:
            os.write(fd, data)
        finally:
            os.close(fd)

    @classmethod
    def load(cls, path) -> "KeyRecord":
        try:
            with open(path, "rb") as fh:
                data = fh.read()
        except OSError as exc:
            raise KeyFileError(f"cannot read key file {path}: {exc}") from exc
        if len(data) != len(KEY_MAGIC) + KEY_ID_LEN + KEY_LEN:
            raise KeyFileError(f"key file {path} has wrong length {len(data)}")
        if data[:4] != KEY_MAGIC:
            raise KeyFileError(f"key file {path} has bad magic")
        return cls(key_id=data[4 : 4 + KEY_ID_LEN], master_key=data[4 + KEY_ID_LEN :])


def _header(ciphertext_len: int, nonce: bytes) -> bytes:
    return (
        PAYLOAD_MAGIC
        + bytes([PAYLOAD_VERSION])
        + ciphertext_len.to_bytes(4, "little")
        + nonce
    )


def encrypt_sequence(plan_bytes: bytes, key: KeyRecord, nonce: bytes) -> bytes:
    """AES-256-GCM over the plan bytes; returns ciphertext||tag.

    The payload header (magic, version, length, nonce) is bound in as
    associated data. Nonces must be unique per image under one key; the
    dataset layer derives them from the record index and a per-dataset salt.
    """
    if len(nonce) != NONCE_LEN:
        raise ValueError(f"nonce must be {NONCE_LEN} bytes")
    aad = _header(len(plan_bytes) + TAG_LEN, nonce)
    return AESGCM(key.master_key).encrypt(nonce, plan_bytes, aad)


def build_payload(plan_bytes: bytes, key: KeyRecord, nonce: bytes) -> bytes:
    """Header plus encrypted plan: the exact byte string that gets embedded."""
    ct = encrypt_sequence(plan_bytes, key, nonce)
    return _header(len(ct), nonce) + ct


@dataclass(frozen=True)
class SequencePayload:
    """Parsed form of an embedded payload."""

    version: int
    nonce: bytes
    ciphertext: bytes

    @property
    def total_len(self) -> int:
        return HEADER_LEN + len(self.ciphertext)

    def to_bytes(self) -> bytes:
        return _header(len(self.ciphertext), self.nonce) + self.ciphertext


def parse_payload_header(data: bytes) -> tuple[int, int, bytes]:
    """Validate the 21-byte prefix; returns (version, ciphertext_len, nonce)."""
    if len(data) < HEADER_LEN:
        raise MalformedPayloadError(f"payload header truncated ({len(data)} bytes)")
    if data[:4] != PAYLOAD_MAGIC:
        raise MalformedPayloadError("bad payload magic")
    version = data[4]
    if version != PAYLOAD_VERSION:
        raise MalformedPayloadError(f"unsupported payload version {version}")
    ct_len = int.from_bytes(data[5:9], "little")
    if ct_len < TAG_LEN:
        raise MalformedPayloadError(f"ciphertext length {ct_len} shorter than tag")
    return version, ct_len, data[9:HEADER_LEN]


def parse_payload(data: bytes) -> SequencePayload:
    version, ct_len, nonce = parse_payload_header(data)
    if len(data) != HEADER_LEN + ct_len:
        raise MalformedPayloadError(
            f"payload length {len(data)} != header-declared {HEADER_LEN + ct_len}"
        )
    return SequencePayload(version=version, nonce=nonce, ciphertext=data[HEADER_LEN:])


def decrypt_sequence(payload: bytes | SequencePayload, key: KeyRecord) -> bytes:
    """Recover the plan bytes, or fail loudly.

    Raises MalformedPayloadError for structural damage and
    AuthenticationError when the key, nonce, or any ciphertext byte is wrong.
    Unauthenticated plaintext is never returned.
    """
    p = parse_payload(payload) if isinstance(payload, (bytes, bytearray)) else payload
    aad = _header(len(p.ciphertext), p.nonce)
    try:
        return AESGCM(key.master_key).decrypt(p.nonce, p.ciphertext, aad)
    except InvalidTag as exc:
        raise AuthenticationError(
            "sequence authentication failed (wrong key or tampered payload)"
        ) from exc


def lsb_capacity(image: np.ndarray) -> int:
    """Embedding capacity in bits: one per channel sample."""
    img = as_image(image)
    return int(img.shape[0] * img.shape[1] * img.shape[2])


def lsb_embed(image: np.ndarray, payload: bytes) -> np.ndarray:
    """Write payload bits into sample LSBs, MSB of byte 0 first, row-major.

    Rejects oversized payloads before touching anything; no sample ever
    moves by more than one intensity unit.
    """
    img = as_image(image)
    nbits = 8 * len(payload)
    cap = lsb_capacity(img)
    if nbits > cap:
        raise CapacityError(f"payload needs {nbits} bits, image holds {cap}")
    out = img.copy()
    flat = out.reshape(-1)
    bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8))
    flat[:nbits] = (flat[:nbits] & 0xFE) | bits
    return out


def lsb_extract(image: np.ndarray, nbits: int) -> bytes:
    """Read nbits LSBs back (inverse bit layout of lsb_embed).

    Returns ceil(nbits/8) bytes; a trailing partial byte is zero-padded.
    """
    img = as_image(image)
    cap = lsb_capacity(img)
    if nbits < 0 or nbits > cap:
        raise CapacityError(f"cannot read {nbits} bits from capacity {cap}")
    bits = img.reshape(-1)[:nbits] & 1
    return np.packbits(bits).tobytes()


def extract_payload(image: np.ndarray) -> bytes:
    """Pull a full payload out of an image: header first, then the body."""
    img = as_image(image)
    if lsb_capacity(img) < 8 * HEADER_LEN:
        raise MalformedPayloadError("image too small to hold a payload header")
    head = lsb_extract(img, 8 * HEADER_LEN)
    _, ct_len, _ = parse_payload_header(head)
    total_bits = 8 * (HEADER_LEN + ct_len)
    if total_bits > lsb_capacity(img):
        raise MalformedPayloadError(
            f"declared payload ({HEADER_LEN + ct_len} bytes) exceeds image capacity"
        )
    return lsb_extract(img, total_bits)
