"""Simulated remote attestation, per-client key agreement, and AEAD framing.

The attestation is an emulation: the aggregator side signs a fixed
"enclave measurement" constant with an experiment-local Ed25519 key, clients
verify it against the expected measurement, and both sides run an X25519
exchange whose HKDF output becomes the per-client AES-256-GCM key.  All
randomness is drawn from caller-supplied seeded generators so handshakes are
reproducible in tests.

Update framing (little-endian):

    magic "ESMF" | version u8 | client_id u32 | round u32 | payload_format u8
    | nonce 12B | ciphertext_len u64 | ciphertext||tag

The whole header is authenticated as associated data, nonces are
counter-derived (client_id, round, sub-counter), and the receiver rejects
replays of any previously accepted (client_id, round, nonce) triple.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey, Ed25519PublicKey)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey, X25519PublicKey)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

MAGIC = b"ESMF"
VERSION = 1
TAG_SIZE = 16
NONCE_SIZE = 12
HEADER = struct.Struct("<4sBIIB12sQ")  # magic, ver, client, round, fmt, nonce, ct_len

# Stand-in for an SGX MRENCLAVE value; constant for the whole emulation.
ENCLAVE_MEASUREMENT = hashlib.sha256(b"fedprune-enclave-v1").digest()


class SecureChannelError(Exception):
    pass


class AttestationError(SecureChannelError):
    pass


class DuplicateClientError(SecureChannelError):
    pass


class ReplayError(SecureChannelError):
    pass


class NonceExhaustionError(SecureChannelError):
    pass


@dataclass(frozen=True)
class ClientKey:
    client_id: int
    sk: bytes                # 256-bit symmetric key
    established_at: int      # round index of the handshake

    def __post_init__(self):
        if len(self.sk) != 32:
            raise ValueError("sk must be 32 bytes")


@dataclass(frozen=True)
class AttestationTranscript:
    client_id: int
    challenge: bytes         # 32B client nonce
    measurement: bytes       # reported enclave measurement
    enclave_pub: bytes       # enclave's ephemeral X25519 public key
    signature: bytes         # Ed25519 over (client_id, challenge, measurement, pub)
    client_pub: bytes        # client's ephemeral X25519 public key
    key_confirm: bytes       # HMAC-SHA256 of all fields under the derived key

    def signed_payload(self) -> bytes:
        return struct.pack("<I", self.client_id) + self.challenge + \
            self.measurement + self.enclave_pub

    def confirm_payload(self) -> bytes:
        return self.signed_payload() + self.client_pub


def _derive_sk(shared: bytes, transcript_payload: bytes) -> bytes:
    return hashlib.sha256(b"fedprune-sk-v1" + shared + transcript_payload).digest()


@dataclass(frozen=True)
class EncryptedUpdate:
    client_id: int
    round: int
    payload_format: int      # codec format byte: 0 dense, 1 csr
    nonce: bytes
    ciphertext: bytes        # includes the 16-byte GCM tag

    def header(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, self.client_id, self.round,
                           self.payload_format, self.nonce, len(self.ciphertext))

    def to_bytes(self) -> bytes:
        return self.header() + self.ciphertext

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EncryptedUpdate":
        if len(raw) < HEADER.size:
            raise SecureChannelError("record truncated")
        magic, ver, cid, rnd, fmt, nonce, ct_len = HEADER.unpack(raw[:HEADER.size])
        if magic != MAGIC:
            raise SecureChannelError("bad magic")
        if ver != VERSION:
            raise SecureChannelError(f"unsupported version {ver}")
        ct = raw[HEADER.size:]
        if len(ct) != ct_len:
            raise SecureChannelError("ciphertext length mismatch")
        return cls(cid, rnd, fmt, nonce, ct)


class TranscriptLog:
    """Append-only line-delimited JSON audit log."""

    def __init__(self, path: str | Path | None = None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def append(self, kind: str, **fields):
        rec = {"kind": kind, "ts": time.time(), **fields}
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as f:
                f.write(json.dumps(rec) + "\n")


class KeyManager:
    """Enclave-side key registry: one symmetric key per client per experiment,
    with replay tracking for accepted updates."""

    def __init__(self, seed: int = 0, log: TranscriptLog | None = None):
        self._rng = np.random.default_rng(seed)
        self.signing_key = Ed25519PrivateKey.from_private_bytes(self._rng.bytes(32))
        self.verify_key_bytes = self.signing_key.public_key().public_bytes_raw()
        self.keys: dict[int, ClientKey] = {}
        self._seen: set[tuple[int, int, bytes]] = set()
        self.log = log or TranscriptLog()

    # -- attestation / key agreement ------------------------------------

    def begin_attestation(self, client_id: int, challenge: bytes):
        """Respond to a client challenge with a signed quote and an ephemeral
        key-agreement public key.  Returns (quote fields, private half)."""
        if client_id in self.keys:
            raise DuplicateClientError(f"client {client_id} already registered")
        eph = X25519PrivateKey.from_private_bytes(self._rng.bytes(32))
        pub = eph.public_key().public_bytes_raw()
        payload = struct.pack("<I", client_id) + challenge + ENCLAVE_MEASUREMENT + pub
        sig = self.signing_key.sign(payload)
        return ENCLAVE_MEASUREMENT, pub, sig, eph

    def finish_attestation(self, transcript: AttestationTranscript,
                           eph: X25519PrivateKey, round_index: int) -> ClientKey:
        shared = eph.exchange(X25519PublicKey.from_public_bytes(transcript.client_pub))
        sk = _derive_sk(shared, transcript.signed_payload())
        expect = hmac.new(sk, transcript.confirm_payload(), hashlib.sha256).digest()
        if not hmac.compare_digest(expect, transcript.key_confirm):
            raise AttestationError("key confirmation failed")
        key = ClientKey(transcript.client_id, sk, round_index)
        self.keys[transcript.client_id] = key
        self.log.append("attestation", client_id=transcript.client_id,
                        measurement=transcript.measurement.hex(),
                        round=round_index)
        return key

    # -- decryption ------------------------------------------------------

    def decrypt_update(self, enc: EncryptedUpdate) -> bytes:
        """Plaintext iff the tag verifies with the header as associated data;
        rejects unknown clients and replays."""
        key = self.keys.get(enc.client_id)
        if key is None:
            raise SecureChannelError(f"unknown client {enc.client_id}")
        triple = (enc.client_id, enc.round, enc.nonce)
        if triple in self._seen:
            self.log.append("replay_rejected", client_id=enc.client_id, round=enc.round)
            raise ReplayError(f"replayed record from client {enc.client_id}")
        try:
            plaintext = AESGCM(key.sk).decrypt(enc.nonce, enc.ciphertext, enc.header())
        except InvalidTag as exc:
            self.log.append("tag_rejected", client_id=enc.client_id, round=enc.round)
            raise SecureChannelError("authentication tag mismatch") from exc
        self._seen.add(triple)
        return plaintext


class ClientChannel:
    """Client-side keying material and nonce bookkeeping."""

    def __init__(self, client_id: int, key: ClientKey,
                 transcript: AttestationTranscript):
        self.client_id = client_id
        self.key = key
        self.transcript = transcript
        self._subcounter: dict[int, int] = {}

    def encrypt_update(self, update_bytes: bytes, round_index: int,
                       payload_format: int) -> EncryptedUpdate:
        if round_index < 0:
            raise ValueError("round must be non-negative")
        sub = self._subcounter.get(round_index, 0)
        if sub > 0xFFFFFFFF:
            raise NonceExhaustionError("nonce sub-counter exhausted")
        self._subcounter[round_index] = sub + 1
        nonce = struct.pack("<III", self.client_id, round_index, sub)
        enc = EncryptedUpdate(self.client_id, round_index, payload_format, nonce, b"")
        ct = AESGCM(self.key.sk).encrypt(
            nonce, update_bytes,
            HEADER.pack(MAGIC, VERSION, self.client_id, round_index,
                        payload_format, nonce, len(update_bytes) + TAG_SIZE))
        return EncryptedUpdate(self.client_id, round_index, payload_format, nonce, ct)


def attest_and_exchange(client_id: int, manager: KeyManager,
                        rng: np.random.Generator,
                        round_index: int = 0) -> ClientChannel:
    """Full handshake; returns the client's channel.  The manager ends up
    holding an identical sk_i.  Raises AttestationError on any mismatch."""
    challenge = rng.bytes(32)
    measurement, enclave_pub, sig, eph = manager.begin_attestation(client_id, challenge)

    # client side: verify the quote before agreeing on a key
    payload = struct.pack("<I", client_id) + challenge + measurement + enclave_pub
    try:
        Ed25519PublicKey.from_public_bytes(manager.verify_key_bytes).verify(sig, payload)
    except InvalidSignature as exc:
        raise AttestationError("quote signature invalid") from exc
    if measurement != ENCLAVE_MEASUREMENT:
        raise AttestationError("unexpected enclave measurement")

    client_eph = X25519PrivateKey.from_private_bytes(rng.bytes(32))
    client_pub = client_eph.public_key().public_bytes_raw()
    shared = client_eph.exchange(X25519PublicKey.from_public_bytes(enclave_pub))
    sk = _derive_sk(shared, payload)
    transcript = AttestationTranscript(
        client_id=client_id, challenge=challenge, measurement=measurement,
        enclave_pub=enclave_pub, signature=sig, client_pub=client_pub,
        key_confirm=hmac.new(sk, payload + client_pub, hashlib.sha256).digest())

    manager.finish_attestation(transcript, eph, round_index)
    return ClientChannel(client_id, ClientKey(client_id, sk, round_index), transcript)


def verify_transcript(transcript: AttestationTranscript, verify_key_bytes: bytes,
                      sk: bytes) -> None:
    """Audit check: signature, measurement, and key confirmation must all
    hold; any mutated field raises AttestationError."""
    try:
        Ed25519PublicKey.from_public_bytes(verify_key_bytes).verify(
            transcript.signature, transcript.signed_payload())
    except InvalidSignature as exc:
        raise AttestationError("quote signature invalid") from exc
    if transcript.measurement != ENCLAVE_MEASUREMENT:
        raise AttestationError("unexpected enclave measurement")
    expect = hmac.new(sk, transcript.confirm_payload(), hashlib.sha256).digest()
    if not hmac.compare_digest(expect, transcript.key_confirm):
        raise AttestationError("key confirmation failed")
