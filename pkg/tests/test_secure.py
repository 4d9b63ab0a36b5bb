import dataclasses

import numpy as np
import pytest

from fedprune import secure
from fedprune.secure import (AttestationError, AttestationTranscript,
                             ClientChannel, ClientKey, DuplicateClientError,
                             EncryptedUpdate, KeyManager, ReplayError,
                             SecureChannelError, attest_and_exchange,
                             verify_transcript)


@pytest.fixture
def manager():
    return KeyManager(seed=7)


@pytest.fixture
def channel(manager):
    return attest_and_exchange(1, manager, np.random.default_rng(99))


class TestAttestation:
    def test_both_sides_same_key(self, manager):
        ch = attest_and_exchange(5, manager, np.random.default_rng(0))
        assert manager.keys[5].sk == ch.key.sk
        assert len(ch.key.sk) == 32

    def test_deterministic_under_seeds(self):
        keys = []
        for _ in range(2):
            m = KeyManager(seed=3)
            ch = attest_and_exchange(1, m, np.random.default_rng(4))
            keys.append(ch.key.sk)
        assert keys[0] == keys[1]

    def test_hundred_clients_distinct_keys(self, manager):
        rng = np.random.default_rng(1)
        for cid in range(100):
            attest_and_exchange(cid, manager, rng)
        assert len(manager.keys) == 100
        assert len({k.sk for k in manager.keys.values()}) == 100

    def test_duplicate_client_rejected(self, manager):
        rng = np.random.default_rng(1)
        attest_and_exchange(3, manager, rng)
        with pytest.raises(DuplicateClientError):
            attest_and_exchange(3, manager, rng)

    def test_any_mutated_transcript_field_fails(self, manager, channel):
        t = channel.transcript
        verify_transcript(t, manager.verify_key_bytes, channel.key.sk)  # sanity
        for fname in ("challenge", "measurement", "enclave_pub", "signature",
                      "client_pub", "key_confirm"):
            raw = bytearray(getattr(t, fname))
            raw[0] ^= 0x01
            bad = dataclasses.replace(t, **{fname: bytes(raw)})
            with pytest.raises(AttestationError):
                verify_transcript(bad, manager.verify_key_bytes, channel.key.sk)
        bad_id = dataclasses.replace(t, client_id=t.client_id + 1)
        with pytest.raises(AttestationError):
            verify_transcript(bad_id, manager.verify_key_bytes, channel.key.sk)

    def test_attestation_logged(self, manager, channel):
        kinds = [r["kind"] for r in manager.log.records]
        assert "attestation" in kinds

    def test_log_file_append_only(self, tmp_path):
        log = secure.TranscriptLog(tmp_path / "audit.log")
        m = KeyManager(seed=1, log=log)
        rng = np.random.default_rng(0)
        attest_and_exchange(0, m, rng)
        attest_and_exchange(1, m, rng)
        lines = (tmp_path / "audit.log").read_text().splitlines()
        assert len(lines) == 2


class TestEncryptDecrypt:
    def test_roundtrip(self, manager, channel):
        enc = channel.encrypt_update(b"hello update", round_index=0, payload_format=1)
        assert manager.decrypt_update(enc) == b"hello update"

    def test_ciphertext_length_contract(self, channel):
        for n in (0, 1, 100, 4096):
            enc = channel.encrypt_update(b"x" * n, 0, 0)
            assert len(enc.ciphertext) == n + secure.TAG_SIZE

    def test_same_plaintext_distinct_ciphertexts(self, channel):
        a = channel.encrypt_update(b"same", 0, 0)
        b = channel.encrypt_update(b"same", 0, 0)
        assert a.nonce != b.nonce
        assert a.ciphertext != b.ciphertext

    def test_unknown_client_rejected(self, manager):
        ch = ClientChannel(42, ClientKey(42, bytes(32), 0),
                           transcript=None)
        enc = ch.encrypt_update(b"p", 0, 0)
        with pytest.raises(SecureChannelError):
            manager.decrypt_update(enc)

    def test_replay_rejected(self, manager, channel):
        enc = channel.encrypt_update(b"p", 3, 0)
        assert manager.decrypt_update(enc) == b"p"
        with pytest.raises(ReplayError):
            manager.decrypt_update(enc)

    def test_header_field_mutation_rejected(self, manager, channel):
        # flip one bit in every byte position of the header and the payload
        enc = channel.encrypt_update(b"payload bytes", 7, 1)
        wire = enc.to_bytes()
        for pos in range(len(wire)):
            raw = bytearray(wire)
            raw[pos] ^= 0x01
            with pytest.raises(SecureChannelError):
                manager.decrypt_update(EncryptedUpdate.from_bytes(bytes(raw)))

    def test_wrong_round_in_header_rejected(self, manager, channel):
        enc = channel.encrypt_update(b"p", 2, 0)
        forged = dataclasses.replace(enc, round=9)
        with pytest.raises(SecureChannelError):
            manager.decrypt_update(forged)

    def test_nonce_uniqueness_over_many_encryptions(self, channel):
        seen = set()
        for rnd in range(100):
            for _ in range(100):
                enc = channel.encrypt_update(b"", rnd, 0)
                seen.add(enc.nonce)
        assert len(seen) == 10_000

    def test_negative_round_rejected(self, channel):
        with pytest.raises(ValueError):
            channel.encrypt_update(b"p", -1, 0)

    def test_wire_roundtrip(self, channel):
        enc = channel.encrypt_update(b"abc", 1, 1)
        back = EncryptedUpdate.from_bytes(enc.to_bytes())
        assert back == enc
