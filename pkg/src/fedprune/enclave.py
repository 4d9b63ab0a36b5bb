"""Emulated trusted enclave on the aggregation server.

Boundary crossings are instrumented: every encrypted update loaded counts as
one ecall and every model publication as one ocall, each charged with
measured wall time and copied through a bounded trusted scratch buffer.
Decrypted update tensors only ever exist wrapped in PlaintextUpdate, which
cannot be constructed outside this module's trusted section.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import codec
from .nn import LayerParams, ParameterSet, check_congruent
from .secure import EncryptedUpdate, KeyManager, SecureChannelError

_TRUSTED_TOKEN = object()


class TrustBoundaryError(RuntimeError):
    pass


class EnclaveMemoryError(RuntimeError):
    pass


class PlaintextUpdate:
    """Decrypted client update; constructible only inside the trusted section."""

    __slots__ = ("client_id", "params")

    def __init__(self, token, client_id: int, params: ParameterSet):
        if token is not _TRUSTED_TOKEN:
            raise TrustBoundaryError(
                "PlaintextUpdate can only be created inside the enclave")
        self.client_id = client_id
        self.params = params


@dataclass
class EnclaveContext:
    key_manager: KeyManager
    scratch_limit: int = 256 * 1024 * 1024   # trusted buffer budget, bytes
    ecall_count: int = 0
    ecall_time: float = 0.0
    ocall_count: int = 0
    ocall_time: float = 0.0

    def reset_timers(self):
        self.ecall_time = 0.0
        self.ocall_time = 0.0


@dataclass(frozen=True)
class AggregationRecord:
    client_id: int
    update: PlaintextUpdate
    example_count: int


@dataclass(frozen=True)
class AggregationInput:
    records: tuple[AggregationRecord, ...]


@dataclass(frozen=True)
class Rejection:
    client_id: int
    reason: str


def enclave_load(encs: list[EncryptedUpdate], ctx: EnclaveContext,
                 example_counts: dict[int, int]
                 ) -> tuple[AggregationInput, list[Rejection]]:
    """Decrypt and decode updates inside the trusted section.

    Each record is one ecall.  A failed decryption (bad tag, replay, unknown
    client, malformed payload) drops that client's contribution for the round
    and is reported; the rest proceed.
    """
    records = []
    rejections = []
    for enc in encs:
        t0 = time.perf_counter()
        ctx.ecall_count += 1
        try:
            wire = enc.to_bytes()
            if len(wire) > ctx.scratch_limit:
                raise EnclaveMemoryError(
                    f"update of {len(wire)} bytes exceeds trusted buffer "
                    f"({ctx.scratch_limit} bytes)")
            scratch = bytes(wire)              # copy across the boundary
            plaintext = ctx.key_manager.decrypt_update(
                EncryptedUpdate.from_bytes(scratch))
            params, _fmt = codec.decode_params(plaintext)
            n = example_counts.get(enc.client_id)
            if n is None or n <= 0:
                raise SecureChannelError(f"no example count for client {enc.client_id}")
            records.append(AggregationRecord(
                enc.client_id, PlaintextUpdate(_TRUSTED_TOKEN, enc.client_id, params), n))
        except (SecureChannelError, codec.CodecError, EnclaveMemoryError) as exc:
            rejections.append(Rejection(enc.client_id, str(exc)))
        finally:
            ctx.ecall_time += time.perf_counter() - t0
    return AggregationInput(tuple(records)), rejections


def fedavg(agg: AggregationInput) -> ParameterSet:
    """Example-count-weighted coordinate mean of the client updates.

    Summation runs in ascending client_id order so the result is bit-exact
    regardless of arrival order.
    """
    if not agg.records:
        raise ValueError("cannot aggregate an empty input")
    recs = sorted(agg.records, key=lambda r: r.client_id)
    first = recs[0].update.params
    for r in recs[1:]:
        check_congruent(first, r.update.params)
    total = float(sum(r.example_count for r in recs))
    entries = []
    for i, e in enumerate(first.entries):
        w = np.zeros_like(e.weight)
        b = np.zeros_like(e.bias)
        for r in recs:
            le = r.update.params.entries[i]
            w += (r.example_count / total) * le.weight
            b += (r.example_count / total) * le.bias
        entries.append(LayerParams(e.layer_id, w, b))
    return ParameterSet(tuple(entries))


def publish_model(params: ParameterSet, ctx: EnclaveContext) -> bytes:
    """Serialize the global model dense and export it across the boundary;
    one ocall."""
    t0 = time.perf_counter()
    ctx.ocall_count += 1
    blob = codec.dense_encode(params)
    if len(blob) > ctx.scratch_limit:
        ctx.ocall_time += time.perf_counter() - t0
        raise EnclaveMemoryError("published model exceeds trusted buffer")
    out = bytes(blob)                          # copy out of the enclave
    ctx.ocall_time += time.perf_counter() - t0
    return out
