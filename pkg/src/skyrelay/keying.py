"""Temporal key chain and credential envelopes.

The coordinator and each shared worker agree on a chain of epoch keys
derived from the worker's process id and a start time, then rotate in
lockstep on a fixed interval.  Storage credentials handed to a shared
worker are encrypted under a per-user key derived from the epoch key and a
fresh random value, so an instance owner who inspects the channel later
cannot recover them.

Byte encodings are pinned so both sides agree bit-exactly: pid is 16 raw
bytes, timestamps are 8-byte big-endian seconds, and concatenation is plain
byte concatenation.  The hash is SHA-256 throughout.

Rotation timestamps come from the schedule (t0 + n * interval_s), never
from the wall clock at rotation time, which keeps the chain deterministic
on both sides.
"""

from __future__ import annotations

import base64
import json
import os
import struct
from dataclasses import dataclass
from hashlib import sha256

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .core import CredentialSet, canonical_json
from .errors import CredentialAuthFailure, InvalidOffset

PID_BYTES = 16
KEY_BYTES = 32
NONCE_BYTES = 12
R_BYTES = 32

OFFSET_MIN = 1
OFFSET_MAX = 512
DEFAULT_INTERVAL_S = 180


def _be64(t: int) -> bytes:
    return struct.pack(">Q", t)


def round_minute(t: float) -> int:
    s = int(t)
    return s - s % 60


def _check_offset(offset_s: int):
    if not OFFSET_MIN <= offset_s <= OFFSET_MAX:
        raise InvalidOffset(f"offset_s must be in [{OFFSET_MIN}, {OFFSET_MAX}], got {offset_s}")


def initial_server_key(pid: bytes, t: float) -> bytes:
    """Epoch-0 key: H(pid || be64(minute(t)))."""
    if len(pid) != PID_BYTES:
        raise ValueError(f"pid must be {PID_BYTES} bytes")
    return sha256(pid + _be64(round_minute(t))).digest()


def rotate_key(key: bytes, epoch_time: float, offset_s: int) -> bytes:
    """Next key: H(key || be64(minute(epoch_time) + offset_s)).

    epoch_time for epoch n is t0 + n * interval_s.  The offset keeps the
    hashed timestamp off the exact minute boundary.
    """
    _check_offset(offset_s)
    return sha256(key + _be64(round_minute(epoch_time) + offset_s)).digest()


def key_at_epoch(pid: bytes, t0: float, offset_s: int, interval_s: int, epoch: int) -> bytes:
    """Fold the whole chain from scratch; O(epoch)."""
    key = initial_server_key(pid, t0)
    t0m = round_minute(t0)
    for n in range(1, epoch + 1):
        key = rotate_key(key, t0m + n * interval_s, offset_s)
    return key


@dataclass
class EpochKeyState:
    """One side's view of the chain.

    Mutated only by a single rotation driver; other threads must work from
    snapshots or hold the owner's lock.  key_previous is kept for exactly
    one epoch so envelopes sealed just before a rotation still open.
    """

    pid: bytes
    t0: int
    offset_s: int
    interval_s: int
    epoch: int
    key_current: bytes
    key_previous: bytes | None

    @classmethod
    def create(cls, pid: bytes, t: float, offset_s: int,
               interval_s: int = DEFAULT_INTERVAL_S) -> EpochKeyState:
        _check_offset(offset_s)
        if interval_s <= 0:
            raise ValueError("interval_s must be positive")
        t0 = round_minute(t)
        return cls(
            pid=pid,
            t0=t0,
            offset_s=offset_s,
            interval_s=interval_s,
            epoch=0,
            key_current=initial_server_key(pid, t0),
            key_previous=None,
        )

    def rotate(self) -> None:
        next_epoch = self.epoch + 1
        self.key_previous = self.key_current
        self.key_current = rotate_key(
            self.key_current, self.t0 + next_epoch * self.interval_s, self.offset_s
        )
        self.epoch = next_epoch

    def rotate_to(self, epoch: int) -> None:
        while self.epoch < epoch:
            self.rotate()

    def next_rotation_at(self) -> int:
        return self.t0 + (self.epoch + 1) * self.interval_s


def derive_user_key(k_serv: bytes, r: bytes) -> bytes:
    """Per-user key: H(k_serv || r)."""
    return sha256(k_serv + r).digest()


@dataclass
class UserKeyGrant:
    """A user key plus the public material needed to re-derive it."""

    r: bytes
    key: bytes
    epoch_issued: int


def issue_user_grant(state: EpochKeyState) -> UserKeyGrant:
    r = os.urandom(R_BYTES)
    return UserKeyGrant(r=r, key=derive_user_key(state.key_current, r), epoch_issued=state.epoch)


@dataclass
class CredentialCiphertext:
    """Sealed credentials plus the material the worker needs to open them."""

    nonce: bytes
    body: bytes
    r: bytes
    epoch_hint: int

    def to_wire(self) -> dict:
        return {
            "nonce": base64.b64encode(self.nonce).decode("ascii"),
            "body": base64.b64encode(self.body).decode("ascii"),
            "r": base64.b64encode(self.r).decode("ascii"),
            "epoch_hint": self.epoch_hint,
        }

    @classmethod
    def from_wire(cls, d: dict) -> CredentialCiphertext:
        return cls(
            nonce=base64.b64decode(d["nonce"]),
            body=base64.b64decode(d["body"]),
            r=base64.b64decode(d["r"]),
            epoch_hint=d["epoch_hint"],
        )


def encrypt_credentials(key: bytes, sc: CredentialSet, r: bytes,
                        epoch_hint: int) -> CredentialCiphertext:
    """Seal sc under an already-derived user key (AES-256-GCM, fresh nonce)."""
    nonce = os.urandom(NONCE_BYTES)
    body = AESGCM(key).encrypt(nonce, canonical_json(sc.to_wire()), None)
    return CredentialCiphertext(nonce=nonce, body=body, r=r, epoch_hint=epoch_hint)


def seal_credentials(state: EpochKeyState, sc: CredentialSet) -> CredentialCiphertext:
    """Issue a grant at the current epoch and seal sc with it."""
    grant = issue_user_grant(state)
    return encrypt_credentials(grant.key, sc, grant.r, grant.epoch_issued)


def decrypt_credentials(state: EpochKeyState, ct: CredentialCiphertext) -> CredentialSet:
    """Open a credential envelope against the worker's chain state.

    The epoch hint selects the chain key; envelopes from the immediately
    preceding epoch still open via key_previous, anything older fails.
    """
    candidates = []
    if ct.epoch_hint == state.epoch:
        candidates.append(state.key_current)
        if state.key_previous is not None:
            candidates.append(state.key_previous)
    elif ct.epoch_hint == state.epoch - 1 and state.key_previous is not None:
        candidates.append(state.key_previous)
    for k_serv in candidates:
        try:
            plain = AESGCM(derive_user_key(k_serv, ct.r)).decrypt(ct.nonce, ct.body, None)
        except InvalidTag:
            continue
        return CredentialSet.from_wire(json.loads(plain.decode("utf-8")))
    raise CredentialAuthFailure(
        f"cannot open credential envelope (hint epoch {ct.epoch_hint}, state epoch {state.epoch})"
    )
