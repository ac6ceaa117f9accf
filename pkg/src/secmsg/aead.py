"""AES-GCM message framing with a fresh random nonce per message.

A sealed message travels as ``nonce || ciphertext || tag``: 12 nonce bytes
up front, the 16-byte authentication tag at the end, 28 bytes of expansion
total regardless of plaintext length.  Backends plug in through a small
registry so alternative AEAD implementations can be benchmarked against
each other; the default backend wraps the ``cryptography`` package's
AES-GCM.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

NONCE_LEN = 12
TAG_LEN = 16
FRAME_OVERHEAD = NONCE_LEN + TAG_LEN  # serialized frame is plaintext + 28

DEFAULT_BACKEND = "aes-gcm"


class IntegrityError(Exception):
    """A frame failed authentication (tampered, truncated, or wrong key)."""


class ProviderError(Exception):
    """The AEAD backend could not be configured or used."""


@dataclass(frozen=True)
class SecretKey:
    """A 128- or 256-bit AES-GCM key."""

    data: bytes

    def __post_init__(self) -> None:
        if len(self.data) not in (16, 32):
            raise ValueError(
                f"key must be 16 or 32 bytes, got {len(self.data)}"
            )

    @classmethod
    def generate(cls, bits: int = 256) -> "SecretKey":
        if bits not in (128, 256):
            raise ValueError("key size must be 128 or 256 bits")
        return cls(os.urandom(bits // 8))

    @classmethod
    def from_hex(cls, text: str) -> "SecretKey":
        try:
            raw = bytes.fromhex(text)
        except ValueError as exc:
            raise ValueError(f"invalid key hex: {text!r}") from exc
        return cls(raw)

    def __repr__(self) -> str:  # never leak key material in logs
        return f"SecretKey(<{len(self.data) * 8} bits>)"


@dataclass(frozen=True)
class Frame:
    """One sealed message: 12-byte nonce plus ciphertext-and-tag.

    Serialized layout is ``bytes[0:12] = nonce``, ``bytes[12:] =
    ciphertext || tag`` with the tag in the last 16 bytes.
    """

    nonce: bytes
    ciphertext_and_tag: bytes

    def __post_init__(self) -> None:
        if len(self.nonce) != NONCE_LEN:
            raise ValueError(f"nonce must be {NONCE_LEN} bytes")
        if len(self.ciphertext_and_tag) < TAG_LEN:
            raise ValueError("ciphertext shorter than the authentication tag")

    @property
    def plaintext_len(self) -> int:
        return len(self.ciphertext_and_tag) - TAG_LEN

    def to_bytes(self) -> bytes:
        return self.nonce + self.ciphertext_and_tag

    @classmethod
    def from_bytes(cls, raw: bytes) -> "Frame":
        if len(raw) < FRAME_OVERHEAD:
            raise ValueError(
                f"frame must be at least {FRAME_OVERHEAD} bytes, got {len(raw)}"
            )
        return cls(bytes(raw[:NONCE_LEN]), bytes(raw[NONCE_LEN:]))

    def __len__(self) -> int:
        return NONCE_LEN + len(self.ciphertext_and_tag)


class AeadProvider:
    """Seals and opens frames under one key.

    Instances are independent and may be used from different threads
    simultaneously; a single instance is not required to support
    concurrent calls.  Subclasses implement ``_encrypt`` / ``_decrypt``.
    """

    backend = "abstract"

    def __init__(self, key: SecretKey | bytes):
        self.key = key if isinstance(key, SecretKey) else SecretKey(key)

    def seal(self, plaintext: bytes) -> Frame:
        """Encrypt ``plaintext`` under a fresh uniformly random nonce."""
        nonce = os.urandom(NONCE_LEN)
        return Frame(nonce, self._encrypt(nonce, plaintext))

    def open(self, frame: Frame) -> bytes:
        """Decrypt and authenticate ``frame``, returning the plaintext.

        Raises IntegrityError on any authentication failure; the error is
        deliberately distinct from transport-level failures.
        """
        try:
            return self._decrypt(frame.nonce, frame.ciphertext_and_tag)
        except IntegrityError:
            raise
        except Exception as exc:
            raise IntegrityError("frame failed authentication") from exc

    def _encrypt(self, nonce: bytes, plaintext: bytes) -> bytes:
        raise NotImplementedError

    def _decrypt(self, nonce: bytes, ciphertext_and_tag: bytes) -> bytes:
        raise NotImplementedError


class AesGcmProvider(AeadProvider):
    """Default backend: AES-GCM from the ``cryptography`` package."""

    backend = "aes-gcm"

    def __init__(self, key: SecretKey | bytes):
        super().__init__(key)
        try:
            from cryptography.hazmat.primitives.ciphers.aead import AESGCM
        except ImportError as exc:  # pragma: no cover
            raise ProviderError("cryptography package not available") from exc
        try:
            self._aesgcm = AESGCM(self.key.data)
        except Exception as exc:
            raise ProviderError(f"backend rejected key: {exc}") from exc

    def _encrypt(self, nonce: bytes, plaintext: bytes) -> bytes:
        return self._aesgcm.encrypt(nonce, plaintext, None)

    def _decrypt(self, nonce: bytes, ciphertext_and_tag: bytes) -> bytes:
        from cryptography.exceptions import InvalidTag

        try:
            return self._aesgcm.decrypt(nonce, ciphertext_and_tag, None)
        except InvalidTag as exc:
            raise IntegrityError("frame failed authentication") from exc


BACKENDS: dict[str, type[AeadProvider]] = {
    AesGcmProvider.backend: AesGcmProvider,
}


def available_backends() -> list[str]:
    return sorted(BACKENDS)


def create_provider(backend: str, key: SecretKey | bytes) -> AeadProvider:
    try:
        cls = BACKENDS[backend]
    except KeyError:
        known = ", ".join(available_backends())
        raise ProviderError(f"unknown AEAD backend {backend!r} (have: {known})")
    return cls(key)
