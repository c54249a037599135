"""Frozen text embeddings.

Providers expose ``dim``, ``tag`` and ``embed(text, record_id=None)``.
Embeddings are computed once and persisted in a small binary container::

    magic  b"CLICEMB1"                      8 bytes
    u16    version (1)
    u32    dim
    u32    count
    count x { u16 id length, UTF-8 id, dim x float32 }

All integers and floats are little-endian. The provider tag, which is not
part of the container, is kept in a JSON sidecar next to the file.
"""
from __future__ import annotations

import enum
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Protocol

import httpx
import numpy as np

from .errors import (
    BadMagic,
    DimensionMismatch,
    InvalidInput,
    ProviderUnavailable,
    TruncatedFile,
    VersionMismatch,
)

TEXT_DIM = 768
MAGIC = b"CLICEMB1"
VERSION = 1


class EmbeddingSource(str, enum.Enum):
    ECG_ENCODER = "EcgEncoder"
    TEXT_PROVIDER = "TextProvider"
    FUSED = "Fused"


@dataclass(frozen=True)
class Embedding:
    values: np.ndarray
    provenance: EmbeddingSource = EmbeddingSource.TEXT_PROVIDER

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 1:
            raise ValueError("embedding must be a vector")
        if not np.all(np.isfinite(v)):
            raise ValueError("embedding has non-finite values")
        v = v.copy()
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def dim(self) -> int:
        return self.values.shape[0]


class TextProvider(Protocol):
    dim: int
    tag: str

    def embed(self, text: str, record_id: str | None = None) -> Embedding: ...

    def state_checksum(self) -> str: ...


def embed_text(provider: TextProvider, text: str, record_id: str | None = None, dim: int = TEXT_DIM) -> Embedding:
    """Query ``provider`` and enforce the declared dimension."""
    if not isinstance(text, str) or not text.strip():
        raise InvalidInput("text must be a non-empty string")
    if provider.dim != dim:
        raise DimensionMismatch(f"provider {provider.tag!r} declares dim {provider.dim}, expected {dim}")
    emb = provider.embed(text, record_id)
    if emb.dim != dim:
        raise DimensionMismatch(f"provider {provider.tag!r} returned dim {emb.dim}, expected {dim}")
    return emb


# --------------------------------------------------------------------------
# Hash featurizer
# --------------------------------------------------------------------------


class HashEmbedder:
    """Bag-of-tokens signed feature hashing, L2-normalised.

    Tokens are the lower-cased, whitespace-separated words. Each token adds
    +/-1 at ``n_hashes`` positions; position ``k`` comes from a 64-bit keyed
    BLAKE2b digest of the token with salt ``k`` (top bit sign, rest index).
    """

    PERSON = b"clic-hash-v1"

    def __init__(self, dim: int = TEXT_DIM, n_hashes: int = 8):
        self.dim = dim
        self.n_hashes = n_hashes
        self.tag = f"hash:blake2b64:k{n_hashes}:d{dim}"

    def _slots(self, token: str):
        data = token.encode("utf-8")
        for k in range(self.n_hashes):
            h = hashlib.blake2b(data, digest_size=8, salt=k.to_bytes(8, "little"), person=self.PERSON)
            word = int.from_bytes(h.digest(), "little")
            sign = -1.0 if word >> 63 else 1.0
            yield (word & 0x7FFF_FFFF_FFFF_FFFF) % self.dim, sign

    def embed(self, text: str, record_id: str | None = None) -> Embedding:
        acc = np.zeros(self.dim, dtype=np.float64)
        for token in text.lower().split():
            for idx, sign in self._slots(token):
                acc[idx] += sign
        norm = np.sqrt(np.dot(acc, acc))
        if norm == 0.0:
            acc[0] = 1.0
        else:
            acc /= norm
        return Embedding(acc)

    def state_checksum(self) -> str:
        return hashlib.sha256(f"{self.tag}|{self.PERSON!r}".encode()).hexdigest()


def hash_embed(text: str, dim: int = TEXT_DIM) -> Embedding:
    return HashEmbedder(dim).embed(text)


# --------------------------------------------------------------------------
# Store + file format
# --------------------------------------------------------------------------


class EmbeddingStore:
    """Record id -> float32 vector, all of one dimension."""

    def __init__(self, dim: int, provider: str = "", vectors: Mapping[str, np.ndarray] | None = None):
        self.dim = int(dim)
        self.provider = provider
        self._vectors: dict[str, np.ndarray] = {}
        for rid, vec in (vectors or {}).items():
            self.add(rid, vec)

    def add(self, record_id: str, vector) -> None:
        if isinstance(vector, Embedding):
            vector = vector.values
        v = np.asarray(vector, dtype=np.float32)
        if v.shape != (self.dim,):
            raise DimensionMismatch(f"{record_id}: shape {v.shape}, store dim {self.dim}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{record_id}: non-finite embedding")
        if record_id in self._vectors:
            raise ValueError(f"duplicate id {record_id!r}")
        if len(record_id.encode("utf-8")) > 0xFFFF:
            raise ValueError("record id too long")
        v = v.copy()
        v.setflags(write=False)
        self._vectors[record_id] = v

    def __getitem__(self, record_id: str) -> np.ndarray:
        return self._vectors[record_id]

    def __contains__(self, record_id) -> bool:
        return record_id in self._vectors

    def __len__(self) -> int:
        return len(self._vectors)

    def ids(self) -> list[str]:
        return list(self._vectors)

    def matrix(self, ids: Iterable[str]) -> np.ndarray:
        ids = list(ids)
        if not ids:
            return np.zeros((0, self.dim), dtype=np.float32)
        return np.stack([self._vectors[i] for i in ids])

    def checksum(self) -> str:
        h = hashlib.sha256(f"{self.dim}|{self.provider}".encode())
        for rid, v in self._vectors.items():
            h.update(rid.encode("utf-8"))
            h.update(v.astype("<f4").tobytes())
        return h.hexdigest()

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids() == other.ids()
            and all(self[i].tobytes() == other[i].tobytes() for i in self._vectors)
        )

    def __repr__(self):
        return f"EmbeddingStore(dim={self.dim}, n={len(self)}, provider={self.provider!r})"


_HEAD = struct.Struct("<8sHII")
_U16 = struct.Struct("<H")


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_embedding_file(store: EmbeddingStore, path: str | Path) -> None:
    path = Path(path)
    chunks = [_HEAD.pack(MAGIC, VERSION, store.dim, len(store))]
    for rid in store.ids():
        raw = rid.encode("utf-8")
        chunks += [_U16.pack(len(raw)), raw, store[rid].astype("<f4").tobytes()]
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    _sidecar(path).write_text(json.dumps({"provider": store.provider}, sort_keys=True) + "\n")


def load_embedding_file(path: str | Path, dim: int | None = None) -> EmbeddingStore:
    path = Path(path)
    buf = path.read_bytes()
    if len(buf) < 8 or buf[:8] != MAGIC:
        raise BadMagic(f"{path}: not an embedding file")
    if len(buf) < _HEAD.size:
        raise TruncatedFile(f"{path}: truncated header")
    _, version, file_dim, count = _HEAD.unpack_from(buf, 0)
    if version != VERSION:
        raise VersionMismatch(f"{path}: version {version}, expected {VERSION}")
    if dim is not None and file_dim != dim:
        raise DimensionMismatch(f"{path}: dim {file_dim}, expected {dim}")

    provider = ""
    side = _sidecar(path)
    if side.exists():
        provider = json.loads(side.read_text()).get("provider", "")
    store = EmbeddingStore(file_dim, provider)
    off = _HEAD.size
    vec_bytes = 4 * file_dim
    for _ in range(count):
        if off + 2 > len(buf):
            raise TruncatedFile(f"{path}: truncated record header")
        (n,) = _U16.unpack_from(buf, off)
        off += 2
        if off + n + vec_bytes > len(buf):
            raise TruncatedFile(f"{path}: truncated record")
        rid = buf[off:off + n].decode("utf-8")
        off += n
        store.add(rid, np.frombuffer(buf, dtype="<f4", count=file_dim, offset=off))
        off += vec_bytes
    if off != len(buf):
        raise ValueError(f"{path}: {len(buf) - off} trailing bytes")
    return store


# --------------------------------------------------------------------------
# Other providers
# --------------------------------------------------------------------------


class PrecomputedProvider:
    """Serves vectors from an :class:`EmbeddingStore`, looked up by record id."""

    def __init__(self, store: EmbeddingStore):
        self.store = store
        self.dim = store.dim
        self.tag = f"precomputed:{store.provider}" if store.provider else "precomputed"

    @classmethod
    def from_file(cls, path, dim: int | None = None) -> "PrecomputedProvider":
        return cls(load_embedding_file(path, dim))

    def embed(self, text: str, record_id: str | None = None) -> Embedding:
        if record_id is None or record_id not in self.store:
            raise ProviderUnavailable(f"no precomputed embedding for record {record_id!r}")
        return Embedding(self.store[record_id].astype(np.float64))

    def state_checksum(self) -> str:
        return self.store.checksum()


class HttpEmbeddingProvider:
    """Client for an OpenAI-style ``/v1/embeddings`` endpoint.

    BERT-style services should be configured server-side for mean pooling over
    final-layer token vectors; ``pooling`` is recorded in the tag only.
    """

    def __init__(
        self,
        base_url: str,
        model: str = "emilyalsentzer/Bio_ClinicalBERT",
        dim: int = TEXT_DIM,
        pooling: str = "mean",
        timeout: float = 60.0,
        api_key: str | None = None,
        client: httpx.Client | None = None,
    ):
        self.base_url = base_url.rstrip("/")
        self.model = model
        self.dim = dim
        self.pooling = pooling
        self.timeout = timeout
        self.api_key = api_key
        self.tag = f"http:{model}:{pooling}"
        self._client = client or httpx.Client()

    def embed(self, text: str, record_id: str | None = None) -> Embedding:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        try:
            resp = self._client.post(
                f"{self.base_url}/v1/embeddings",
                json={"model": self.model, "input": [text]},
                headers=headers,
                timeout=self.timeout,
            )
        except httpx.HTTPError as exc:
            raise ProviderUnavailable(f"embedding service unreachable: {exc}") from exc
        if not resp.is_success:
            raise ProviderUnavailable(f"embedding service returned HTTP {resp.status_code}")
        try:
            values = np.asarray(resp.json()["data"][0]["embedding"], dtype=np.float64)
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise ProviderUnavailable(f"unexpected embedding payload: {exc}") from exc
        if values.shape != (self.dim,):
            raise DimensionMismatch(f"service returned shape {values.shape}, expected ({self.dim},)")
        return Embedding(values)

    def state_checksum(self) -> str:
        return hashlib.sha256(f"{self.tag}|{self.base_url}".encode()).hexdigest()


def embed_records(provider: TextProvider, texts, dim: int = TEXT_DIM) -> EmbeddingStore:
    """Embed ``ContextText`` items (anything with ``id`` and ``text``) into a store."""
    store = EmbeddingStore(dim, provider.tag)
    for t in texts:
        store.add(t.id, embed_text(provider, t.text, t.id, dim))
    return store
