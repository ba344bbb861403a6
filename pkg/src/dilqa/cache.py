"""Precomputed paragraph hidden states, persisted as a checksummed binary file.

Building the cache needs no question input: each entry is the paragraph's
states after the k split-phase blocks, a function of (paragraph, weights,
config) only. States are float32 on disk, float64 in memory; the interactive
path pays only the joint blocks per question-paragraph pair afterwards.
"""

from __future__ import annotations

import hashlib
import os
import struct
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .encoder import EncoderWeights, ModelConfig, weights_checksum
from .reader import encode_paragraph, paragraph_part
from .retriever import ParagraphStore
from .tensor import MacCounter
from .text import Vocab, tokenize

CACHE_MAGIC = b"DILC"
CACHE_VERSION = 1


class StaleCacheError(RuntimeError):
    """Cache fingerprint does not match the current model; rebuild explicitly."""


class CacheEntryError(RuntimeError):
    """Stored entry failed its checksum."""


def model_fingerprint(config: ModelConfig, weights: EncoderWeights) -> bytes:
    h = hashlib.sha256()
    h.update(config.to_json().encode())
    h.update(weights_checksum(weights).encode())
    h.update(str(config.k).encode())
    return h.digest()


def paragraph_ids(text: str, vocab: Vocab, config: ModelConfig) -> np.ndarray:
    """The paragraph-segment ids used by both the cache and the fresh path."""
    tok = tokenize(text)
    ids, _ = paragraph_part(tok, 0, len(tok), vocab, config)
    return ids


class CacheFile:
    """Random-access reader over a paragraph-state cache file."""

    def __init__(self, path, config: ModelConfig, weights: EncoderWeights):
        self.path = path
        self._f = open(path, "rb")
        try:
            magic = self._f.read(4)
            if magic != CACHE_MAGIC:
                raise ValueError(f"{path}: bad magic {magic!r}")
            (version,) = struct.unpack("<I", self._f.read(4))
            if version != CACHE_VERSION:
                raise ValueError(f"{path}: unsupported cache version {version}")
            fingerprint = self._f.read(32)
            expected = model_fingerprint(config, weights)
            if fingerprint != expected:
                raise StaleCacheError(
                    f"{path}: cache was built for a different model/config; "
                    "rebuild with precompute")
            self.d, count = struct.unpack("<II", self._f.read(8))
            self._offsets: dict[int, tuple[int, int]] = {}
            for _ in range(count):
                pid, n_p, offset = struct.unpack("<IIQ", self._f.read(16))
                self._offsets[pid] = (n_p, offset)
        except Exception:
            self._f.close()
            raise
        self.build_macs: int | None = None

    def __len__(self):
        return len(self._offsets)

    def __contains__(self, pid: int) -> bool:
        return pid in self._offsets

    def get(self, pid: int) -> np.ndarray:
        """Stored hidden states for a paragraph id, as float64."""
        if pid not in self._offsets:
            raise KeyError(f"paragraph id {pid} not in cache")
        n_p, offset = self._offsets[pid]
        self._f.seek(offset)
        (crc,) = struct.unpack("<I", self._f.read(4))
        payload = self._f.read(n_p * self.d * 4)
        if zlib.crc32(payload) != crc:
            raise CacheEntryError(f"{self.path}: checksum failure for paragraph {pid}")
        states = np.frombuffer(payload, dtype="<f4").reshape(n_p, self.d)
        return states.astype(np.float64)

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def precompute(store: ParagraphStore, weights: EncoderWeights, config: ModelConfig,
               vocab: Vocab, path, workers: int = 1) -> CacheFile:
    """Encode every store paragraph through the k split-phase blocks and persist.

    Entries are written sorted by paragraph id whatever the worker fan-out.
    A failed write removes the partial file. The returned CacheFile carries
    build_macs, the instrumented MAC total of the build.
    """
    counter = MacCounter()

    def encode_one(para):
        ids = paragraph_ids(para.text, vocab, config)
        local = MacCounter()
        states = encode_paragraph(ids, weights, config, local)
        return para.pid, states, local.count

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            encoded = list(pool.map(encode_one, store.paragraphs))
    else:
        encoded = [encode_one(p) for p in store.paragraphs]
    encoded.sort(key=lambda e: e[0])
    for _, _, macs in encoded:
        counter.add(macs)

    try:
        with open(path, "wb") as f:
            f.write(CACHE_MAGIC)
            f.write(struct.pack("<I", CACHE_VERSION))
            f.write(model_fingerprint(config, weights))
            f.write(struct.pack("<II", config.d_model, len(encoded)))
            table_pos = f.tell()
            f.write(b"\x00" * 16 * len(encoded))  # offset table placeholder
            table = []
            for pid, states, _ in encoded:
                payload = np.ascontiguousarray(states, dtype="<f4").tobytes()
                table.append((pid, states.shape[0], f.tell()))
                f.write(struct.pack("<I", zlib.crc32(payload)))
                f.write(payload)
            f.seek(table_pos)
            for pid, n_p, offset in table:
                f.write(struct.pack("<IIQ", pid, n_p, offset))
    except Exception:
        if os.path.exists(path):
            os.remove(path)
        raise

    cache = CacheFile(path, config, weights)
    cache.build_macs = counter.count
    return cache
