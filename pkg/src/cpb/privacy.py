"""Server-aided PRP protocol for private O2O computation and intersection sharing.

Organizations share one AES key ``kappa`` that the STA never sees. Each
(prefix, day) element with multiplicity c becomes c PRP handles
``AES_kappa(element || cnt || pad)``, so equal elements at two organizations
collide at the STA while repeated elements stay unlinkable. Next to each
handle travels an AES-GCM ciphertext of the element under
``SHA-256(element || cnt)``, which only a holder of the same element can
derive.

Byte layouts::

    element  = prefix (3 bytes, big-endian) || day (2 bytes, big-endian)
    PRP in   = element || cnt (4 bytes, big-endian) || 7 zero bytes
    E entry  = nonce (12) || AES-256-GCM(element) (5) || tag (16)
"""

from __future__ import annotations

import hashlib
import logging
import os
import random
import secrets
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .collab.clustering import ClusterAssignment, ClusteringSpec, cluster
from .collab.similarity import SimilarityMatrix
from .errors import DataError, ProtocolError
from .forecast import SharedPool
from .ingest import OrgDataset

log = logging.getLogger(__name__)

KEY_BYTES = 16
BLOCK = 16
ELEMENT_BYTES = 5
NONCE_BYTES = 12
TAG_BYTES = 16
CIPHERTEXT_BYTES = NONCE_BYTES + ELEMENT_BYTES + TAG_BYTES
MAX_COUNT = 2**32 - 1


def generate_key() -> bytes:
    return secrets.token_bytes(KEY_BYTES)


def setup(orgs: Sequence[str], key: bytes | None = None) -> dict[str, bytes]:
    """Give every organization the same fresh key (simulation mode)."""
    if len(orgs) < 2:
        raise ProtocolError("key setup needs at least two organizations")
    key = generate_key() if key is None else key
    if len(key) != KEY_BYTES:
        raise ProtocolError(f"key must be {KEY_BYTES} bytes")
    return {o: key for o in orgs}


def encode_element(prefix: int, day: int) -> bytes:
    if not 0 <= prefix < 1 << 24 or not 0 <= day < 1 << 16:
        raise DataError(f"element out of range: prefix={prefix} day={day}")
    return int(prefix).to_bytes(3, "big") + int(day).to_bytes(2, "big")


def decode_element(element: bytes) -> tuple[int, int]:
    return int.from_bytes(element[:3], "big"), int.from_bytes(element[3:5], "big")


def prp_input(element: bytes, cnt: int) -> bytes:
    return element + cnt.to_bytes(4, "big") + bytes(BLOCK - ELEMENT_BYTES - 4)


def element_key(element: bytes, cnt: int) -> bytes:
    return hashlib.sha256(element + cnt.to_bytes(4, "big")).digest()


def prp(key: bytes, blocks: bytes) -> bytes:
    """AES-128 applied block-wise (one permutation call per 16-byte block)."""
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(blocks) + enc.finalize()


def seal(key: bytes, element: bytes, nonce: bytes | None = None) -> bytes:
    nonce = os.urandom(NONCE_BYTES) if nonce is None else nonce
    return nonce + AESGCM(key).encrypt(nonce, element, None)


def unseal(key: bytes, ciphertext: bytes) -> bytes:
    return AESGCM(key).decrypt(ciphertext[:NONCE_BYTES], ciphertext[NONCE_BYTES:], None)


@dataclass
class Upload:
    """What an organization sends to the STA: handles and aligned ciphertexts."""

    org: str
    S: list[bytes]
    E: list[bytes]

    def __post_init__(self):
        if len(self.S) != len(self.E):
            raise ProtocolError(f"{self.org}: |S| != |E|")

    @property
    def nbytes(self) -> int:
        return BLOCK * len(self.S) + CIPHERTEXT_BYTES * len(self.E)


@dataclass
class EncryptedDataset:
    org: str
    S: list[bytes]
    E: list[bytes]
    K: dict[bytes, bytes] = field(repr=False)

    def upload(self) -> Upload:
        return Upload(self.org, list(self.S), list(self.E))


def _expand(d: OrgDataset, mode: str) -> tuple[list[bytes], list[int]]:
    elements, counters = [], []
    mult = d.multiplicity(mode)
    if len(mult) and int(mult.max()) > MAX_COUNT:
        raise DataError(f"{d.org}: element multiplicity exceeds 32-bit counter")
    for p, day, c in zip(d.prefix.tolist(), d.day.tolist(), mult.tolist()):
        el = encode_element(p, day)
        for cnt in range(1, c + 1):
            elements.append(el)
            counters.append(cnt)
    return elements, counters


def encrypt_dataset(
    d: OrgDataset,
    key: bytes,
    mode: str = "presence",
    rng: random.Random | None = None,
) -> EncryptedDataset:
    """Encrypt one organization's training multiset for upload.

    The upload order is shuffled: by sorting on OS-random keys, or with
    ``rng`` when one is given (tests).
    """
    elements, counters = _expand(d, mode)
    n = len(elements)
    blocks = b"".join(prp_input(el, c) for el, c in zip(elements, counters))
    handles = prp(key, blocks)
    S = [handles[i : i + BLOCK] for i in range(0, len(handles), BLOCK)]
    nonces = os.urandom(NONCE_BYTES * n)
    E, K = [], {}
    for i, (s, el, c) in enumerate(zip(S, elements, counters)):
        k = element_key(el, c)
        E.append(seal(k, el, nonces[i * NONCE_BYTES : (i + 1) * NONCE_BYTES]))
        K[s] = k
    if rng is None:
        order = np.argsort(np.frombuffer(os.urandom(8 * n), dtype=np.uint64), kind="stable").tolist()
    else:
        order = list(range(n))
        rng.shuffle(order)
    return EncryptedDataset(d.org, [S[i] for i in order], [E[i] for i in order], K)


@dataclass
class PairBuffer:
    """Matched handles of ``receiver`` and ``source`` with the source's ciphertexts."""

    receiver: str
    source: str
    entries: list[tuple[bytes, bytes]]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def nbytes(self) -> int:
        return (BLOCK + CIPHERTEXT_BYTES) * len(self.entries)


def sta_compute(uploads: Sequence[Upload]) -> tuple[SimilarityMatrix, dict[tuple[str, str], PairBuffer]]:
    """O2O[i, j] = |S_i ∩ S_j| and the buffers Buff[i, j] for every ordered pair.

    One hash-map pass over all handles; only handles shared by several
    organizations produce pair work.
    """
    orgs = [u.org for u in uploads]
    if len(set(orgs)) != len(orgs):
        raise ProtocolError("duplicate organization upload")
    n = len(orgs)
    holders: dict[bytes, list[tuple[int, int]]] = defaultdict(list)
    for i, u in enumerate(uploads):
        if len(set(u.S)) != len(u.S):
            raise ProtocolError(f"{u.org}: repeated handle in upload")
        for pos, s in enumerate(u.S):
            holders[s].append((i, pos))
    cells = np.zeros((n, n), dtype=np.int64)
    for i, u in enumerate(uploads):
        cells[i, i] = len(u.S)
    pairs: dict[tuple[int, int], list[tuple[bytes, bytes]]] = defaultdict(list)
    # iterate in receiver upload order so buffer order is a function of the uploads
    for i, u in enumerate(uploads):
        for s in u.S:
            hs = holders[s]
            if len(hs) < 2:
                continue
            for j, pos in hs:
                if j != i:
                    pairs[(i, j)].append((s, uploads[j].E[pos]))
    buffers = {}
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            entries = pairs.get((i, j), [])
            cells[i, j] = len(entries)
            buffers[(orgs[i], orgs[j])] = PairBuffer(orgs[i], orgs[j], entries)
    return SimilarityMatrix(tuple(orgs), cells), buffers


@dataclass
class StaOutcome:
    o2o: SimilarityMatrix
    assignment: ClusterAssignment
    deliveries: dict[str, list[PairBuffer]]


def sta_round(uploads: Sequence[Upload], spec: ClusteringSpec) -> StaOutcome:
    """STA side of one round: match, cluster on O2O, route buffers to cluster peers.

    Uploads are processed in organization-id order, so the outcome does not
    depend on arrival order.
    """
    o2o, buffers = sta_compute(sorted(uploads, key=lambda u: u.org))
    assignment = cluster(o2o, spec)
    deliveries = {
        o: [buffers[(o, p)] for p in sorted(assignment.peers(o))] for o in o2o.orgs
    }
    return StaOutcome(o2o, assignment, deliveries)


def decrypt_shared(org: str, buffers: Iterable[PairBuffer], keys: Mapping[bytes, bytes]) -> SharedPool:
    """Open every buffered ciphertext with the key kept for its handle.

    Entries failing authentication (or with an unknown handle) are logged and
    dropped; the rest are unaffected.
    """
    plain, source = [], []
    for buf in buffers:
        for handle, ct in buf.entries:
            k = keys.get(handle)
            if k is None:
                log.warning("%s: buffer from %s holds a handle we never uploaded", org, buf.source)
                continue
            try:
                el = AESGCM(k).decrypt(ct[:NONCE_BYTES], ct[NONCE_BYTES:], None)
            except (InvalidTag, ValueError):
                log.warning("%s: rejected ciphertext from %s (authentication failed)", org, buf.source)
                continue
            if len(el) != ELEMENT_BYTES:
                log.warning("%s: malformed element from %s", org, buf.source)
                continue
            plain.append(el)
            source.append(buf.source)
    raw = np.frombuffer(b"".join(plain), dtype=np.uint8).reshape(-1, ELEMENT_BYTES).astype(np.uint32)
    prefix = (raw[:, 0] << 16) | (raw[:, 1] << 8) | raw[:, 2]
    day = (raw[:, 3] << 8) | raw[:, 4]
    pool = SharedPool(org, prefix, day, source, np.ones(len(plain), dtype=np.int64))
    return pool.canonical()


@dataclass
class RoundResult:
    o2o: SimilarityMatrix
    assignment: ClusterAssignment
    pools: dict[str, SharedPool]


def simulate_round(
    datasets: Mapping[str, OrgDataset],
    spec: ClusteringSpec,
    mode: str = "presence",
    key: bytes | None = None,
) -> RoundResult:
    """Run setup, encryption, STA round and decryption in-process."""
    keys = setup(list(datasets), key)
    encrypted = {o: encrypt_dataset(d, keys[o], mode) for o, d in datasets.items()}
    outcome = sta_round([e.upload() for e in encrypted.values()], spec)
    pools = {o: decrypt_shared(o, outcome.deliveries[o], encrypted[o].K) for o in datasets}
    return RoundResult(outcome.o2o, outcome.assignment, pools)


def plaintext_elements(datasets: Iterable[OrgDataset]) -> set[bytes]:
    return {encode_element(p, d) for ds in datasets for p, d in zip(ds.prefix.tolist(), ds.day.tolist())}


def scan_transcript(blobs: Iterable[bytes], key: bytes, elements: Iterable[bytes]) -> list[str]:
    """Report every occurrence of the key or a plaintext element encoding.

    Elements are matched against all 5-byte windows of each blob.
    """
    findings = []
    elements = set(elements)
    for n, blob in enumerate(blobs):
        if key in blob:
            findings.append(f"blob {n}: contains the shared key")
        windows = {blob[i : i + ELEMENT_BYTES] for i in range(len(blob) - ELEMENT_BYTES + 1)}
        hits = windows & elements
        if hits:
            findings.append(f"blob {n}: {len(hits)} plaintext element encodings")
    return findings
