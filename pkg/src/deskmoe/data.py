"""Corpus ingestion, byte-level tokenization and deterministic batching.

Vocabulary: ``PAD=0, BOS=1, EOS=2``, then the 256 byte values at ``3..258``.
Documents are concatenated as ``BOS bytes EOS`` and packed across document
boundaries into fixed-length sequences.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import yaml

from .core.rng import stream
from .errors import ConfigError, StorageError

log = logging.getLogger(__name__)

PAD, BOS, EOS = 0, 1, 2
BYTE_OFFSET = 3
VOCAB_SIZE = 256 + BYTE_OFFSET
MANIFEST_NAMES = ("manifest.yaml", "manifest.yml", "manifest.json")


@dataclass(frozen=True)
class Document:
    text: bytes
    domain_id: int
    source: str

    def __post_init__(self):
        if not isinstance(self.text, bytes):
            raise TypeError("Document.text must be bytes")
        if not self.text:
            raise ConfigError(f"empty document {self.source!r}")


class Corpus(list):
    """A list of documents plus the registered domain names (index = domain id)."""

    def __init__(self, documents: Sequence[Document] = (), domains: Sequence[str] = ()):
        super().__init__(documents)
        self.domains = list(domains)


@dataclass
class TokenStream:
    ids: np.ndarray  # int64 token ids
    domains: np.ndarray  # int64 domain id per token

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def bundled_corpus_dir() -> Path:
    return Path(str(resources.files("deskmoe") / "corpus"))


def _load_manifest(path: Path) -> list[tuple[str, str]]:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise StorageError(f"cannot read manifest {path}: {e}") from e
    try:
        raw = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigError(f"malformed manifest {path}: {e}") from e
    files = raw.get("files") if isinstance(raw, dict) else None
    if not isinstance(files, dict) or not files:
        raise ConfigError(f"manifest {path} needs a non-empty 'files' mapping of glob -> domain")
    return [(str(g), str(d)) for g, d in files.items()]


def _read(path: Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as e:
        raise StorageError(f"cannot read {path}: {e}") from e


def ingest(path: str | Path) -> Corpus:
    """Load labelled documents from a directory or a manifest file.

    A manifest (``files: {glob: domain}``, first matching glob wins) labels
    files relative to its own directory. Without one, a file's domain is the
    name of its top-level subdirectory; files at the root are unlabelled.
    Documents come back in lexicographic path order, domains in first-seen order.
    """
    path = Path(path)
    if not path.exists():
        raise StorageError(f"data path {path} does not exist")
    manifest = None
    if path.is_file():
        manifest, root = path, path.parent
    else:
        root = path
        for name in MANIFEST_NAMES:
            if (root / name).is_file():
                manifest = root / name
                break
    rules = _load_manifest(manifest) if manifest is not None else None

    files = sorted(
        p for p in root.rglob("*") if p.is_file() and not p.name.startswith(".") and p != manifest
    )
    labelled: list[tuple[Path, str]] = []
    for p in files:
        rel = p.relative_to(root).as_posix()
        if rules is not None:
            domain = next((d for g, d in rules if fnmatch.fnmatchcase(rel, g)), None)
        else:
            domain = rel.split("/")[0] if "/" in rel else None
        if domain is None:
            raise ConfigError(f"file {rel!r} has no domain label", "add a manifest glob or move it into a domain subdirectory")
        labelled.append((p, domain))
    if not labelled:
        log.warning("no documents found under %s", root)
        return Corpus()

    with ThreadPoolExecutor(max_workers=8) as pool:
        contents = list(pool.map(_read, [p for p, _ in labelled]))
    domains: list[str] = []
    docs = []
    for (p, domain), text in zip(labelled, contents):
        if not text:
            log.warning("skipping empty file %s", p)
            continue
        if domain not in domains:
            domains.append(domain)
        docs.append(Document(text, domains.index(domain), p.relative_to(root).as_posix()))
    return Corpus(docs, domains)


def tokenize(doc: Document | bytes | str, domain_id: int | None = None) -> TokenStream:
    if isinstance(doc, Document):
        raw, dom = doc.text, doc.domain_id
    else:
        raw = doc.encode("utf-8") if isinstance(doc, str) else bytes(doc)
        dom = 0 if domain_id is None else domain_id
    ids = np.empty(len(raw) + 2, dtype=np.int64)
    ids[0], ids[-1] = BOS, EOS
    ids[1:-1] = np.frombuffer(raw, dtype=np.uint8).astype(np.int64) + BYTE_OFFSET
    return TokenStream(ids, np.full(ids.shape, dom, dtype=np.int64))


def detokenize(ids) -> bytes:
    """Bytes of every byte token; specials are dropped."""
    ids = np.asarray(ids, dtype=np.int64)
    keep = ids[ids >= BYTE_OFFSET] - BYTE_OFFSET
    return keep.astype(np.uint8).tobytes()


def concat(docs: Sequence[Document]) -> TokenStream:
    parts = [tokenize(d) for d in docs]
    if not parts:
        return TokenStream(np.zeros(0, np.int64), np.zeros(0, np.int64))
    return TokenStream(np.concatenate([p.ids for p in parts]), np.concatenate([p.domains for p in parts]))


def split_eval(corpus: Corpus, eval_fraction: float = 0.1) -> tuple[Corpus, Corpus]:
    """Hold out the last ``ceil(eval_fraction * n)`` documents of each domain.

    Domains with a single document stay entirely in the training split.
    """
    if not 0.0 <= eval_fraction < 1.0:
        raise ConfigError(f"eval_fraction must lie in [0, 1), got {eval_fraction}")
    train, held = [], []
    for dom in range(len(corpus.domains)):
        docs = [d for d in corpus if d.domain_id == dom]
        n_eval = min(math.ceil(eval_fraction * len(docs)), len(docs) - 1) if eval_fraction > 0 else 0
        cut = len(docs) - n_eval
        train.extend(docs[:cut])
        held.extend(docs[cut:])
    key = {id(d): i for i, d in enumerate(corpus)}
    train.sort(key=lambda d: key[id(d)])
    held.sort(key=lambda d: key[id(d)])
    return Corpus(train, corpus.domains), Corpus(held, corpus.domains)


@dataclass(frozen=True)
class Batch:
    index: int
    tokens: np.ndarray  # [B, seq_len]; inputs are [:, :-1], targets [:, 1:]
    domains: np.ndarray  # [B, seq_len]


class BatchPlan:
    """Deterministic, randomly addressable sequence of packed batches.

    The stream is cut into ``floor(N / seq_len)`` non-overlapping chunks. Chunks
    are visited in a fresh seeded permutation each epoch; from the anneal
    boundary on, the visiting order restarts from a new set of permutations.
    """

    def __init__(
        self,
        tokens: TokenStream,
        seq_len: int,
        batch_size: int,
        epochs: float | None = None,
        anneal_fraction: float = 0.0,
        seed: int = 0,
        n_batches: int | None = None,
        name: str = "data",
    ):
        N = len(tokens)
        if seq_len < 2:
            raise ConfigError("seq_len must be >= 2 (one input and one target)")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if seq_len > N:
            raise ConfigError(f"seq_len {seq_len} exceeds the {N} available tokens")
        if not 0.0 <= anneal_fraction < 1.0:
            raise ConfigError(f"anneal_fraction must lie in [0, 1), got {anneal_fraction}")
        if (epochs is None) == (n_batches is None):
            raise ConfigError("give exactly one of epochs and n_batches")
        if epochs is not None:
            if epochs <= 0:
                raise ConfigError(f"epochs must be > 0, got {epochs}")
            n_batches = math.floor(epochs * N / (seq_len * batch_size))
        if n_batches < 1:
            raise ConfigError("corpus too small for a single batch", "lower seq_len or batch_size")
        self.tokens = tokens
        self.seq_len = seq_len
        self.batch_size = batch_size
        self.seed = seed
        self.name = name
        self.n_batches = int(n_batches)
        self.n_chunks = N // seq_len
        self.anneal_batch = self.n_batches - math.floor(anneal_fraction * self.n_batches)
        self._perms: dict[tuple[str, int], np.ndarray] = {}

    def __len__(self) -> int:
        return self.n_batches

    @property
    def dropped_tokens(self) -> int:
        """Tokens of one pass over the corpus that never reach a full batch."""
        emitted = min(self.n_batches * self.batch_size, self.n_chunks) * self.seq_len
        return len(self.tokens) - emitted

    def _perm(self, phase: str, epoch: int) -> np.ndarray:
        key = (phase, epoch)
        if key not in self._perms:
            self._perms[key] = stream(self.seed, self.name, phase, str(epoch)).permutation(self.n_chunks)
        return self._perms[key]

    def chunk_at(self, position: int) -> int:
        boundary = self.anneal_batch * self.batch_size
        phase = "epoch" if position < boundary else "anneal"
        q = position if position < boundary else position - boundary
        return int(self._perm(phase, q // self.n_chunks)[q % self.n_chunks])

    def batch(self, i: int) -> Batch:
        if not 0 <= i < self.n_batches:
            raise IndexError(f"batch {i} outside [0, {self.n_batches})")
        B, S = self.batch_size, self.seq_len
        chunks = [self.chunk_at(i * B + j) for j in range(B)]
        rows = np.stack([np.arange(c * S, (c + 1) * S) for c in chunks])
        return Batch(i, self.tokens.ids[rows], self.tokens.domains[rows])

    def __iter__(self) -> Iterator[Batch]:
        for i in range(self.n_batches):
            yield self.batch(i)


def batches(
    tokens: TokenStream,
    seq_len: int,
    batch_size: int,
    epochs: float,
    anneal_fraction: float = 0.0,
    seed: int = 0,
) -> BatchPlan:
    return BatchPlan(tokens, seq_len, batch_size, epochs=epochs, anneal_fraction=anneal_fraction, seed=seed)


def sequential_batches(tokens: TokenStream, seq_len: int, batch_size: int, max_tokens: int | None = None) -> list[Batch]:
    """Unshuffled evaluation batches covering the stream in order (last partial batch kept)."""
    n_chunks = len(tokens) // seq_len
    if max_tokens is not None:
        n_chunks = min(n_chunks, max(1, max_tokens // seq_len))
    if n_chunks < 1:
        raise ConfigError(f"evaluation stream of {len(tokens)} tokens is shorter than seq_len {seq_len}")
    out = []
    for i, start in enumerate(range(0, n_chunks, batch_size)):
        idx = np.arange(start, min(start + batch_size, n_chunks))
        rows = idx[:, None] * seq_len + np.arange(seq_len)[None, :]
        out.append(Batch(i, tokens.ids[rows], tokens.domains[rows]))
    return out
