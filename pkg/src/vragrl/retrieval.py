"""Search side of the environment.

``SimulatedRetriever`` scores documents by token overlap with a text
surrogate of each page; ``RemoteRetriever`` talks to an image-search service
over HTTP. Both satisfy the same two-method interface, so the rollout engine
never knows which one it has.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Protocol, Sequence, Union

import requests

from .perception import ImageDocument, image_size
from .trajectory import QueryTask

logger = logging.getLogger(__name__)


class RetrievalError(Exception):
    pass


class EmptyCorpus(RetrievalError):
    pass


class RetriableEnvironmentError(RetrievalError):
    """Transient failure of an environment service; safe to retry."""


class SearchTimeout(RetriableEnvironmentError):
    pass


class MalformedResponse(RetriableEnvironmentError):
    pass


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    top_k: int
    hits: tuple[tuple[str, float], ...]

    @property
    def doc_ids(self) -> list[str]:
        return [d for d, _ in self.hits]


@dataclass
class Corpus:
    documents: dict[str, ImageDocument]
    corpus_id: str = "corpus"

    def __post_init__(self):
        if not self.documents:
            raise EmptyCorpus("corpus has no documents")

    def __len__(self) -> int:
        return len(self.documents)

    def __getitem__(self, doc_id: str) -> ImageDocument:
        return self.documents[doc_id]


class Retriever(Protocol):
    def search(self, query: str, top_k: int) -> RetrievalResult: ...

    def document(self, doc_id: str) -> ImageDocument: ...


_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> set[str]:
    return set(_TOKEN_RE.findall(text.lower()))


def search_simulated(corpus: Corpus, query: str, top_k: int = 1, seed: int = 0) -> RetrievalResult:
    """Jaccard overlap between query tokens and each page's surrogate text.

    Ties are broken by a permutation of document ids drawn from ``seed``.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    if not corpus.documents:
        raise EmptyCorpus("corpus has no documents")
    order = sorted(corpus.documents)
    random.Random(seed).shuffle(order)
    tiebreak = {doc_id: i for i, doc_id in enumerate(order)}
    q = tokenize(query)
    scored = []
    for doc_id, doc in corpus.documents.items():
        d = tokenize(doc.text)
        union = q | d
        score = len(q & d) / len(union) if union else 0.0
        scored.append((-score, tiebreak[doc_id], doc_id, score))
    scored.sort()
    hits = tuple((doc_id, score) for _, _, doc_id, score in scored[:top_k])
    return RetrievalResult(query=query, top_k=top_k, hits=hits)


class SimulatedRetriever:
    def __init__(self, corpus: Corpus, seed: int = 0):
        self.corpus = corpus
        self.seed = seed

    def search(self, query: str, top_k: int = 1) -> RetrievalResult:
        return search_simulated(self.corpus, query, top_k, self.seed)

    def document(self, doc_id: str) -> ImageDocument:
        return self.corpus[doc_id]

    def identity(self) -> str:
        return f"simulated:{self.corpus.corpus_id}:seed={self.seed}"


class RemoteRetriever:
    """Client for ``POST {endpoint}`` with ``{"query", "top_k"}``.

    The service answers ``{"results": [{"doc_id", "score", "image_url"}]}``.
    Images are fetched by URL on first use and cached.
    """

    def __init__(
        self,
        endpoint: str,
        timeout: float = 30.0,
        attempts: int = 3,
        backoff: float = 0.5,
        max_in_flight: int = 8,
        session: Optional[requests.Session] = None,
    ):
        self.endpoint = endpoint
        self.timeout = timeout
        self.attempts = attempts
        self.backoff = backoff
        self.session = session or requests.Session()
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._urls: dict[str, str] = {}
        self._docs: dict[str, ImageDocument] = {}
        self._lock = threading.Lock()

    def _request(self, method: str, url: str, **kwargs) -> requests.Response:
        last: Optional[Exception] = None
        for attempt in range(self.attempts):
            if attempt and self.backoff:
                time.sleep(self.backoff * 2 ** (attempt - 1))
            try:
                with self._slots:
                    resp = self.session.request(method, url, timeout=self.timeout, **kwargs)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last = exc
                continue
            if resp.status_code >= 500:
                last = RuntimeError(f"HTTP {resp.status_code}")
                continue
            if resp.status_code >= 400:
                raise MalformedResponse(f"{url}: HTTP {resp.status_code}")
            return resp
        raise SearchTimeout(f"{url}: gave up after {self.attempts} attempts ({last})")

    def search(self, query: str, top_k: int = 1) -> RetrievalResult:
        resp = self._request("POST", self.endpoint, json={"query": query, "top_k": top_k})
        try:
            payload = resp.json()
            hits = []
            for item in payload["results"]:
                doc_id, score, url = str(item["doc_id"]), float(item["score"]), str(item["image_url"])
                hits.append((doc_id, score))
                with self._lock:
                    self._urls[doc_id] = url
        except (ValueError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad search response: {exc}") from exc
        return RetrievalResult(query=query, top_k=top_k, hits=tuple(hits[:top_k]))

    def document(self, doc_id: str) -> ImageDocument:
        with self._lock:
            if doc_id in self._docs:
                return self._docs[doc_id]
            url = self._urls.get(doc_id)
        if url is None:
            raise KeyError(f"{doc_id} was never returned by a search")
        payload = self._request("GET", url).content
        try:
            w, h = image_size(payload)
        except Exception as exc:
            raise MalformedResponse(f"{url}: not an image") from exc
        doc = ImageDocument(doc_id, w, h, source=payload)
        with self._lock:
            self._docs[doc_id] = doc
        return doc

    def identity(self) -> str:
        return f"remote:{self.endpoint}"


def search_remote(endpoint: str, query: str, top_k: int = 1, **kwargs) -> RetrievalResult:
    return RemoteRetriever(endpoint, **kwargs).search(query, top_k)


def relevance_labels(result_ids: Sequence[str], golden_doc_ids: Iterable[str]) -> list[int]:
    golden = set(golden_doc_ids)
    return [1 if d in golden else 0 for d in result_ids]


# --- planted synthetic corpora ------------------------------------------------

FILLER = (
    "annual report revenue growth market share region quarter table chart figure "
    "slide overview summary total percent index survey population budget policy "
    "energy transport health education climate water trade export import price "
    "sales margin cost profit forecast trend segment customer product service "
    "network capacity output demand supply average median rate level change "
    "north south east west urban rural sector industry agency program project"
).split()

_SYLLABLES = "ka lo mi ne su ta ri vo ze pa qu li bo dra fen gor hul jix kel mor".split()


def _pseudo_word(rng: random.Random, used: set[str]) -> str:
    while True:
        word = "".join(rng.choice(_SYLLABLES) for _ in range(3))
        if word not in used:
            used.add(word)
            return word


def make_planted_corpus(
    n_docs: int = 20,
    n_tasks: int = 4,
    golden_per_task: int = 1,
    seed: int = 0,
    page_size: tuple[int, int] = (1000, 750),
    filler_words: int = 12,
    corpus_id: Optional[str] = None,
) -> tuple[Corpus, list[QueryTask]]:
    """Seeded corpus where each task's golden pages, and only those, carry its
    planted key phrase and answer.

    Each task records ``oracle_queries`` in its metadata: one query per golden
    page that ranks that page first.
    """
    if n_tasks * golden_per_task > n_docs:
        raise ValueError("not enough documents for the requested golden pages")
    rng = random.Random(seed)
    used: set[str] = set()
    corpus_id = corpus_id or f"planted-{seed}"
    w, h = page_size

    doc_ids = [f"doc-{i:04d}" for i in range(n_docs)]
    shuffled = doc_ids[:]
    rng.shuffle(shuffled)
    texts: dict[str, str] = {}
    tasks = []
    cursor = 0
    for t in range(n_tasks):
        key = f"{_pseudo_word(rng, used)} {_pseudo_word(rng, used)}"
        answer = _pseudo_word(rng, used)
        golden, queries = [], []
        for _ in range(golden_per_task):
            doc_id = shuffled[cursor]
            cursor += 1
            sub = _pseudo_word(rng, used)
            filler = " ".join(rng.choice(FILLER) for _ in range(filler_words))
            texts[doc_id] = f"{key} {sub} answer {answer} {filler}"
            golden.append(doc_id)
            queries.append(f"{key} {sub}")
        tasks.append(
            QueryTask(
                id=f"task-{t:03d}",
                question=f"What is the recorded answer for {key}?",
                golden_answer=answer,
                golden_doc_ids=frozenset(golden),
                corpus_id=corpus_id,
                metadata={"oracle_queries": queries, "key": key},
            )
        )
    for doc_id in shuffled[cursor:]:
        filler = " ".join(rng.choice(FILLER) for _ in range(filler_words))
        texts[doc_id] = f"{filler} answer {_pseudo_word(rng, used)}"

    documents = {d: ImageDocument(d, w, h, None, texts[d]) for d in doc_ids}
    return Corpus(documents, corpus_id), tasks


def save_corpus(
    directory: Union[str, Path], corpus: Corpus, tasks: Sequence[QueryTask], write_images: bool = True
) -> Path:
    """Write ``manifest.json`` (plus PNG pages when ``write_images``)."""
    from .perception import load_raw

    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    docs = []
    for doc_id in sorted(corpus.documents):
        doc = corpus[doc_id]
        image = None
        if write_images:
            (root / "images").mkdir(exist_ok=True)
            image = f"images/{doc_id}.png"
            load_raw(doc).save(root / image, format="PNG")
        docs.append({"doc_id": doc_id, "image": image, "width": doc.width, "height": doc.height, "text": doc.text})
    manifest = {"corpus_id": corpus.corpus_id, "documents": docs, "tasks": [t.to_dict() for t in tasks]}
    path = root / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def load_corpus(path: Union[str, Path]) -> tuple[Corpus, list[QueryTask]]:
    """Read a corpus manifest (a directory containing ``manifest.json`` or the file itself)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    data = json.loads(path.read_text())
    documents = {}
    for d in data["documents"]:
        source = str(path.parent / d["image"]) if d.get("image") else None
        documents[d["doc_id"]] = ImageDocument(d["doc_id"], d["width"], d["height"], source, d.get("text", ""))
    tasks = [QueryTask.from_dict(t) for t in data.get("tasks", ())]
    return Corpus(documents, data.get("corpus_id", path.parent.name)), tasks


def corpus_fingerprint(corpus: Corpus) -> str:
    h = hashlib.sha256()
    for doc_id in sorted(corpus.documents):
        doc = corpus[doc_id]
        h.update(f"{doc_id}\0{doc.width}\0{doc.height}\0{doc.text}\0".encode())
    return h.hexdigest()
