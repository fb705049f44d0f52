"""Byte corpora and deterministic batching.

A corpus is raw bytes; documents are separated by a single 0x00 byte (the
delimiter stays in the stream as an ordinary token). Segment ids count
delimiters seen before each position, so they are non-decreasing along a
window and drive the chunk-level segment mask.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass
from importlib import resources
from typing import Iterator, Optional

import numpy as np

DOC_DELIMITER = 0


def load_corpus(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except FileNotFoundError:
        raise FileNotFoundError(f"corpus file not found: {path}") from None
    if not data:
        raise ValueError(f"corpus empty: {path}")
    return data


def sample_corpus_path():
    """Path of the bundled ~1 MB synthetic English-like sample."""
    return resources.files("flashkit").joinpath("data/sample_corpus.bin")


_WORDS = (
    "the of and to in is that it was for on are as with his they at be this "
    "have from or one had by word but not what all were we when your can said "
    "there use an each which she do how their if will up other about out many "
    "then them these so some her would make like him into time has look two "
    "more write go see number no way could people my than first water been "
    "called who oil its now find long down day did get come made may part over "
    "new sound take only little work know place year live me back give most "
    "very after thing our just name good sentence man think say great where "
    "help through much before line right too mean old any same tell boy follow "
    "came want show also around form three small set put end does another well "
    "large must big even such because turn here why ask went men read need land "
    "different home us move try kind hand picture again change off play spell "
    "air away animal house point page letter mother answer found study still "
    "learn should america world high every near add food between own below "
    "country plant last school father keep tree never start city earth eye "
    "light thought head under story saw left dont few while along might close "
    "something seem next hard open example begin life always those both paper "
    "together got group often run important until children side feet car mile "
    "night walk white sea began grow took river four carry state once book "
    "hear stop without second later miss idea enough eat face watch far indian "
    "really almost let above girl sometimes mountain cut young talk soon list "
    "song being leave family body music color stand sun question fish area "
    "mark dog horse birds problem complete room knew since ever piece told "
    "usually didnt friends easy heard order red door sure become top ship "
    "across today during short better best however low hours black products "
    "happened whole measure remember early waves reached"
).split()


def synthetic_corpus(n_bytes: int, seed: int = 0, mean_doc_words: int = 600) -> bytes:
    """English-like filler text with Zipf word frequencies and 0x00-separated
    documents; deterministic for a given seed. Serves as the bundled sample
    and as benchmark fodder."""
    rng = np.random.default_rng([seed, 0x0C0F])
    ranks = np.arange(1, len(_WORDS) + 1, dtype=np.float64)
    probs = 1.0 / ranks
    probs /= probs.sum()
    out = bytearray()
    words_in_doc = 0
    doc_len = int(rng.integers(mean_doc_words // 2, mean_doc_words * 2))
    sentence_left = int(rng.integers(4, 13))
    start_sentence = True
    while len(out) < n_bytes:
        word = _WORDS[int(rng.choice(len(_WORDS), p=probs))]
        if start_sentence:
            word = word.capitalize()
            start_sentence = False
        out.extend(word.encode("ascii"))
        words_in_doc += 1
        sentence_left -= 1
        if sentence_left <= 0:
            out.extend(b". ")
            sentence_left = int(rng.integers(4, 13))
            start_sentence = True
            if rng.random() < 0.1:
                out.extend(b"\n")
        else:
            out.extend(b" ")
        if words_in_doc >= doc_len:
            out.append(DOC_DELIMITER)
            words_in_doc = 0
            doc_len = int(rng.integers(mean_doc_words // 2, mean_doc_words * 2))
            start_sentence = True
    return bytes(out[:n_bytes])


@dataclass
class Batch:
    tokens: np.ndarray       # [B, T] int64 byte ids
    segment_ids: np.ndarray  # [B, T] non-decreasing per row

    def chunked(self, c: int) -> tuple[np.ndarray, np.ndarray]:
        """[B, G, C] views for flash kinds."""
        b, t = self.tokens.shape
        if t % c:
            raise ValueError(f"chunk size {c} does not divide window {t}")
        return (self.tokens.reshape(b, t // c, c),
                self.segment_ids.reshape(b, t // c, c))


def make_batches(data: bytes, batch: int, context: int, seed: int,
                 chunk: Optional[int] = None) -> Iterator[Batch]:
    """Endless deterministic stream of [batch, context] windows.

    Window offsets are drawn from a seeded generator; the same seed yields
    the identical stream. When `chunk` is given it must divide `context` —
    no silent padding.
    """
    if chunk is not None and context % chunk:
        raise ValueError(f"chunk size {chunk} must divide context length {context}")
    arr = np.frombuffer(data, dtype=np.uint8).astype(np.int64)
    if arr.size <= context:
        raise ValueError(f"corpus of {arr.size} bytes too small for context {context}")
    # segment id at i = number of delimiters strictly before i
    seg = np.zeros(arr.size, dtype=np.int64)
    np.cumsum(arr[:-1] == DOC_DELIMITER, out=seg[1:])
    rng = np.random.default_rng([seed, 0xBA7C])
    while True:
        offs = rng.integers(0, arr.size - context, size=batch)
        tokens = np.stack([arr[o:o + context] for o in offs])
        ids = np.stack([seg[o:o + context] for o in offs])
        yield Batch(tokens=tokens, segment_ids=ids)


class Prefetcher:
    """Single background thread pulling batches ahead, order-preserving.

    Used when FLASHKIT_THREADS > 1; with one worker the stream is consumed
    synchronously and timing stays deterministic.
    """

    def __init__(self, it: Iterator[Batch], depth: int = 2):
        self._q: queue.Queue = queue.Queue(maxsize=depth)
        self._it = it
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._stop = False
        self._thread.start()

    def _run(self):
        for item in self._it:
            if self._stop:
                break
            self._q.put(item)

    def __iter__(self):
        return self

    def __next__(self) -> Batch:
        return self._q.get()

    def close(self):
        self._stop = True
