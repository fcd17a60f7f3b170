"""Concept-set construction: top-k candidate extraction from a model,
synonym filtering through a ground-truth oracle or an external LLM
provider, plus the noise and supervision-proportion controls used by the
ablation studies.
"""

import json
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import requests

from . import model as model_mod
from .corpus import ConceptAnnotation, Sequence, Vocabulary  # noqa: F401
from .errors import ConfigError, ParseError, SamplingError, TransportError

# Verbatim filter prompt; {target}, {input_sequence} and {decoded_tokens}
# are substituted per request.
PROMPT_TEMPLATE = """Find contextual synonyms for the word {target} in this text: {input_sequence}

Available tokens: {decoded_tokens}

Instructions:

- Find ALL possible synonyms from the available tokens that could replace {target} in this context

- Return ONLY a comma-separated list of synonyms from the available tokens, surrounded by square brackets

- Include every relevant synonym

- NO duplicates allowed

- NO explanations or extra text

- If no synonyms found, return: []

Example format: [word1, word2, word3]

Synonyms for {target}:"""

_REPLY_RE = re.compile(r"^\[(.*)\]$", re.DOTALL)


@dataclass(frozen=True)
class OracleProvider:
    """Filters candidates by the vocabulary's true concept structure."""

    vocab: Vocabulary
    kind = "oracle"

    def filter(self, candidate_ids, seq, position, cap):
        original = int(seq.token_ids[position])
        concept = self.vocab.concept_of[original]
        keep = [int(c) for c in candidate_ids
                if self.vocab.concept_of[c] == concept and int(c) != original]
        return keep[:cap]


@dataclass(frozen=True)
class ExternalProviderConfig:
    base_url: str
    model: str
    timeout: float = 30.0
    max_retries: int = 2
    max_concurrency: int = 4


class ExternalProvider:
    """HTTP completion client speaking the bracketed-list reply grammar.

    Requests use deterministic decoding (temperature 0) with repetition
    penalty 1.1. Replies must be exactly one bracketed comma-separated
    list; anything else is rejected, not repaired. Duplicate synonyms are
    dropped silently and counted in `duplicate_count`.
    """

    kind = "external"

    def __init__(self, config, vocab, session=None):
        self.config = config
        self.vocab = vocab
        self.session = session or requests.Session()
        self.duplicate_count = 0

    def _complete(self, prompt):
        payload = {"model": self.config.model, "prompt": prompt,
                   "temperature": 0.0, "repetition_penalty": 1.1}
        attempts = 0
        last_err = None
        while attempts <= self.config.max_retries:
            attempts += 1
            try:
                resp = self.session.post(self.config.base_url, json=payload,
                                         timeout=self.config.timeout)
                if resp.status_code == 200:
                    return resp.json()["choices"][0]["text"]
                last_err = f"HTTP {resp.status_code}"
            except (requests.RequestException, KeyError, IndexError,
                    json.JSONDecodeError) as e:
                last_err = repr(e)
        raise TransportError(
            f"provider {self.config.base_url} failed after {attempts} "
            f"attempts: {last_err}", attempts=attempts)

    def filter(self, candidate_ids, seq, position, cap):
        tokens = self.vocab.tokens
        target = tokens[int(seq.token_ids[position])]
        prompt = PROMPT_TEMPLATE.format(
            target=target,
            input_sequence=" ".join(tokens[t] for t in seq.token_ids),
            decoded_tokens=", ".join(tokens[int(c)] for c in candidate_ids))
        reply = self._complete(prompt)
        words = parse_provider_reply(reply)
        allowed = {tokens[int(c)]: int(c) for c in candidate_ids}
        out = []
        for w in words:
            if w not in allowed:
                raise ParseError(
                    f"provider returned {w!r}, not among the offered tokens")
            tid = allowed[w]
            if tid in out or w == target:
                self.duplicate_count += 1
                continue
            out.append(tid)
        return out[:cap]


def parse_provider_reply(reply):
    """Parse a '[w1, w2, ...]' reply; reject anything outside the grammar."""
    m = _REPLY_RE.match(reply.strip())
    if m is None:
        raise ParseError(f"provider reply not a bracketed list: {reply!r}")
    inner = m.group(1).strip()
    if not inner:
        return []
    words = [w.strip() for w in inner.split(",")]
    if any(not w for w in words):
        raise ParseError(f"empty item in provider reply: {reply!r}")
    return words


def _candidates_from_row(logit_row, k):
    order = np.argsort(-logit_row, kind="stable")
    return order[:min(k, len(logit_row))].astype(np.int64)


def extract_candidates(params, seq, position, k):
    """Top-k next tokens at the prefix ending just before `position`,
    sorted by descending probability, ties broken by ascending token id."""
    if k < 1:
        raise ConfigError("k must be at least 1")
    if position not in set(int(p) for p in seq.content_positions):
        raise ConfigError(f"position {position} is not content-eligible")
    if position < 1:
        raise ConfigError("position 0 has no prefix to condition on")
    out = model_mod.forward(params, seq.token_ids[:position])
    return _candidates_from_row(out.logits[-1], k)


def filter_synonyms(candidates, seq, position, provider, cap):
    """Provider-selected subset of the candidates, at most `cap` ids."""
    if cap < 0:
        raise ConfigError("cap must be non-negative")
    return tuple(provider.filter(candidates, seq, position, cap))


def build_dataset(params, corpus, provider, k=200, cap=10):
    """Annotate every content position of every sequence.

    One forward pass per sequence supplies the candidate rows for all of
    its positions (identical to per-prefix extraction by causality).
    Positions whose filter returns nothing keep an annotation with an
    empty synonym set; the objective skips those.
    """
    if not corpus:
        raise ConfigError("corpus must be non-empty")

    def annotate(seq):
        logits = model_mod.forward(params, seq.token_ids).logits
        anns = []
        for pos in seq.content_positions:
            pos = int(pos)
            cands = _candidates_from_row(logits[pos - 1], k)
            syns = filter_synonyms(cands, seq, pos, provider, cap)
            anns.append(ConceptAnnotation(pos, int(seq.token_ids[pos]), syns))
        return anns

    if getattr(provider, "kind", None) == "external" \
            and provider.config.max_concurrency > 1:
        with ThreadPoolExecutor(provider.config.max_concurrency) as pool:
            annotated = list(pool.map(annotate, corpus))
    else:
        annotated = [annotate(seq) for seq in corpus]
    return list(zip(corpus, annotated))


def randomize_synonyms(dataset, seed):
    """Noise control: replace every synonym set with a uniform sample of the
    same cardinality from the global pool of synonym tokens."""
    pool = sorted({s for _, anns in dataset for a in anns for s in a.synonyms})
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x7015E]))
    out = []
    for seq, anns in dataset:
        new = []
        for a in anns:
            n = len(a.synonyms)
            if n == 0:
                new.append(a)
                continue
            choices = [t for t in pool if t != a.original]
            if len(choices) < n:
                raise SamplingError(
                    f"pool of {len(choices)} tokens cannot fill a synonym "
                    f"set of size {n}")
            picks = rng.choice(len(choices), size=n, replace=False)
            new.append(ConceptAnnotation(
                a.position, a.original, tuple(choices[i] for i in picks)))
        out.append((seq, new))
    return out


@dataclass(frozen=True)
class SubsampleReport:
    filtered_sequences: int = 0


SUPERVISION_MODES = ("all", "half", "quarter", "last_only")


def subsample_supervision(dataset, mode, seed):
    """Keep a fraction of each sequence's annotations (or only the final
    one). Returns (dataset, report); for last_only, sequences that do not
    end in a content word are dropped and counted in the report."""
    if mode not in SUPERVISION_MODES:
        raise ConfigError(f"mode must be one of {SUPERVISION_MODES}")
    if mode == "all":
        return list(dataset), SubsampleReport(0)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5AB5]))
    if mode == "last_only":
        out = []
        filtered = 0
        for seq, anns in dataset:
            last = len(seq.token_ids) - 1
            keep = [a for a in anns if a.position == last]
            if not keep:
                filtered += 1
                continue
            out.append((seq, keep))
        return out, SubsampleReport(filtered)

    frac = 0.5 if mode == "half" else 0.25
    out = []
    for seq, anns in dataset:
        if not anns:
            out.append((seq, []))
            continue
        k = max(1, int(len(anns) * frac))
        picks = rng.choice(len(anns), size=k, replace=False)
        out.append((seq, sorted((anns[i] for i in picks),
                                key=lambda a: a.position)))
    return out, SubsampleReport(0)
