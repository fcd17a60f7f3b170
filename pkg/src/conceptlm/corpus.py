"""Synthetic concept-structured corpus: vocabulary, grammar templates,
ground-truth similarity, and the JSONL interchange format.

The vocabulary is word-level: every token is a whole word, so every
content token is a single token by construction. Content tokens are
organized as domains > concepts > member tokens; tokens within one
concept are contextually interchangeable in the generated grammar, which
is what gives the corpus a known ground truth to evaluate against.

Sentences are produced from a small set of fixed structural frames. Each
sentence opens with a begin marker and a domain-marker function word, and
alternates function-word runs with content slots. Concepts are sampled
from a frame/slot-cued prior (so context predicts the concept), the member
token is sampled uniformly within the concept, and with some probability
the function word right after a content token is that token's preferred
collocate. The collocation signal is the only part of the distribution
that depends on the member token rather than its concept; it gives plain
next-token training an incentive to keep same-concept embeddings apart.
"""

import json
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import CapError, ConfigError, ParseError, VocabularyError

CLASS_CONTENT = 0
CLASS_FUNCTION = 1
CLASS_SPECIAL = 2

CLASS_NAMES = {CLASS_CONTENT: "content", CLASS_FUNCTION: "function",
               CLASS_SPECIAL: "special"}

SPECIAL_TOKENS = ("<bos>",)

SAME_CONCEPT_SCORE = 1.0
SAME_DOMAIN_SCORE = 0.5
CROSS_DOMAIN_SCORE = 0.0

# Knuth multiplicative hash; maps a content token to its preferred collocate.
_COLLOC_MULT = 2654435761


@dataclass(frozen=True)
class Vocabulary:
    """Word-level token table with concept/domain structure.

    tokens[i] is the string for id i; token_class[i] is one of the CLASS_*
    codes; concept_of[i] is the global concept id for content tokens and -1
    otherwise; domain_of[c] is the domain of concept c.
    """

    tokens: tuple
    token_class: np.ndarray
    concept_of: np.ndarray
    domain_of: np.ndarray

    @property
    def n_tokens(self):
        return len(self.tokens)

    @property
    def n_concepts(self):
        return len(self.domain_of)

    @property
    def n_domains(self):
        return int(self.domain_of.max()) + 1 if self.n_concepts else 0

    @cached_property
    def token_to_id(self):
        return {t: i for i, t in enumerate(self.tokens)}

    @cached_property
    def bos_id(self):
        return self.token_to_id["<bos>"]

    @cached_property
    def content_ids(self):
        return np.flatnonzero(self.token_class == CLASS_CONTENT)

    @cached_property
    def function_ids(self):
        return np.flatnonzero(self.token_class == CLASS_FUNCTION)

    @cached_property
    def concept_members(self):
        members = [[] for _ in range(self.n_concepts)]
        for tid in self.content_ids:
            members[self.concept_of[tid]].append(int(tid))
        return [tuple(m) for m in members]

    def validate(self):
        v = self.n_tokens
        if self.token_class.shape != (v,) or self.concept_of.shape != (v,):
            raise ConfigError("vocabulary arrays disagree on token count")
        if len(set(self.tokens)) != v:
            raise ConfigError("duplicate token strings")
        for tid in range(v):
            is_content = self.token_class[tid] == CLASS_CONTENT
            if is_content != (self.concept_of[tid] >= 0):
                raise ConfigError(f"token {tid}: class and concept_of disagree")
        for c, members in enumerate(self.concept_members):
            if len(members) < 2:
                raise ConfigError(f"concept {c} has fewer than 2 member tokens")
        return self

    def to_json(self):
        return json.dumps({
            "tokens": list(self.tokens),
            "token_class": self.token_class.tolist(),
            "concept_of": self.concept_of.tolist(),
            "domain_of": self.domain_of.tolist(),
        }, separators=(",", ":"))

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        return cls(
            tokens=tuple(d["tokens"]),
            token_class=np.asarray(d["token_class"], dtype=np.int8),
            concept_of=np.asarray(d["concept_of"], dtype=np.int32),
            domain_of=np.asarray(d["domain_of"], dtype=np.int32),
        )


@dataclass(frozen=True)
class Sequence:
    """Token ids plus the sorted positions eligible for concept supervision."""

    token_ids: np.ndarray
    content_positions: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "token_ids",
                           np.asarray(self.token_ids, dtype=np.int32))
        object.__setattr__(self, "content_positions",
                           np.asarray(self.content_positions, dtype=np.int32))

    def __len__(self):
        return len(self.token_ids)

    def __eq__(self, other):
        return (isinstance(other, Sequence)
                and np.array_equal(self.token_ids, other.token_ids)
                and np.array_equal(self.content_positions, other.content_positions))


@dataclass(frozen=True)
class ConceptAnnotation:
    """One supervised position: original token id and its synonym ids.

    The original is never stored inside `synonyms`; scoring always counts
    the original's probability in the concept mass regardless.
    """

    position: int
    original: int
    synonyms: tuple

    def __post_init__(self):
        syns = tuple(int(s) for s in self.synonyms)
        if len(set(syns)) != len(syns):
            raise ConfigError("duplicate synonym ids in annotation")
        if self.original in syns:
            raise ConfigError("original token listed in its own synonym set")
        object.__setattr__(self, "synonyms", syns)


@dataclass
class GroundTruthSimilarity:
    """Graded similarity over all content-token pairs.

    Same concept scores 1.0, same domain 0.5, different domains 0.0.
    """

    token_a: np.ndarray
    token_b: np.ndarray
    score: np.ndarray
    _lookup: dict = field(default=None, repr=False)

    def __len__(self):
        return len(self.score)

    def query(self, a, b):
        if self._lookup is None:
            self._lookup = {}
            for x, y, s in zip(self.token_a, self.token_b, self.score):
                self._lookup[(int(x), int(y))] = float(s)
                self._lookup[(int(y), int(x))] = float(s)
        return self._lookup[(a, b)]


def build_vocabulary(n_domains, concepts_per_domain, tokens_per_concept,
                     n_function, seed):
    """Deterministically build a vocabulary; ids are a seeded permutation."""
    if n_domains < 1 or concepts_per_domain < 1:
        raise ConfigError("domain and concept counts must be at least 1")
    if tokens_per_concept < 2:
        raise ConfigError("tokens_per_concept must be at least 2 "
                          "(a concept with one member has no synonym)")
    if n_function < 0:
        raise ConfigError("n_function must be non-negative")

    tokens = list(SPECIAL_TOKENS)
    classes = [CLASS_SPECIAL] * len(SPECIAL_TOKENS)
    concepts = [-1] * len(SPECIAL_TOKENS)
    for f in range(n_function):
        tokens.append(f"f{f:03d}")
        classes.append(CLASS_FUNCTION)
        concepts.append(-1)
    domain_of = []
    for d in range(n_domains):
        for c in range(concepts_per_domain):
            gid = len(domain_of)
            domain_of.append(d)
            for t in range(tokens_per_concept):
                tokens.append(f"w{d}{chr(97 + c % 26)}{t}")
                classes.append(CLASS_CONTENT)
                concepts.append(gid)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x56C0]))
    perm = rng.permutation(len(tokens))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    vocab = Vocabulary(
        tokens=tuple(tokens[i] for i in perm),
        token_class=np.asarray(classes, dtype=np.int8)[perm],
        concept_of=np.asarray(concepts, dtype=np.int32)[perm],
        domain_of=np.asarray(domain_of, dtype=np.int32),
    )
    return vocab.validate()


# Structural frames. Ends-in-content and the presence of an adjacent
# content pair make each frame identifiable from the emitted tokens.
@dataclass(frozen=True)
class _Frame:
    name: str
    min_content: int
    paired: bool          # one adjacent content-content pair
    final_content: bool   # sequence ends on a content token


FRAMES = (
    _Frame("spaced", 1, False, False),
    _Frame("spaced_final", 1, False, True),
    _Frame("paired", 2, True, False),
    _Frame("paired_final", 2, True, True),
)


@dataclass(frozen=True)
class Profile:
    frame_weights: tuple
    domain_decay: float


PROFILES = {
    "A": Profile(frame_weights=(0.40, 0.30, 0.20, 0.10), domain_decay=0.70),
    "B": Profile(frame_weights=(0.10, 0.20, 0.30, 0.40), domain_decay=1.40),
}


def _frame_max_content(frame, length):
    # bos + marker + m content + mandatory separators (+ tail when not final)
    budget = length - 2
    m = budget
    while m >= frame.min_content:
        mandatory = (m - 2 if frame.paired else m - 1)
        mandatory = max(mandatory, 0) + (0 if frame.final_content else 1)
        if m + mandatory <= budget:
            return m
        m -= 1
    return 0


def _domain_prior(profile, n_domains):
    w = profile.domain_decay ** np.arange(n_domains)
    return w / w.sum()


def _expected_fraction(profile, target, min_len, max_len):
    total = 0.0
    n = 0
    for length in range(min_len, max_len + 1):
        for frame, fw in zip(FRAMES, profile.frame_weights):
            m = int(round(target * length))
            m = min(max(m, frame.min_content), _frame_max_content(frame, length))
            total += fw * m / length
        n += 1
    return total / n


def generate_corpus(vocab, n_sequences, template_profile,
                    target_content_fraction, seed, *, min_len=8, max_len=64,
                    collocation_strength=0.5, concept_sharpness=5.0):
    """Generate grammar-templated sequences; pure in (vocab, config, seed)."""
    if not 0.0 < target_content_fraction < 1.0:
        raise ConfigError("target_content_fraction must be in (0, 1)")
    if template_profile not in PROFILES:
        raise ConfigError(f"unknown template profile {template_profile!r}")
    if n_sequences < 0:
        raise ConfigError("n_sequences must be non-negative")
    if min_len < 6 or max_len < min_len:
        raise ConfigError("need 6 <= min_len <= max_len")
    n_domains = vocab.n_domains
    n_fillers = len(vocab.function_ids) - n_domains
    if n_fillers < 1:
        raise ConfigError("need more function tokens than domains "
                          "(one marker per domain plus at least one filler)")
    profile = PROFILES[template_profile]
    expected = _expected_fraction(profile, target_content_fraction,
                                  min_len, max_len)
    if abs(expected - target_content_fraction) > 0.04:
        raise ConfigError(
            f"target content fraction {target_content_fraction} unreachable "
            f"for the template set (achievable mean {expected:.3f})")

    markers = vocab.function_ids[:n_domains]
    fillers = vocab.function_ids[n_domains:]
    domain_p = _domain_prior(profile, n_domains)
    per_domain = vocab.n_concepts // n_domains
    members = vocab.concept_members

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0DE]))
    out = []
    for _ in range(n_sequences):
        length = int(rng.integers(min_len, max_len + 1))
        frame_id = int(rng.choice(len(FRAMES), p=profile.frame_weights))
        frame = FRAMES[frame_id]
        domain = int(rng.choice(n_domains, p=domain_p))
        m = int(round(target_content_fraction * length))
        m = min(max(m, frame.min_content), _frame_max_content(frame, length))

        # gap g0 before the first content slot, m-1 separator gaps, plus a
        # tail gap unless the frame ends on content. The paired frames zero
        # one separator to create the adjacent content pair.
        n_gaps = m + (0 if frame.final_content else 1)
        minima = np.ones(n_gaps, dtype=np.int64)
        minima[0] = 0
        pair_gap = None
        if frame.paired:
            pair_gap = 1 + int(rng.integers(m - 1))
            minima[pair_gap] = 0
        extra = length - 2 - m - int(minima.sum())
        open_gaps = n_gaps - (1 if pair_gap is not None else 0)
        probs = np.full(n_gaps, 1.0 / open_gaps)
        if pair_gap is not None:
            probs[pair_gap] = 0.0
        gaps = minima + rng.multinomial(extra, probs)

        ids = [vocab.bos_id, int(markers[domain])]
        content_positions = []
        prev_content = -1
        for slot in range(m):
            run = int(gaps[slot])
            for r in range(run):
                if (r == 0 and prev_content >= 0
                        and rng.random() < collocation_strength):
                    fid = fillers[(prev_content * _COLLOC_MULT) % n_fillers]
                else:
                    fid = fillers[int(rng.integers(n_fillers))]
                ids.append(int(fid))
            cue = (frame_id + slot) % per_domain
            w = np.ones(per_domain)
            w[cue] += concept_sharpness
            local = int(rng.choice(per_domain, p=w / w.sum()))
            concept = domain * per_domain + local
            tok = members[concept][int(rng.integers(len(members[concept])))]
            content_positions.append(len(ids))
            ids.append(tok)
            prev_content = tok
        if not frame.final_content:
            run = int(gaps[m])
            for r in range(run):
                if (r == 0 and rng.random() < collocation_strength):
                    fid = fillers[(prev_content * _COLLOC_MULT) % n_fillers]
                else:
                    fid = fillers[int(rng.integers(n_fillers))]
                ids.append(int(fid))
        out.append(Sequence(np.asarray(ids, dtype=np.int32),
                            np.asarray(content_positions, dtype=np.int32)))
    return out


def ground_truth_similarity(vocab):
    """All content-token pairs graded same-concept/same-domain/cross-domain."""
    ids = vocab.content_ids
    n = len(ids)
    a_out, b_out, s_out = [], [], []
    concept = vocab.concept_of
    domain = vocab.domain_of
    for i in range(n):
        for j in range(i + 1, n):
            a, b = int(ids[i]), int(ids[j])
            if concept[a] == concept[b]:
                s = SAME_CONCEPT_SCORE
            elif domain[concept[a]] == domain[concept[b]]:
                s = SAME_DOMAIN_SCORE
            else:
                s = CROSS_DOMAIN_SCORE
            a_out.append(a)
            b_out.append(b)
            s_out.append(s)
    return GroundTruthSimilarity(
        token_a=np.asarray(a_out, dtype=np.int32),
        token_b=np.asarray(b_out, dtype=np.int32),
        score=np.asarray(s_out, dtype=np.float64),
    )


def export_annotated(path, dataset, vocab):
    """Write (Sequence, annotations) pairs in the JSONL interchange format."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq, anns in dataset:
            rec = {
                "tokens": [vocab.tokens[t] for t in seq.token_ids],
                "content_positions": [int(p) for p in seq.content_positions],
                "concepts": [
                    {"pos": int(a.position),
                     "original": vocab.tokens[a.original],
                     "synonyms": [vocab.tokens[s] for s in a.synonyms]}
                    for a in anns
                ],
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def ingest_annotated(path, vocab, cap=10, min_tokens=2):
    """Read the JSONL interchange format back into (Sequence, annotations).

    Rejects malformed records with the offending line number, unknown token
    strings, synonym lists over the cap, and sequences shorter than
    min_tokens (nothing shorter than two tokens can be scored).
    """
    t2i = vocab.token_to_id
    dataset = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ParseError(f"invalid JSON: {e.msg}", lineno) from e
            if not isinstance(rec, dict) or not {"tokens", "content_positions",
                                                 "concepts"} <= rec.keys():
                raise ParseError("record missing required keys", lineno)
            try:
                ids = [t2i[t] for t in rec["tokens"]]
            except KeyError as e:
                raise VocabularyError(
                    f"line {lineno}: unknown token {e.args[0]!r}") from None
            if len(ids) < min_tokens:
                raise ParseError(
                    f"sequence of {len(ids)} tokens is below the minimum "
                    f"of {min_tokens}", lineno)
            positions = rec["content_positions"]
            if positions != sorted(set(int(p) for p in positions)):
                raise ParseError("content_positions not strictly increasing",
                                 lineno)
            for p in positions:
                if not 0 <= p < len(ids):
                    raise ParseError(f"content position {p} out of range",
                                     lineno)
                if vocab.token_class[ids[p]] != CLASS_CONTENT:
                    raise ParseError(
                        f"position {p} does not hold a content token", lineno)
            anns = []
            seen_pos = set()
            for c in rec["concepts"]:
                pos = int(c["pos"])
                if pos not in positions:
                    raise ParseError(f"concept at non-content position {pos}",
                                     lineno)
                if pos in seen_pos:
                    raise ParseError(f"duplicate concept at position {pos}",
                                     lineno)
                seen_pos.add(pos)
                try:
                    orig = t2i[c["original"]]
                    syns = [t2i[s] for s in c["synonyms"]]
                except KeyError as e:
                    raise VocabularyError(
                        f"line {lineno}: unknown token {e.args[0]!r}") from None
                if orig != ids[pos]:
                    raise ParseError(
                        f"original {c['original']!r} does not match the "
                        f"token at position {pos}", lineno)
                if len(syns) > cap:
                    raise CapError(
                        f"synonym set of size {len(syns)} exceeds cap {cap}",
                        lineno)
                if len(set(syns)) != len(syns) or orig in syns:
                    raise ParseError("synonym list has duplicates or "
                                     "contains the original", lineno)
                anns.append(ConceptAnnotation(pos, orig, tuple(syns)))
            anns.sort(key=lambda a: a.position)
            dataset.append((Sequence(np.asarray(ids, dtype=np.int32),
                                     np.asarray(positions, dtype=np.int32)),
                            anns))
    return dataset
