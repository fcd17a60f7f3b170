"""Evaluation battery: content-word and global perplexity/accuracy,
clustering geometry of hidden states, Spearman alignment against the
ground-truth similarity benchmark, and paired bootstrap confidence
intervals for per-token metric differences.
"""

import csv
import logging
from dataclasses import dataclass
from itertools import product

import numpy as np

from . import kernels, model as model_mod
from .errors import (ConfigError, EmptyMetricError, NumericalError,
                     PairingError)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PerTokenRecord:
    sequence_id: int
    position: int
    is_content: bool
    nll: float
    correct: bool


class ScoredCorpus:
    """Column-wise store of per-token records (one per scored position)."""

    def __init__(self, sequence_ids, positions, is_content, nll, correct):
        self.sequence_ids = np.asarray(sequence_ids, dtype=np.int64)
        self.positions = np.asarray(positions, dtype=np.int64)
        self.is_content = np.asarray(is_content, dtype=bool)
        self.nll = np.asarray(nll, dtype=np.float64)
        self.correct = np.asarray(correct, dtype=bool)

    def __len__(self):
        return len(self.nll)

    def __getitem__(self, i):
        return PerTokenRecord(int(self.sequence_ids[i]), int(self.positions[i]),
                              bool(self.is_content[i]), float(self.nll[i]),
                              bool(self.correct[i]))

    def subset(self, mask):
        return ScoredCorpus(self.sequence_ids[mask], self.positions[mask],
                            self.is_content[mask], self.nll[mask],
                            self.correct[mask])

    def content_subset(self):
        return self.subset(self.is_content)


def _sequences(corpus):
    return [item[0] if isinstance(item, tuple) else item for item in corpus]


def score_corpus(params, corpus):
    """One PerTokenRecord per next-token position of every sequence.

    Over-length sequences are truncated to the model context; the count is
    logged as a warning.
    """
    seqs = _sequences(corpus)
    ctx = params.config.max_context
    cols = ([], [], [], [], [])
    truncated = 0
    for sid, seq in enumerate(seqs):
        ids = np.asarray(seq.token_ids)
        if len(ids) > ctx:
            ids = ids[:ctx]
            truncated += 1
        if len(ids) < 2:
            continue
        logits = model_mod.forward(params, ids).logits
        nll, _ = kernels.ntp_terms(logits[:-1], ids[1:].astype(np.int64))
        content = set(int(p) for p in seq.content_positions)
        pred = np.argmax(logits[:-1], axis=1)  # ties: lowest token id
        for p in range(1, len(ids)):
            cols[0].append(sid)
            cols[1].append(p)
            cols[2].append(p in content)
            cols[3].append(float(nll[p - 1]))
            cols[4].append(int(pred[p - 1]) == int(ids[p]))
    if truncated:
        log.warning("truncated %d over-length sequences to context %d",
                    truncated, ctx)
    return ScoredCorpus(*cols)


def _ppl(records, mask, what):
    if not np.any(mask):
        raise EmptyMetricError(f"no {what} records to average")
    return float(np.exp(records.nll[mask].mean()))


def content_word_ppl(records):
    """exp of the mean NLL over content-word positions only."""
    return _ppl(records, records.is_content, "content")


def global_ppl(records):
    return _ppl(records, np.ones(len(records), dtype=bool), "scored")


def content_accuracy(records):
    if not np.any(records.is_content):
        raise EmptyMetricError("no content records to average")
    return float(records.correct[records.is_content].mean())


def global_accuracy(records):
    if len(records) == 0:
        raise EmptyMetricError("no scored records to average")
    return float(records.correct.mean())


def average_ranks(values):
    """1-based ranks with ties receiving the average of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(len(v), dtype=np.float64)
    i = 0
    sv = v[order]
    while i < len(v):
        j = i
        while j + 1 < len(v) and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or len(x) < 2:
        raise ConfigError("need two equal-length vectors of at least 2 values")
    rx = average_ranks(x) - average_ranks(x).mean()
    ry = average_ranks(y) - average_ranks(y).mean()
    denom = np.sqrt((rx * rx).sum() * (ry * ry).sum())
    if denom == 0.0:
        raise NumericalError("rank correlation undefined for constant input")
    return float((rx * ry).sum() / denom)


@dataclass
class ClusteringResult:
    clustering_score: float
    centroid_similarity: float
    intra: float
    inter: float
    n_groups: int
    n_vectors: int
    skipped_singletons: int


def _normalize_rows(m):
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise NumericalError("zero-norm hidden state")
    return m / norms


def cluster_score_from_vectors(vectors, groups):
    """Clustering geometry of labeled vectors.

    intra is the mean pairwise cosine within a group (pooled over groups),
    inter the mean across groups; the score is intra minus inter. Groups
    holding a single vector contribute no intra pairs and are counted as
    skipped. Centroid similarity is the mean pairwise cosine of per-group
    mean vectors.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    groups = np.asarray(groups)
    unique = np.unique(groups)
    if len(unique) < 2:
        raise EmptyMetricError("need at least two concept groups")
    normed = _normalize_rows(vectors)
    sims = normed @ normed.T
    same = groups[:, None] == groups[None, :]
    upper = np.triu(np.ones_like(same, dtype=bool), k=1)
    intra_pairs = sims[same & upper]
    inter_pairs = sims[~same & upper]
    skipped = sum(1 for g in unique if np.sum(groups == g) < 2)
    if len(intra_pairs) == 0:
        raise EmptyMetricError("every concept group is a singleton")
    intra = float(intra_pairs.mean())
    inter = float(inter_pairs.mean())

    centroids = np.asarray([vectors[groups == g].mean(axis=0)
                            for g in unique])
    cn = _normalize_rows(centroids)
    cupper = np.triu(np.ones((len(unique), len(unique)), dtype=bool), k=1)
    return ClusteringResult(
        clustering_score=intra - inter,
        centroid_similarity=float((cn @ cn.T)[cupper].mean()),
        intra=intra, inter=inter, n_groups=len(unique),
        n_vectors=len(vectors), skipped_singletons=int(skipped))


def clustering_metrics(params, dataset, vocab, sample, seed=0):
    """Intra minus inter concept cosine similarity of hidden states.

    For each sampled sequence, one annotated content word is replaced by
    each member of its synonym set; the final-layer hidden state at that
    position is collected per variant and grouped by the original token's
    concept.
    """
    eligible = [(seq, [a for a in anns if len(a.synonyms) > 0])
                for seq, anns in dataset]
    eligible = [(seq, anns) for seq, anns in eligible if anns]
    if not eligible:
        raise EmptyMetricError("no annotated sequences with synonyms")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC105]))
    take = min(sample, len(eligible))
    chosen = rng.choice(len(eligible), size=take, replace=False)

    vectors = []
    groups = []
    for idx in chosen:
        seq, anns = eligible[idx]
        ann = anns[int(rng.integers(len(anns)))]
        concept = int(vocab.concept_of[ann.original])
        for tok in (ann.original, *ann.synonyms):
            ids = np.asarray(seq.token_ids).copy()
            ids[ann.position] = tok
            hidden = model_mod.forward(params, ids).final_hidden
            vectors.append(hidden[ann.position])
            groups.append(concept)
    return cluster_score_from_vectors(np.asarray(vectors),
                                      np.asarray(groups))


def embed_tokens(params, token_ids, vocab, contexts=None):
    """Mean-pooled, L2-normalized final hidden states for single tokens.

    Each token is wrapped in a probe of a begin marker plus optional
    context; pooling spans every non-marker position. With several probe
    templates the pooled vectors are averaged before normalization.
    """
    if contexts is None:
        contexts = [((), ())]
    out = {}
    for tid in token_ids:
        pooled = []
        for prefix, suffix in contexts:
            ids = np.asarray([vocab.bos_id, *prefix, int(tid), *suffix],
                             dtype=np.int64)
            hidden = model_mod.forward(params, ids).final_hidden
            pooled.append(hidden[1:].mean(axis=0))
        vec = np.mean(pooled, axis=0)
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            raise NumericalError(f"zero-norm pooled vector for token {tid}")
        out[int(tid)] = vec / norm
    return out


def semantic_alignment(params, benchmark, vocab, contexts=None):
    """Spearman correlation of model cosine similarity against the
    ground-truth pair scores."""
    token_ids = sorted(set(benchmark.token_a.tolist())
                       | set(benchmark.token_b.tolist()))
    vecs = embed_tokens(params, token_ids, vocab, contexts)
    model_scores = [float(vecs[int(a)] @ vecs[int(b)])
                    for a, b in zip(benchmark.token_a, benchmark.token_b)]
    return spearman(model_scores, benchmark.score)


@dataclass
class BootstrapCI:
    lower: float
    upper: float
    resamples: int
    level: float
    point_estimate: float


def _metric_diff(records_a, records_b, metric):
    if len(records_a) != len(records_b) \
            or not np.array_equal(records_a.sequence_ids, records_b.sequence_ids) \
            or not np.array_equal(records_a.positions, records_b.positions):
        raise PairingError("records are not aligned on (sequence, position)")
    if len(records_a) == 0:
        raise EmptyMetricError("no records to bootstrap")
    if metric == "nll":
        return records_b.nll - records_a.nll
    if metric == "acc":
        return records_b.correct.astype(np.float64) \
            - records_a.correct.astype(np.float64)
    raise ConfigError(f"metric must be nll or acc, got {metric!r}")


def paired_bootstrap(records_a, records_b, metric, resamples=1000,
                     level=0.95, seed=0, method="resample"):
    """Percentile CI for the mean per-position difference (b minus a).

    `method="exhaustive"` enumerates all n**n equally likely resamples
    instead of drawing them; only feasible for very small n.
    """
    if not 0.0 < level < 1.0:
        raise ConfigError("level must be in (0, 1)")
    diff = _metric_diff(records_a, records_b, metric)
    n = len(diff)
    if method == "exhaustive":
        if n ** n > 20_000_000:
            raise ConfigError(f"exhaustive enumeration infeasible for n={n}")
        means = np.asarray([diff[list(ix)].mean()
                            for ix in product(range(n), repeat=n)])
        resamples = len(means)
    elif method == "resample":
        if resamples < 1:
            raise ConfigError("resamples must be at least 1")
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB007]))
        idx = rng.integers(0, n, size=(resamples, n), dtype=np.int64)
        means = kernels.bootstrap_means(diff, idx)
    else:
        raise ConfigError(f"method must be resample or exhaustive")
    alpha = 100.0 * (1.0 - level) / 2.0
    lower, upper = np.percentile(means, [alpha, 100.0 - alpha])
    return BootstrapCI(lower=float(lower), upper=float(upper),
                       resamples=resamples, level=level,
                       point_estimate=float(diff.mean()))


@dataclass
class EvalReport:
    domain: str
    content_ppl: float
    global_ppl: float
    content_acc: float
    global_acc: float
    clustering_score: float
    centroid_similarity: float
    spearman_alignment: float
    content_nll_diff_ci: BootstrapCI = None
    content_acc_diff_ci: BootstrapCI = None


def evaluate_model(params, heldouts, benchmark, vocab, base_records=None,
                   clustering_sample=150, resamples=1000, level=0.95,
                   seed=0):
    """Full EvalReport per evaluation domain.

    `heldouts` maps a domain tag to an annotated dataset. When
    `base_records` supplies a reference model's ScoredCorpus per domain,
    paired bootstrap CIs of the content-word NLL and accuracy differences
    (this model minus reference) are attached.
    """
    alignment = semantic_alignment(params, benchmark, vocab)
    reports = {}
    scored = {}
    for domain, dataset in heldouts.items():
        records = score_corpus(params, dataset)
        scored[domain] = records
        clus = clustering_metrics(params, dataset, vocab, clustering_sample,
                                  seed=seed)
        nll_ci = acc_ci = None
        if base_records is not None and domain in base_records:
            base_c = base_records[domain].content_subset()
            mine_c = records.content_subset()
            nll_ci = paired_bootstrap(base_c, mine_c, "nll", resamples,
                                      level, seed=seed)
            acc_ci = paired_bootstrap(base_c, mine_c, "acc", resamples,
                                      level, seed=seed)
        reports[domain] = EvalReport(
            domain=domain,
            content_ppl=content_word_ppl(records),
            global_ppl=global_ppl(records),
            content_acc=content_accuracy(records),
            global_acc=global_accuracy(records),
            clustering_score=clus.clustering_score,
            centroid_similarity=clus.centroid_similarity,
            spearman_alignment=alignment,
            content_nll_diff_ci=nll_ci,
            content_acc_diff_ci=acc_ci)
    return reports, scored


RECORDS_CSV_FIELDS = ("sequence_id", "position", "is_content", "nll",
                      "correct")


def write_records_csv(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RECORDS_CSV_FIELDS)
        for i in range(len(records)):
            r = records[i]
            w.writerow([r.sequence_id, r.position, int(r.is_content),
                        repr(r.nll), int(r.correct)])


def read_records_csv(path):
    cols = ([], [], [], [], [])
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            cols[0].append(int(row["sequence_id"]))
            cols[1].append(int(row["position"]))
            cols[2].append(bool(int(row["is_content"])))
            cols[3].append(float(row["nll"]))
            cols[4].append(bool(int(row["correct"])))
    return ScoredCorpus(*cols)
