"""Composite training objective: next-token loss interpolated with a
synonym-set (concept) loss under a probability-mass gate.

For a supervised position with original token T and synonym set T*, the
concept term is -log of the total probability mass on T* plus T. Once that
mass exceeds the gate threshold the term is zeroed for that annotation, so
a concept the model already captures stops exerting optimization pressure.
The batch loss is (1 - w) * ntp + w * concept where ntp averages over all
next-token positions and concept averages over active (non-gated,
non-empty) annotations; gated annotations leave the denominator so the
concept weight keeps a scale-free meaning.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, NumericalError, ShapeError


@dataclass(frozen=True)
class ObjectiveConfig:
    concept_weight: float = 0.0
    mass_threshold: float = 0.6
    include_original_in_mass: bool = True

    def __post_init__(self):
        if not 0.0 <= self.concept_weight <= 1.0:
            raise ConfigError("concept_weight must be in [0, 1]")
        if not 0.0 <= self.mass_threshold <= 1.0:
            raise ConfigError("mass_threshold must be in [0, 1]")


@dataclass
class LossBreakdown:
    ntp_loss: float
    concept_loss: float
    combined: float
    gated_count: int
    active_count: int
    skipped_empty: int
    concept_weight: float
    mass_threshold: float

    @property
    def total_annotations(self):
        return self.gated_count + self.active_count + self.skipped_empty


def ntp_loss(logits, targets):
    """Mean negative log-softmax probability of the targets."""
    logits = np.asarray(logits)
    targets = np.asarray(targets)
    if logits.ndim != 2 or targets.ndim != 1 \
            or logits.shape[0] != targets.shape[0]:
        raise ShapeError("need one logit row per target")
    if logits.shape[0] == 0:
        raise ShapeError("need at least one position")
    nll, _ = kernels.ntp_terms(logits, targets.astype(np.int64))
    return float(nll.mean())


def concept_loss(logit_row, synonyms, original, threshold=0.6,
                 include_original=True):
    """Set-mass loss for one annotation; returns (loss, gated).

    Computed directly from the row (independent of the batched kernels) so
    it can serve as a second route in tests.
    """
    row = np.asarray(logit_row, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise NumericalError("non-finite logit row")
    ids = list(dict.fromkeys(int(s) for s in synonyms))
    if include_original and int(original) not in ids:
        ids.append(int(original))
    if not ids:
        raise ConfigError("empty concept set: no synonyms and the original "
                          "excluded from the mass")
    m = row.max()
    e = np.exp(row - m)
    mass = float(e[ids].sum() / e.sum())
    if mass > threshold:
        return 0.0, True
    return float(np.log(e.sum()) - np.log(e[ids].sum())), False


def combined_loss(ntp, concept_results, skipped_empty, cfg):
    """Fold per-annotation (loss, gated) pairs into a LossBreakdown."""
    gated = sum(1 for _, g in concept_results if g)
    active = len(concept_results) - gated
    concept = (sum(l for l, g in concept_results if not g) / active
               if active else 0.0)
    w = cfg.concept_weight
    combined = (1.0 - w) * ntp + w * concept
    return LossBreakdown(ntp_loss=ntp, concept_loss=concept,
                         combined=combined, gated_count=gated,
                         active_count=active, skipped_empty=skipped_empty,
                         concept_weight=w, mass_threshold=cfg.mass_threshold)


def _annotation_arrays(annotations):
    """CSR-pack the non-empty annotations of one sequence."""
    rows, originals, flat, offsets = [], [], [], [0]
    for a in annotations:
        if len(a.synonyms) == 0:
            continue
        rows.append(a.position - 1)
        originals.append(a.original)
        flat.extend(a.synonyms)
        offsets.append(len(flat))
    return (np.asarray(rows, dtype=np.int64),
            np.asarray(originals, dtype=np.int64),
            np.asarray(flat, dtype=np.int64),
            np.asarray(offsets, dtype=np.int64))


def batch_terms(logits_list, batch, cfg, want_dlogits=True):
    """Losses (and optionally per-sequence dlogits) for a batch.

    The concept objective scores annotation position p against logit row
    p - 1, the prediction made from the prefix ending just before p.
    """
    total_nll = 0.0
    total_positions = 0
    per_seq = []
    concept_results = []
    skipped_empty = 0
    for logits, (seq, annotations) in zip(logits_list, batch):
        ids = np.asarray(seq.token_ids, dtype=np.int64)
        n_rows = len(ids) - 1
        nll = dunit = None
        if n_rows > 0:
            nll, dunit = kernels.ntp_terms(logits[:n_rows], ids[1:])
            total_nll += float(nll.sum())
            total_positions += n_rows
        skipped_empty += sum(1 for a in annotations if len(a.synonyms) == 0)
        rows, originals, flat, offsets = _annotation_arrays(annotations)
        losses = gated = None
        if len(rows):
            losses, gated, _ = kernels.concept_losses(
                logits, rows, originals, flat, offsets,
                cfg.mass_threshold, cfg.include_original_in_mass)
            concept_results.extend(zip(losses.tolist(), gated.tolist()))
        per_seq.append((dunit, rows, originals, flat, offsets, gated))

    ntp = total_nll / total_positions if total_positions else 0.0
    breakdown = combined_loss(ntp, concept_results, skipped_empty, cfg)
    if not want_dlogits:
        return breakdown, None

    w = cfg.concept_weight
    ntp_scale = (1.0 - w) / total_positions if total_positions else 0.0
    concept_scale = (w / breakdown.active_count
                     if breakdown.active_count else 0.0)
    dlogits_list = []
    for logits, (dunit, rows, originals, flat, offsets, gated) in \
            zip(logits_list, per_seq):
        dl = np.zeros_like(logits)
        if dunit is not None:
            dl[:dunit.shape[0]] = dunit * ntp_scale
        if w > 0.0 and len(rows) and breakdown.active_count:
            kernels.concept_dlogits(logits, rows, originals, flat, offsets,
                                    ~gated, cfg.include_original_in_mass,
                                    concept_scale, dl)
        dlogits_list.append(dl)
    return breakdown, dlogits_list
