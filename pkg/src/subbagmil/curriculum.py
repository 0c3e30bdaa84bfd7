"""Affinity-based curriculum contrastive learning.

A momentum dictionary keeps one embedding per case. For an anchor embedding
the dictionary is split into same-class and other-class cosine similarities;
a positive is drawn from the top-K same-class entries and its similarity
becomes the threshold below which negatives are searched. The curriculum
difficulty ``k`` picks where in that filtered negative set to sample, from
the hardest (``k = 0``) to the easiest (``k = 1``).
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ConfigError, DomainError, IntegrityError, SelectionError

SCHEDULES = ("smooth", "linear", "exponential", "random")
_SCHEDULE_ALIASES = {"exp": "exponential", "e": "exponential", "l": "linear", "r": "random",
                     "s": "smooth"}


class EmbeddingDictionary:
    """Momentum-averaged bag embeddings keyed by case id."""

    def __init__(self, momentum=0.9):
        if not 0.0 <= momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        self.momentum = momentum
        self._emb = {}
        self._label = {}

    def __len__(self):
        return len(self._emb)

    def __contains__(self, case_id):
        return case_id in self._emb

    def ids(self):
        return list(self._emb)

    def embedding(self, case_id):
        return self._emb[case_id]

    def label(self, case_id):
        return self._label[case_id]

    def update(self, case_id, v, label):
        v = np.asarray(v, dtype=np.float64)
        if not np.all(np.isfinite(v)):
            raise DomainError(f"non-finite embedding for {case_id!r}")
        if case_id in self._emb:
            if self._label[case_id] != label:
                raise IntegrityError(f"case {case_id!r} changed label from {self._label[case_id]} to {label}")
            self._emb[case_id] = self.momentum * self._emb[case_id] + (1.0 - self.momentum) * v
        else:
            self._emb[case_id] = v.copy()
            self._label[case_id] = label
        return self

    def state(self):
        return {cid: (e.copy(), self._label[cid]) for cid, e in self._emb.items()}


def dict_update(dictionary, case_id, v, label):
    return dictionary.update(case_id, v, label)


def cosine(u, v):
    return float(u @ v / (np.linalg.norm(u) * np.linalg.norm(v)))


@dataclass
class AffinityIndex:
    anchor: str
    same_ids: list
    same_sims: np.ndarray
    other_ids: list
    other_sims: np.ndarray
    skipped: int = 0


def affinity(anchor_id, v, anchor_label, dictionary):
    """Cosine similarity of ``v`` to every other dictionary entry, split by class."""
    if len(dictionary) == 0:
        raise SelectionError("dictionary is empty")
    v = np.asarray(v, dtype=np.float64)
    nv = np.linalg.norm(v)
    if not nv > 0:
        raise DomainError("anchor embedding has zero norm")
    same_ids, same_sims, other_ids, other_sims = [], [], [], []
    skipped = 0
    for cid in dictionary.ids():
        if cid == anchor_id:
            continue
        e = dictionary.embedding(cid)
        ne = np.linalg.norm(e)
        if ne == 0:
            skipped += 1
            continue
        sim = float(np.clip(v @ e / (nv * ne), -1.0, 1.0))
        if dictionary.label(cid) == anchor_label:
            same_ids.append(cid)
            same_sims.append(sim)
        else:
            other_ids.append(cid)
            other_sims.append(sim)
    return AffinityIndex(anchor_id, same_ids, np.array(same_sims), other_ids,
                         np.array(other_sims), skipped)


@dataclass
class CurriculumSchedule:
    kind: str = "smooth"
    max_epochs: int = 100
    seed: int = 0

    def __post_init__(self):
        self.kind = _SCHEDULE_ALIASES.get(self.kind.lower(), self.kind.lower())
        if self.kind not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.kind!r}; choose from {', '.join(SCHEDULES)}")

    def __call__(self, epoch):
        return difficulty(epoch, self)


def difficulty(epoch, schedule):
    """Curriculum difficulty ``k`` in [0, 1] at ``epoch`` (0 <= epoch <= E)."""
    e_max = schedule.max_epochs
    if e_max <= 0:
        raise DomainError("max_epochs must be positive")
    if not 0 <= epoch <= e_max:
        raise DomainError(f"epoch {epoch} outside [0, {e_max}]")
    x = epoch / e_max
    if schedule.kind == "smooth":
        k = 1.0 - x * x
    elif schedule.kind == "linear":
        k = 1.0 - x
    elif schedule.kind == "exponential":
        k = float(np.exp(-x))
    else:
        k = float(np.random.default_rng([schedule.seed, epoch]).random())
    return min(max(k, 0.0), 1.0)


@dataclass
class TripletConfig:
    top_k: int = 8
    n_triplets: int = 4
    margin: float = 0.3
    momentum: float = 0.9

    def __post_init__(self):
        if self.top_k < 1 or self.n_triplets < 1:
            raise ConfigError("top_k and n_triplets must be at least 1")
        if not self.margin > 0:
            raise ConfigError("margin must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def select_positive(index, top_k, rng):
    """Uniform pick among the ``top_k`` most similar same-class entries.

    Returns ``(case_id, threshold)`` where the threshold is the pick's
    similarity.
    """
    if len(index.same_ids) == 0:
        raise SelectionError(f"no same-class dictionary entry for anchor {index.anchor!r}")
    order = np.argsort(-index.same_sims, kind="stable")
    pool = order[:min(top_k, order.size)]
    j = pool[rng.integers(pool.size)]
    return index.same_ids[j], float(index.same_sims[j])


def negative_candidates(index, threshold):
    """Other-class entries with similarity <= threshold, sorted by gap ascending."""
    keep = np.flatnonzero(index.other_sims <= threshold)
    gaps = threshold - index.other_sims[keep]
    return keep[np.argsort(gaps, kind="stable")]


def select_negative(index, threshold, k):
    """Semi-hard negative at difficulty ``k``.

    Candidates are sorted by ``threshold - sim`` ascending and the one at
    position ``round(k * (M - 1))`` is taken. Returns ``None`` when no
    other-class entry lies at or below the threshold.
    """
    cand = negative_candidates(index, threshold)
    if cand.size == 0:
        return None
    pos = int(np.floor(k * (cand.size - 1) + 0.5))
    return index.other_ids[cand[pos]]


@dataclass
class Triplet:
    positive: str
    negative: str
    sim_pos: float
    sim_neg: float
    fallback: bool = False


@dataclass
class TripletSet:
    anchor: str
    triples: list = field(default_factory=list)
    k: float = 1.0
    fallbacks: int = 0
    empty_positive: bool = False
    empty_negative: bool = False


def mine_triplets(anchor_id, v, label, dictionary, cfg, k, rng, observer=None):
    """Build up to ``cfg.n_triplets`` (positive, negative) pairs for one anchor.

    Each triple draws a fresh positive and threshold. If the filtered
    negative set is empty, the least similar other-class entry is used and
    the triple is flagged as a fallback. ``observer`` (if given) is called
    with ``(index, threshold, k, triplet)`` after every selection.
    """
    out = TripletSet(anchor_id, k=k)
    if np.linalg.norm(v) == 0 or len(dictionary) == 0:
        out.empty_positive = True
        return out
    index = affinity(anchor_id, v, label, dictionary)
    if len(index.other_ids) == 0:
        out.empty_negative = True
        return out
    if len(index.same_ids) == 0:
        out.empty_positive = True
        return out
    sim_of = dict(zip(index.other_ids, index.other_sims))
    for _ in range(cfg.n_triplets):
        pos, tau = select_positive(index, cfg.top_k, rng)
        neg = select_negative(index, tau, k)
        fallback = neg is None
        if fallback:
            neg = index.other_ids[int(np.argmin(index.other_sims))]
            out.fallbacks += 1
        t = Triplet(pos, neg, tau, float(sim_of[neg]), fallback)
        out.triples.append(t)
        if observer is not None:
            observer(index, tau, k, t)
    return out


def _cosine_grad(v, e):
    nv, ne = np.linalg.norm(v), np.linalg.norm(e)
    sim = v @ e / (nv * ne)
    return sim, e / (nv * ne) - sim * v / (nv * nv)


def triplet_loss(v, triplets, dictionary, margin):
    """Hinge loss over mined triples and its gradient on the anchor embedding.

    Dictionary entries are constants. At the hinge point the subgradient 0 is
    used.
    """
    v = np.asarray(v, dtype=np.float64)
    loss = 0.0
    grad = np.zeros_like(v)
    active = 0
    triples = triplets.triples if isinstance(triplets, TripletSet) else triplets
    for t in triples:
        s_pos, g_pos = _cosine_grad(v, dictionary.embedding(t.positive))
        s_neg, g_neg = _cosine_grad(v, dictionary.embedding(t.negative))
        term = s_neg - s_pos + margin
        if term > 0:
            loss += term
            grad += g_neg - g_pos
            active += 1
    return float(loss), grad, active
