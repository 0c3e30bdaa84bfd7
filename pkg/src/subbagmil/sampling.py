"""Attention-guided sub-bags, cross-patient pseudo-bags and balance accounting."""

from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .bagstore import dataset_entropy
from .exceptions import DomainError, PartitionError, SamplingError


@dataclass
class SubBagPartition:
    """Stride split of a bag's attention-sorted instances into ``S`` sub-bags.

    ``subbags[k]`` holds the original instance indices at sorted positions
    ``k, k + S, k + 2S, ...`` so every sub-bag spans the whole attention range.
    """

    case_id: str
    n_subbags: int
    sorted_order: np.ndarray
    subbags: list

    @property
    def n_instances(self):
        return int(self.sorted_order.size)

    def sizes(self):
        return [len(s) for s in self.subbags]


def partition_by_distribution(beta, n_subbags, case_id=None):
    beta = np.asarray(beta, dtype=np.float64)
    n = beta.size
    if n_subbags < 1:
        raise PartitionError("need at least one sub-bag")
    if n_subbags > n:
        raise PartitionError(f"cannot split {n} instances into {n_subbags} sub-bags")
    # stable sort on -beta: ties keep the lower original index first
    order = np.argsort(-beta, kind="stable")
    subbags = [order[k::n_subbags] for k in range(n_subbags)]
    return SubBagPartition(case_id, n_subbags, order, subbags)


@dataclass
class PseudoBag:
    """S sub-bags of one class drawn from different donor patients."""

    label: int
    members: list            # (case_id, patient_id, instance indices)
    features: np.ndarray
    boundaries: list         # index arrays into ``features``, one per sub-bag
    replacement_draws: int = 0

    @property
    def n_subbags(self):
        return len(self.boundaries)


@dataclass
class SubBagCache:
    """Last partition computed for each case, with the epoch it was refreshed."""

    partitions: dict = field(default_factory=dict)
    epochs: dict = field(default_factory=dict)
    bags: dict = field(default_factory=dict)

    def refresh(self, bag, beta, n_subbags, epoch):
        part = partition_by_distribution(beta, min(n_subbags, bag.n_instances), bag.case_id)
        self.partitions[bag.case_id] = part
        self.epochs[bag.case_id] = epoch
        self.bags[bag.case_id] = bag
        return part

    def __contains__(self, case_id):
        return case_id in self.partitions

    def __len__(self):
        return len(self.partitions)

    def donors(self, label):
        """Cached ``(bag, partition)`` pairs of one class, in insertion order."""
        return [(b, self.partitions[cid]) for cid, b in self.bags.items() if b.label == label]


def refresh_subbag_cache(cache, bag, beta, n_subbags, epoch):
    cache.refresh(bag, beta, n_subbags, epoch)
    return cache


def build_pseudo_bag(target_class, donor_pool, n_subbags, rng):
    """Assemble a pseudo-bag of ``target_class`` from cached donor sub-bags.

    ``donor_pool`` is a list of ``(FeatureBag, SubBagPartition)`` pairs. Donor
    patients are drawn without replacement when the class has at least
    ``n_subbags`` distinct patients, otherwise with replacement (the number
    of draws that had to repeat a patient is recorded).
    """
    if not donor_pool:
        raise SamplingError(f"no cached donors for class {target_class}")
    by_patient = defaultdict(list)
    for bag, part in donor_pool:
        if bag.label != target_class:
            raise SamplingError(f"donor {bag.case_id!r} has label {bag.label}, not {target_class}")
        by_patient[bag.patient_id].append((bag, part))
    patients = list(by_patient)
    if len(patients) >= n_subbags:
        chosen = rng.choice(len(patients), size=n_subbags, replace=False)
        repeats = 0
    else:
        chosen = rng.choice(len(patients), size=n_subbags, replace=True)
        repeats = n_subbags - len(set(chosen.tolist()))
    members, blocks, boundaries = [], [], []
    offset = 0
    for pi in chosen:
        cases = by_patient[patients[pi]]
        bag, part = cases[rng.integers(len(cases))] if len(cases) > 1 else cases[0]
        idx = part.subbags[rng.integers(len(part.subbags))]
        members.append((bag.case_id, bag.patient_id, idx))
        blocks.append(bag.features[idx])
        boundaries.append(np.arange(offset, offset + len(idx)))
        offset += len(idx)
    return PseudoBag(target_class, members, np.vstack(blocks), boundaries, repeats)


def draw_other_class(label, n_classes, rng):
    """Uniform draw from the classes other than ``label``."""
    c = int(rng.integers(n_classes - 1))
    return c if c < label else c + 1


@dataclass
class BalanceAccount:
    initial: np.ndarray
    generated: np.ndarray
    projected: np.ndarray

    def entropies(self):
        return dataset_entropy(self.initial), dataset_entropy(self.projected)

    def rows(self):
        return [(c, float(self.initial[c]), float(self.generated[c]), float(self.projected[c]))
                for c in range(len(self.initial))]


def expected_balanced_counts(initial, n_classes=None):
    """Expected per-class totals after one epoch of other-class pseudo-bags.

    Each real sample of class ``d`` spawns one pseudo-bag of a class drawn
    uniformly from the other ``C - 1``, so class ``c`` gains
    ``sum_{d != c} N_d / (C - 1)`` samples.
    """
    n = np.asarray(initial, dtype=np.float64)
    c = n.size if n_classes is None else n_classes
    if c < 2 or n.size != c:
        raise DomainError("balance accounting needs C >= 2 counts")
    if np.any(n < 0):
        raise DomainError("counts must be non-negative")
    generated = (n.sum() - n) / (c - 1)
    return BalanceAccount(n, generated, n + generated)
