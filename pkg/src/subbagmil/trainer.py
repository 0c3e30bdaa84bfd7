"""Training loop: bag loss, sub-bag loss, consistency and curriculum terms."""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from collections import Counter
from dataclasses import asdict, dataclass, field

import numpy as np

from .curriculum import (CurriculumSchedule, EmbeddingDictionary, TripletConfig, mine_triplets,
                         triplet_loss)
from .exceptions import ConfigError, ModelError, NumericFailure
from .metrics import metric_table
from .model import TwinModel, t1_backward, t1_forward, t2_backward, t2_forward
from .numerics import adam_step, cross_entropy, one_hot, softmax
from .sampling import SubBagCache, build_pseudo_bag, draw_other_class, partition_by_distribution

log = logging.getLogger(__name__)

LOSS_COLUMNS = ("l1", "l2", "lc1", "lc2", "ls", "total")
EVAL_THREADS_ENV = "SUBBAGMIL_EVAL_THREADS"


@dataclass
class TrainConfig:
    n_subbags: int = 11
    epochs: int = 100
    patience: int = 20
    lr: float = 1e-4
    weight_decay: float = 2e-5
    loss_weights: tuple = (1.0, 1.0, 1.0, 1.0)
    top_k: int = 8
    n_triplets: int = 4
    margin: float = 0.3
    momentum: float = 0.9
    schedule: str = "smooth"
    use_consistency: bool = True     # C1
    use_curriculum: bool = True      # C2
    use_pseudo_bags: bool = True     # C3
    hidden: int = 64
    attention: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    pooling: str = "feature"
    consistency_grad: str = "t2"
    inference_head: str = "t1"
    seed: int = 0

    def __post_init__(self):
        self.loss_weights = tuple(float(w) for w in self.loss_weights)
        if self.n_subbags < 1:
            raise ConfigError("n_subbags must be at least 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.patience < 0:
            raise ConfigError("patience must be non-negative")
        if len(self.loss_weights) != 4 or any(w < 0 for w in self.loss_weights):
            raise ConfigError("loss_weights needs four non-negative values (w1, w2, wc, ws)")
        if self.inference_head not in ("t1", "t2"):
            raise ConfigError("inference_head must be 't1' or 't2'")
        if self.pooling not in ("feature", "logit"):
            raise ConfigError("pooling must be 'feature' or 'logit'")
        if self.consistency_grad not in ("t2", "both"):
            raise ConfigError("consistency_grad must be 't2' or 'both'")
        self.schedule = CurriculumSchedule(self.schedule, self.epochs, self.seed).kind
        self.triplet_config()

    def triplet_config(self):
        return TripletConfig(self.top_k, self.n_triplets, self.margin, self.momentum)

    def curriculum_schedule(self):
        return CurriculumSchedule(self.schedule, self.epochs, self.seed)

    def to_json(self):
        d = asdict(self)
        d["loss_weights"] = list(self.loss_weights)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**d)


@dataclass
class TrainState:
    epoch: int = 0
    best_score: float = -np.inf
    best_epoch: int = 0
    since_improvement: int = 0
    dictionary: EmbeddingDictionary = None
    cache: SubBagCache = field(default_factory=SubBagCache)
    order_rng: np.random.Generator = None
    pseudo_rng: np.random.Generator = None
    triplet_rng: np.random.Generator = None
    counters: Counter = field(default_factory=Counter)
    telemetry: dict = field(default_factory=dict)

    @classmethod
    def create(cls, cfg):
        return cls(dictionary=EmbeddingDictionary(cfg.momentum),
                   order_rng=np.random.default_rng([cfg.seed, 10]),
                   pseudo_rng=np.random.default_rng([cfg.seed, 11]),
                   triplet_rng=np.random.default_rng([cfg.seed, 12]))


@dataclass
class LossReport:
    rows: list = field(default_factory=list)

    def add(self, row):
        self.rows.append(row)

    def epoch_means(self):
        out = {}
        for row in self.rows:
            out.setdefault(row["epoch"], []).append([row[c] for c in LOSS_COLUMNS])
        return {e: dict(zip(LOSS_COLUMNS, np.mean(v, axis=0))) for e, v in out.items()}


def weighted_total(weights, l1, l2, lc1, lc2, ls):
    w1, w2, wc, ws = weights
    return w1 * l1 + w2 * l2 + wc * (lc1 + lc2) + ws * ls


def loss_l1(features, label, t1, scale=1.0, dv=None):
    """Bag-level cross entropy of T1; gradients accumulate into ``t1``."""
    beta, v, logits, trace = t1_forward(features, t1)
    loss, g = cross_entropy(one_hot(label, t1.n_classes), logits)
    t1_backward(trace, scale * g, dv=dv)
    return loss


def loss_l2(features, label, partition, t2, scale=1.0, pooling="feature"):
    """Cross entropy of the sub-bag head on ``partition``."""
    _, logits, trace = t2_forward(partition, features, t2, pooling=pooling)
    loss, g = cross_entropy(one_hot(label, t2.n_classes), logits)
    t2_backward(trace, scale * g)
    return loss


def soft_target_grad(target, logits2, loss):
    """Gradient of ``H(softmax(z1), softmax(z2))`` with respect to ``z1``."""
    p2 = softmax(logits2)
    return target * (-np.log(np.maximum(p2, 1e-12)) - loss)


def loss_consistency(features, partition, t1, t2, scale=1.0, pooling="feature", to_t1=False):
    """Soft cross entropy from T1 probabilities to T2 logits.

    By default the T1 target is detached and only T2 receives gradients;
    ``to_t1=True`` also backpropagates through the target into T1.
    """
    _, _, logits1, trace1 = t1_forward(features, t1)
    target = softmax(logits1)
    _, logits2, trace = t2_forward(partition, features, t2, pooling=pooling)
    loss, g = cross_entropy(target, logits2)
    t2_backward(trace, scale * g)
    if to_t1:
        t1_backward(trace1, scale * soft_target_grad(target, logits2, loss))
    return loss


def train_iteration(bag, state, model, cfg, observer=None):
    """One batch-size-1 update on ``bag``. Returns the loss row."""
    w1, w2, wc, ws = cfg.loss_weights
    t1, t2 = model.t1, model.t2
    c = t1.n_classes
    y = bag.label
    x = bag.features
    epoch = state.epoch
    ctr = state.counters

    beta, v, logits1, tr1 = t1_forward(x, t1)
    l1, g1 = cross_entropy(one_hot(y, c), logits1)
    p1 = softmax(logits1)

    part = state.cache.refresh(bag, beta, cfg.n_subbags, epoch)
    _, logits2, tr2 = t2_forward(part, x, t2, pooling=cfg.pooling)
    l2, g2 = cross_entropy(one_hot(y, c), logits2)
    dlogits2 = w2 * g2
    dlogits1 = w1 * g1
    to_t1 = cfg.consistency_grad == "both"
    lc1 = lc2 = 0.0
    if cfg.use_consistency:
        lc2, gc2 = cross_entropy(p1, logits2)
        dlogits2 = dlogits2 + wc * gc2
        if to_t1:
            dlogits1 = dlogits1 + wc * soft_target_grad(p1, logits2, lc2)
        ctr["consistency_backward"] += 1
    t2_backward(tr2, dlogits2)

    if cfg.use_consistency and cfg.use_pseudo_bags:
        target = draw_other_class(y, c, state.pseudo_rng)
        donors = state.cache.donors(target)
        if donors:
            pb = build_pseudo_bag(target, donors, cfg.n_subbags, state.pseudo_rng)
            ctr["pseudo_bags"] += 1
            ctr[f"pseudo_bags_class{target}"] += 1
            ctr["replacement_draws"] += pb.replacement_draws
            lc1 = loss_consistency(pb.features, pb.boundaries, t1, t2, scale=wc,
                                   pooling=cfg.pooling, to_t1=to_t1)
            ctr["consistency_backward"] += 1
        else:
            ctr["pseudo_bag_no_donor"] += 1

    state.dictionary.update(bag.case_id, v, y)
    ls = 0.0
    dv = None
    if cfg.use_curriculum and epoch >= 2:
        k = cfg.curriculum_schedule()(epoch)
        ts = mine_triplets(bag.case_id, v, y, state.dictionary, cfg.triplet_config(), k,
                           state.triplet_rng, observer=observer)
        ls, dv_s, active = triplet_loss(v, ts, state.dictionary, cfg.margin)
        dv = ws * dv_s
        ctr["triplets"] += len(ts.triples)
        ctr["active_triplets"] += active
        ctr["fallbacks"] += ts.fallbacks
        ctr["empty_positive"] += ts.empty_positive
        ctr["empty_negative"] += ts.empty_negative
        ctr["curriculum_backward"] += 1
        tel = state.telemetry
        tel["k"] = k
        tel["pos"].extend(t.sim_pos for t in ts.triples)
        tel["neg"].extend(t.sim_neg for t in ts.triples)
        tel["fallbacks"] += ts.fallbacks
        tel["active"] += active
    t1_backward(tr1, dlogits1, dv=dv)

    total = weighted_total(cfg.loss_weights, l1, l2, lc1, lc2, ls)
    if not np.isfinite(total):
        raise NumericFailure(f"non-finite loss at epoch {epoch}, case {bag.case_id!r}: "
                             f"l1={l1} l2={l2} lc1={lc1} lc2={lc2} ls={ls}")
    for p in model.tensors():
        adam_step(p, cfg.lr, cfg.weight_decay, cfg.beta1, cfg.beta2, cfg.eps)
    return {"epoch": epoch, "case_id": bag.case_id, "l1": l1, "l2": l2, "lc1": lc1,
            "lc2": lc2, "ls": ls, "total": total}


def predict_proba(model, bags, head="t1", n_jobs=None, pooling="feature"):
    """Class probabilities per bag from the chosen head.

    The T2 head partitions each bag with the current T1 attention.
    """
    t1 = model.t1

    def one(bag):
        x = bag.features if hasattr(bag, "features") else bag
        if np.asarray(x).shape[-1] != t1.dim:
            raise ModelError(f"bag dim {np.asarray(x).shape[-1]} does not match model dim {t1.dim}")
        beta, _, logits, _ = t1_forward(x, t1)
        if head == "t2":
            part = partition_by_distribution(beta, min(model.n_subbags, beta.size))
            _, logits, _ = t2_forward(part, x, model.t2, pooling=pooling)
        return softmax(logits)

    if n_jobs is None:
        n_jobs = int(os.environ.get(EVAL_THREADS_ENV, "1"))
    if n_jobs > 1 and len(bags) > 1:
        with ThreadPoolExecutor(n_jobs) as pool:
            rows = list(pool.map(one, bags))
    else:
        rows = [one(b) for b in bags]
    return np.vstack(rows) if rows else np.zeros((0, t1.n_classes))


def evaluate(model, bags, head="t1", n_jobs=None, pooling="feature"):
    if not bags:
        raise ConfigError("cannot evaluate an empty split")
    proba = predict_proba(model, bags, head=head, n_jobs=n_jobs, pooling=pooling)
    return metric_table([b.label for b in bags], proba)


@dataclass
class FitResult:
    model: TwinModel
    losses: LossReport
    val_history: list
    telemetry: list
    counters: Counter
    best_epoch: int
    epochs_run: int


def fit(train_bags, val_bags, cfg, n_classes=None, observer=None, epoch_callback=None):
    """Train both heads; early-stop on validation macro-F1 and restore the best epoch.

    Parameters
    ----------
    train_bags, val_bags : list of FeatureBag
    cfg : TrainConfig
    n_classes : int, optional
        Defaults to ``max(label) + 1`` over both splits.
    observer : callable, optional
        Forwarded to :func:`~subbagmil.curriculum.mine_triplets`.
    epoch_callback : callable, optional
        Called as ``epoch_callback(epoch, state, model)`` after validation.
    """
    if not train_bags or not val_bags:
        raise ConfigError("train and validation splits must be non-empty")
    dims = {b.features.shape[1] for b in list(train_bags) + list(val_bags)}
    if len(dims) != 1:
        raise ConfigError(f"bags have inconsistent feature dims {sorted(dims)}")
    if n_classes is None:
        n_classes = 1 + max(b.label for b in list(train_bags) + list(val_bags))
    model = TwinModel.create(dims.pop(), n_classes, cfg.hidden, cfg.attention, cfg.n_subbags, cfg.seed)
    state = TrainState.create(cfg)
    losses = LossReport()
    val_history, telemetry = [], []
    best = model.copy()
    for epoch in range(1, cfg.epochs + 1):
        state.epoch = epoch
        state.telemetry = {"k": None, "pos": [], "neg": [], "fallbacks": 0, "active": 0}
        for i in state.order_rng.permutation(len(train_bags)):
            losses.add(train_iteration(train_bags[i], state, model, cfg, observer=observer))
        model.epoch = epoch
        table = evaluate(model, val_bags, head=cfg.inference_head, n_jobs=1, pooling=cfg.pooling)
        val_history.append({"epoch": epoch, "f1": table.f1, "acc": table.acc, "auc": table.auc})
        tel = state.telemetry
        telemetry.append({
            "epoch": epoch,
            "k": cfg.curriculum_schedule()(epoch),
            "mean_pos_sim": float(np.mean(tel["pos"])) if tel["pos"] else float("nan"),
            "mean_neg_sim": float(np.mean(tel["neg"])) if tel["neg"] else float("nan"),
            "fallbacks": tel["fallbacks"],
            "active_triplets": tel["active"],
        })
        if table.f1 > state.best_score:
            state.best_score, state.best_epoch, state.since_improvement = table.f1, epoch, 0
            best = model.copy()
        else:
            state.since_improvement += 1
        log.debug("epoch %d val f1 %.4f (best %.4f @ %d)", epoch, table.f1, state.best_score,
                  state.best_epoch)
        if epoch_callback is not None:
            epoch_callback(epoch, state, model)
        if state.since_improvement and state.since_improvement >= cfg.patience:
            break
    return FitResult(best, losses, val_history, telemetry, state.counters, state.best_epoch, epoch)
