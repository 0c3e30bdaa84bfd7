"""Finite-difference checks of every analytic gradient in the package.

Each check builds a small random problem from a seed, accumulates analytic
gradients once, then compares them against central differences with
:func:`~subbagmil.numerics.finite_diff_check`.
"""

import numpy as np

from .curriculum import EmbeddingDictionary, Triplet, triplet_loss
from .model import GatedAttentionParams, SubBagModelParams, t1_backward, t1_forward, t2_backward, t2_forward
from .numerics import ParamTensor, cross_entropy, finite_diff_check, one_hot, softmax
from .sampling import partition_by_distribution
from .trainer import loss_consistency, loss_l1, loss_l2

GRADCHECK_STEP = 3e-5  # balances truncation against roundoff on ~1e-8 gradients
GRADCHECK_TOL = 1e-4


def _heads(rng, dim=8, hidden=6, attention=5, n_classes=3):
    t1 = GatedAttentionParams(dim, hidden, attention, n_classes, rng=rng)
    t2 = SubBagModelParams(dim, hidden, attention, n_classes, rng=rng)
    # non-zero biases so their gradients are exercised away from the init point
    for p in t1.tensors() + t2.tensors():
        if p.name.endswith("_b"):
            p.value[...] = rng.normal(scale=0.1, size=p.shape)
    return t1, t2


def _problem(seed, n=6, dim=8):
    rng = np.random.default_rng([seed, 99])
    t1, t2 = _heads(rng, dim=dim)
    x = rng.normal(size=(n, dim))
    label = int(rng.integers(0, t1.n_classes))
    return rng, t1, t2, x, label


def check_t1(seed, h=GRADCHECK_STEP):
    """Random linear functional of the logits pushed through ``t1_backward``."""
    rng, t1, _, x, _ = _problem(seed, n=4)
    w = rng.normal(size=t1.n_classes)
    _, _, _, tr = t1_forward(x, t1)
    t1_backward(tr, w)
    return finite_diff_check(lambda: float(t1_forward(x, t1)[2] @ w), t1.tensors(), h=h)


def check_t2(seed, h=GRADCHECK_STEP, pooling="feature"):
    rng, _, t2, x, _ = _problem(seed, n=6)
    part = partition_by_distribution(rng.random(6), 2)
    w = rng.normal(size=t2.n_classes)
    _, _, tr = t2_forward(part, x, t2, pooling=pooling)
    t2_backward(tr, w)
    return finite_diff_check(lambda: float(t2_forward(part, x, t2, pooling=pooling)[1] @ w),
                             t2.tensors(), h=h)


def check_l1(seed, h=GRADCHECK_STEP):
    _, t1, _, x, y = _problem(seed)
    loss_l1(x, y, t1)
    return finite_diff_check(lambda: cross_entropy(one_hot(y, 3), t1_forward(x, t1)[2])[0],
                             t1.tensors(), h=h)


def check_l2(seed, h=GRADCHECK_STEP):
    rng, _, t2, x, y = _problem(seed)
    part = partition_by_distribution(rng.random(6), 2)
    loss_l2(x, y, part, t2)
    return finite_diff_check(lambda: cross_entropy(one_hot(y, 3), t2_forward(part, x, t2)[1])[0],
                             t2.tensors(), h=h)


def _consistency_value(x, part, t1, t2):
    target = softmax(t1_forward(x, t1)[2])
    return cross_entropy(target, t2_forward(part, x, t2)[1])[0]


def check_consistency(seed, h=GRADCHECK_STEP, to_t1=False):
    """Consistency loss; with ``to_t1`` the soft target is differentiated too.

    In the detached mode T1 must receive exactly zero gradient, which is
    reported as an infinite error if violated.
    """
    rng, t1, t2, x, _ = _problem(seed)
    part = partition_by_distribution(rng.random(6), 3)
    loss_consistency(x, part, t1, t2, to_t1=to_t1)
    fn = lambda: _consistency_value(x, part, t1, t2)  # noqa: E731
    err = finite_diff_check(fn, t2.tensors(), h=h)
    if to_t1:
        return max(err, finite_diff_check(fn, t1.tensors(), h=h))
    if any(np.any(p.grad != 0) for p in t1.tensors()):
        return float("inf")
    return err


def _triplet_problem(seed):
    rng, t1, _, x, _ = _problem(seed)
    d = EmbeddingDictionary(0.0)
    for i in range(6):
        d.update(f"c{i}", rng.normal(size=t1.hidden), i % 2)
    triples = [Triplet(f"c{2 * i}", f"c{2 * i + 1}", 0.0, 0.0) for i in range(3)]
    return t1, x, d, triples


def check_triplet(seed, h=GRADCHECK_STEP, margin=2.5):
    """Hinge loss on the bag embedding, backpropagated through T1.

    The wide margin keeps every triple active, so the loss is smooth.
    """
    t1, x, d, triples = _triplet_problem(seed)
    _, v, _, tr = t1_forward(x, t1)
    _, g, active = triplet_loss(v, triples, d, margin)
    if active != len(triples):
        return 0.0
    t1_backward(tr, np.zeros(t1.n_classes), dv=g)
    return finite_diff_check(lambda: triplet_loss(t1_forward(x, t1)[1], triples, d, margin)[0],
                             t1.tensors(), h=h)


def check_features(seed, h=GRADCHECK_STEP):
    """Input-feature gradient of both heads."""
    rng, t1, t2, x, _ = _problem(seed)
    part = partition_by_distribution(rng.random(6), 2)
    w = rng.normal(size=3)
    px = ParamTensor("x", x.copy())
    _, _, _, tr1 = t1_forward(px.value, t1)
    _, _, tr2 = t2_forward(part, px.value, t2)
    px.grad[...] = t1_backward(tr1, w, need_features=True) + t2_backward(tr2, w, need_features=True)
    return finite_diff_check(
        lambda: float((t1_forward(px.value, t1)[2] + t2_forward(part, px.value, t2)[1]) @ w),
        [px], h=h)


CHECKS = {
    "t1": check_t1,
    "t2": check_t2,
    "t2_logit_pooling": lambda s, h=GRADCHECK_STEP: check_t2(s, h, pooling="logit"),
    "l1": check_l1,
    "l2": check_l2,
    "consistency": check_consistency,
    "consistency_both": lambda s, h=GRADCHECK_STEP: check_consistency(s, h, to_t1=True),
    "triplet": check_triplet,
    "features": check_features,
}


def run_suite(seeds=range(20), h=GRADCHECK_STEP):
    """Worst relative error per check over ``seeds``."""
    return {name: max(fn(s, h) for s in seeds) for name, fn in CHECKS.items()}
