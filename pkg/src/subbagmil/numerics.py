"""Dense numerics shared by the learning modules.

Everything works on ``float64`` numpy arrays. A "matrix" is a 2-D array; a
parameter is a :class:`ParamTensor` carrying its value, accumulated gradient
and Adam moments.
"""

from dataclasses import dataclass, field

import numpy as np

from .exceptions import DimensionError, DomainError, GradCheckError, OptimizerError

PROB_FLOOR = 1e-12


def as_matrix(x, name="matrix"):
    """Return ``x`` as a finite 2-D float64 array."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DomainError(f"{name} contains non-finite entries")
    return a


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def softmax(x):
    """Numerically stable softmax of a 1-D vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size == 0:
        raise DomainError("softmax needs a non-empty 1-D vector")
    z = np.exp(x - x.max())
    return z / z.sum()


def cross_entropy(target, logits):
    """Soft-target cross entropy and its gradient with respect to the logits.

    Parameters
    ----------
    target : array of shape (C,)
        Probability vector; one-hot for hard labels.
    logits : array of shape (C,)

    Returns
    -------
    loss : float
        ``-sum(target * log softmax(logits))`` with probabilities clamped
        to at least 1e-12.
    dlogits : ndarray of shape (C,)
        ``softmax(logits) - target``.
    """
    target = np.asarray(target, dtype=np.float64)
    logits = np.asarray(logits, dtype=np.float64)
    if target.shape != logits.shape or target.ndim != 1:
        raise DimensionError(f"target {target.shape} and logits {logits.shape} differ")
    if abs(target.sum() - 1.0) > 1e-9:
        raise DomainError("target must sum to 1")
    p = softmax(logits)
    loss = -float(np.dot(target, np.log(np.maximum(p, PROB_FLOOR))))
    return max(loss, 0.0), p - target


def one_hot(label, n_classes):
    t = np.zeros(n_classes)
    t[label] = 1.0
    return t


@dataclass
class ParamTensor:
    """A trainable matrix with its gradient buffer and Adam state."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(default=None)
    m1: np.ndarray = field(default=None)
    m2: np.ndarray = field(default=None)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64, ndmin=2)
        shape = self.value.shape
        for attr in ("grad", "m1", "m2"):
            cur = getattr(self, attr)
            if cur is None:
                setattr(self, attr, np.zeros(shape))
            else:
                cur = np.array(cur, dtype=np.float64, ndmin=2)
                if cur.shape != shape:
                    raise DimensionError(f"{self.name}.{attr} has shape {cur.shape}, expected {shape}")
                setattr(self, attr, cur)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0

    def copy(self):
        return ParamTensor(self.name, self.value.copy(), self.grad.copy(),
                           self.m1.copy(), self.m2.copy(), self.step_count)


def adam_step(p, lr, wd=0.0, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply one Adam update to ``p`` in place and return it.

    Weight decay is decoupled: ``value -= lr * wd * value`` happens before the
    Adam delta. The gradient buffer is zeroed afterwards.
    """
    if lr <= 0:
        raise DomainError("learning rate must be positive")
    g = p.grad
    if not np.all(np.isfinite(g)):
        raise OptimizerError(p.name)
    if wd:
        p.value -= lr * wd * p.value
    p.step_count += 1
    t = p.step_count
    p.m1 *= beta1
    p.m1 += (1.0 - beta1) * g
    p.m2 *= beta2
    p.m2 += (1.0 - beta2) * g * g
    m_hat = p.m1 / (1.0 - beta1 ** t)
    v_hat = p.m2 / (1.0 - beta2 ** t)
    p.value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    p.zero_grad()
    return p


def finite_diff_check(loss_fn, params, h=1e-6, max_coords=64, rng=None):
    """Compare analytic gradients in ``params[i].grad`` with central differences.

    ``loss_fn`` takes no arguments and must read the current parameter values,
    which are perturbed in place one coordinate at a time and restored.
    Tensors larger than ``max_coords`` entries are subsampled.

    Returns the maximum relative error, using
    ``max(|analytic|, |numeric|, 1e-8)`` as the denominator.
    """
    if not 1e-7 <= h <= 1e-3:
        raise DomainError("step h must lie in [1e-7, 1e-3]")
    rng = np.random.default_rng(0) if rng is None else rng
    f0 = loss_fn()
    if loss_fn() != f0:
        raise GradCheckError("loss_fn is not deterministic")
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        grad = p.grad.reshape(-1)
        idx = np.arange(flat.size)
        if flat.size > max_coords:
            idx = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = loss_fn()
            flat[i] = orig - h
            f_minus = loss_fn()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            analytic = grad[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
