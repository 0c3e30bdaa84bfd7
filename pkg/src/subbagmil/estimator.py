"""scikit-learn compatible front end."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.model_selection import train_test_split
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .bagstore import FeatureBag
from .metrics import metric_table
from .model import t1_forward
from .trainer import TrainConfig, fit, predict_proba
from .validation import check_bag_labels, check_bags


class SubBagMILClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Multiple-instance classifier over feature bags.

    Trains a gated-attention bag head together with a sub-bag head, optional
    T1/T2 consistency on real and cross-patient pseudo-bags, and a curriculum
    triplet loss on bag embeddings.

    Parameters
    ----------
    n_subbags : int, default=11
        Number of attention-stride sub-bags per bag (and sub-bags per
        pseudo-bag).
    epochs, patience : int, default=100, 20
        Epoch budget and early-stopping patience on validation macro-F1.
    lr, weight_decay : float, default=1e-4, 2e-5
        Adam learning rate and decoupled weight decay.
    loss_weights : tuple of 4 floats, default=(1, 1, 1, 1)
        Weights of the bag, sub-bag, consistency and contrastive losses.
    top_k, n_triplets, margin, momentum :
        Positive pool size, triplets per anchor, hinge margin and dictionary
        momentum of the curriculum term.
    schedule : {"smooth", "linear", "exponential", "random"}, default="smooth"
        Curriculum difficulty schedule.
    use_consistency, use_curriculum, use_pseudo_bags : bool, default=True
        Ablation switches.
    hidden, attention : int, default=64, 32
        Projection and attention widths.
    validation_fraction : float, default=0.2
        Stratified hold-out used for early stopping when ``fit`` is not
        given an explicit validation set.
    inference_head : {"t1", "t2"}, default="t1"
    random_state : int, default=0

    Attributes
    ----------
    classes_ : ndarray of shape (n_classes,)
    n_features_in_ : int
    model_ : TwinModel
    fit_result_ : FitResult
    """

    def __init__(self, n_subbags=11, epochs=100, patience=20, lr=1e-4, weight_decay=2e-5,
                 loss_weights=(1.0, 1.0, 1.0, 1.0), top_k=8, n_triplets=4, margin=0.3,
                 momentum=0.9, schedule="smooth", use_consistency=True, use_curriculum=True,
                 use_pseudo_bags=True, hidden=64, attention=32, validation_fraction=0.2,
                 inference_head="t1", random_state=0):
        self.n_subbags = n_subbags
        self.epochs = epochs
        self.patience = patience
        self.lr = lr
        self.weight_decay = weight_decay
        self.loss_weights = loss_weights
        self.top_k = top_k
        self.n_triplets = n_triplets
        self.margin = margin
        self.momentum = momentum
        self.schedule = schedule
        self.use_consistency = use_consistency
        self.use_curriculum = use_curriculum
        self.use_pseudo_bags = use_pseudo_bags
        self.hidden = hidden
        self.attention = attention
        self.validation_fraction = validation_fraction
        self.inference_head = inference_head
        self.random_state = random_state

    def _train_config(self):
        return TrainConfig(
            n_subbags=self.n_subbags, epochs=self.epochs, patience=self.patience, lr=self.lr,
            weight_decay=self.weight_decay, loss_weights=tuple(self.loss_weights),
            top_k=self.top_k, n_triplets=self.n_triplets, margin=self.margin,
            momentum=self.momentum, schedule=self.schedule,
            use_consistency=self.use_consistency, use_curriculum=self.use_curriculum,
            use_pseudo_bags=self.use_pseudo_bags, hidden=self.hidden, attention=self.attention,
            inference_head=self.inference_head, seed=int(self.random_state))

    def fit(self, X, y, patient_ids=None, validation_data=None):
        """Fit on bags ``X`` with bag labels ``y``.

        Parameters
        ----------
        X : sequence of arrays of shape (n_instances_i, n_features)
        y : array-like of shape (n_bags,)
        patient_ids : sequence of str, optional
            Patient of each bag; pseudo-bags draw sub-bags from distinct
            patients. Defaults to one patient per bag.
        validation_data : tuple (X_val, y_val), optional
            Early-stopping set. Otherwise ``validation_fraction`` of ``X`` is
            held out, stratified by label.
        """
        bags, dim, y = check_bag_labels(X, y)
        self._encoder = LabelEncoder().fit(y)
        self.classes_ = self._encoder.classes_
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = dim
        codes = self._encoder.transform(y)
        pids = [f"bag{i}" for i in range(len(bags))] if patient_ids is None else list(patient_ids)
        if len(pids) != len(bags):
            raise ValueError("patient_ids must have one entry per bag")
        train = [FeatureBag(f"bag{i}", str(p), int(c), x)
                 for i, (x, p, c) in enumerate(zip(bags, pids, codes))]
        if validation_data is not None:
            xv, yv = validation_data
            vbags, _, yv = check_bag_labels(xv, yv)
            if vbags[0].shape[1] != dim:
                raise ValueError("validation bags have a different feature count")
            val = [FeatureBag(f"val{i}", f"val{i}", int(c), x)
                   for i, (x, c) in enumerate(zip(vbags, self._encoder.transform(yv)))]
        else:
            idx = np.arange(len(train))
            tr_idx, va_idx = train_test_split(idx, test_size=self.validation_fraction,
                                              stratify=codes, random_state=self.random_state)
            val = [train[i] for i in va_idx]
            train = [train[i] for i in tr_idx]
        self.fit_result_ = fit(train, val, self._train_config(), n_classes=len(self.classes_))
        self.model_ = self.fit_result_.model
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        bags, _ = check_bags(X, self.n_features_in_)
        return predict_proba(self.model_, bags, head=self.inference_head)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def transform(self, X):
        """Attention-pooled bag embeddings, shape (n_bags, hidden)."""
        check_is_fitted(self, "model_")
        bags, _ = check_bags(X, self.n_features_in_)
        return np.vstack([t1_forward(x, self.model_.t1)[1] for x in bags])

    def attention_weights(self, X):
        """Per-instance attention of the bag head for each bag."""
        check_is_fitted(self, "model_")
        bags, _ = check_bags(X, self.n_features_in_)
        return [t1_forward(x, self.model_.t1)[0] for x in bags]

    def score(self, X, y, sample_weight=None):
        """Macro-F1 on ``(X, y)``."""
        check_is_fitted(self, "model_")
        y_codes = self._encoder.transform(np.asarray(y))
        return metric_table(y_codes, self.predict_proba(X)).f1
