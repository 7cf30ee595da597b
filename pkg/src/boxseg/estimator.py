"""Scikit-learn style wrappers around the pipeline.

X is always a list of ImageSample. BoxProposalGenerator is a transformer
(samples -> proposal label maps), FillRateModel fits the filling-rate table,
and WeakBoxSegmenter is the end-to-end estimator: fit trains the FCN from
box supervision only, predict returns label maps, score returns mean IoU
against the samples' ground truth.
"""

from __future__ import annotations

from dataclasses import replace

from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .fillrate import build_fill_rate_table, collect_fill_samples
from .proposals import CrfParams, generate_proposals
from .train import TrainConfig, evaluate_miou, predict_labels, train
from .validation import check_fraction


def _infer_n_classes(samples) -> int:
    n = 1 + max((b.class_id for s in samples for b in s.boxes), default=0)
    gt_max = max(int(s.gt_labels.max()) for s in samples) if samples else 0
    return max(n, gt_max + 1)


class BoxProposalGenerator(TransformerMixin, BaseEstimator):
    """Stateless transformer: bounding boxes to pixel pseudo-labels."""

    def __init__(self, mode="crf", iterations=5, w_appearance=5.0, theta_alpha=20.0,
                 theta_beta=0.1, w_smooth=3.0, theta_gamma=3.0, p_fg=0.7, n_classes=None):
        self.mode = mode
        self.iterations = iterations
        self.w_appearance = w_appearance
        self.theta_alpha = theta_alpha
        self.theta_beta = theta_beta
        self.w_smooth = w_smooth
        self.theta_gamma = theta_gamma
        self.p_fg = p_fg
        self.n_classes = n_classes

    def _crf_params(self) -> CrfParams:
        return CrfParams(
            iterations=self.iterations,
            w_appearance=self.w_appearance,
            theta_alpha=self.theta_alpha,
            theta_beta=self.theta_beta,
            w_smooth=self.w_smooth,
            theta_gamma=self.theta_gamma,
            p_fg=self.p_fg,
        )

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        n_classes = self.n_classes or _infer_n_classes(X)
        return generate_proposals(X, n_classes, mode=self.mode, params=self._crf_params())


class FillRateModel(BaseEstimator):
    """Fits per-class and per-sub-class mean filling rates from proposals."""

    def __init__(self, k=3, seed=0):
        self.k = k
        self.seed = seed

    def fit(self, X, proposals):
        fill_samples = collect_fill_samples(proposals, [s.boxes for s in X])
        self.table_ = build_fill_rate_table(fill_samples, k=self.k, seed=self.seed)
        return self

    def fill_rate(self, class_id: int) -> float:
        check_is_fitted(self, "table_")
        return self.table_.fill_rate(class_id)


class WeakBoxSegmenter(BaseEstimator):
    """End-to-end weakly supervised segmenter trained from bounding boxes."""

    def __init__(self, supervision="crf+bcm+fr_refined", iterations=2000, base_lr=1e-3,
                 lr_decay=0.1, lr_step=600, momentum=0.9, batch_size=8, lam=None,
                 k=3, semi_fraction=0.0, branch_width=8, seed=0, proposal_mode=None):
        self.supervision = supervision
        self.iterations = iterations
        self.base_lr = base_lr
        self.lr_decay = lr_decay
        self.lr_step = lr_step
        self.momentum = momentum
        self.batch_size = batch_size
        self.lam = lam
        self.k = k
        self.semi_fraction = semi_fraction
        self.branch_width = branch_width
        self.seed = seed
        self.proposal_mode = proposal_mode

    def _config(self) -> TrainConfig:
        cfg = TrainConfig.for_supervision(
            self.supervision,
            iterations=self.iterations,
            base_lr=self.base_lr,
            lr_decay=self.lr_decay,
            lr_step=self.lr_step,
            momentum=self.momentum,
            batch_size=self.batch_size,
            semi_fraction=self.semi_fraction,
            branch_width=self.branch_width,
            seed=self.seed,
        )
        if self.lam is not None:
            cfg = replace(cfg, lam=self.lam)
        if self.proposal_mode is not None:
            cfg = replace(cfg, proposal_source=self.proposal_mode)
        return cfg

    def fit(self, X, y=None, proposals=None, fr_table=None):
        """Train from box supervision. proposals and fr_table are computed
        from X when not supplied."""
        check_fraction(self.semi_fraction, "semi_fraction")
        cfg = self._config()
        self.n_classes_ = _infer_n_classes(X)
        if proposals is None:
            proposals = BoxProposalGenerator(mode=cfg.proposal_source, n_classes=self.n_classes_).transform(X)
        if fr_table is None and cfg.fr.mode in ("class_fr", "subclass_fr"):
            fr_table = FillRateModel(k=self.k, seed=self.seed).fit(X, proposals).table_
        self.config_ = cfg
        self.state_, self.log_ = train(X, proposals, fr_table, cfg, self.n_classes_)
        return self

    def predict(self, X):
        check_is_fitted(self, "state_")
        return predict_labels(self.state_, X)

    def score(self, X, y=None) -> float:
        """Mean IoU of predictions against the samples' ground-truth labels."""
        check_is_fitted(self, "state_")
        report = evaluate_miou(self.state_, X, self.n_classes_, self.config_.fingerprint(), self.seed)
        return report.miou
