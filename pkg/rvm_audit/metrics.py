"""AUC-PR / AUC-ROC, PR and ROC curves, and image -> subject aggregation.

AUC-PR is average precision with tied scores processed as one block, so a
constant scorer gets exactly the positive prevalence.  AUC-ROC uses the
concordance form with ties counted one half, which equals the trapezoidal
area under the ROC curve.
"""
import logging
from typing import List, Literal, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.stats import rankdata

import utils

logger = logging.getLogger(__name__)

PREDICTION_COLUMNS = ['image_id', 'subject_id', 'true_label', 'probability']


class SingleClassError(ValueError):
    pass


class LabelConflictError(ValueError):
    pass


class PredictionSet:
    """Records of (image_id, subject_id, true_label, probability)"""

    def __init__(self, frame: pd.DataFrame):
        missing = [c for c in PREDICTION_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError("prediction frame lacks columns %s" % missing)
        frame = frame[PREDICTION_COLUMNS].reset_index(drop=True)
        if not frame['true_label'].isin([0, 1]).all():
            raise ValueError("true_label must be 0 or 1")
        p = frame['probability'].to_numpy(dtype=np.float64)
        if np.isnan(p).any() or (p < 0).any() or (p > 1).any():
            raise ValueError("probabilities must lie in [0, 1]")
        self.frame = frame.astype({'true_label': np.int64, 'probability': np.float64})

    @classmethod
    def from_arrays(cls, labels, probabilities, image_ids: Optional[Sequence[str]] = None,
                    subject_ids: Optional[Sequence[str]] = None):
        labels = np.asarray(labels)
        n = labels.size
        image_ids = list(image_ids) if image_ids is not None else ["img%d" % k for k in range(n)]
        subject_ids = list(subject_ids) if subject_ids is not None else list(image_ids)
        return cls(pd.DataFrame({'image_id': image_ids, 'subject_id': subject_ids,
                                 'true_label': labels, 'probability': np.asarray(probabilities)}))

    @classmethod
    def read(cls, path):
        return cls(pd.read_csv(path, dtype={'image_id': str, 'subject_id': str}))

    def write(self, path) -> None:
        self.frame.to_csv(path, index=False, float_format='%.10g')

    @property
    def labels(self):
        return self.frame['true_label'].to_numpy()

    @property
    def scores(self):
        return self.frame['probability'].to_numpy()

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return len(self.frame) - self.n_pos

    @property
    def prevalence(self) -> float:
        return self.n_pos / len(self.frame)

    def __len__(self):
        return len(self.frame)


def _check_both_classes(preds: PredictionSet):
    if preds.n_pos == 0 or preds.n_neg == 0:
        raise SingleClassError("AUC needs both classes, got %d positive / %d negative"
                               % (preds.n_pos, preds.n_neg))


def aggregate_subjects(preds: PredictionSet) -> PredictionSet:
    """One record per subject holding the median of its image probabilities"""
    grouped = preds.frame.groupby('subject_id', sort=False)
    conflicts = grouped['true_label'].nunique()
    conflicts = conflicts[conflicts > 1]
    if len(conflicts):
        raise LabelConflictError("subjects with conflicting labels: %s" % list(conflicts.index))
    agg = grouped.agg(true_label=('true_label', 'first'), probability=('probability', 'median'))
    agg = agg.reset_index()
    agg['image_id'] = agg['subject_id']
    return PredictionSet(agg)


def auc_roc(preds: PredictionSet) -> float:
    _check_both_classes(preds)
    ranks = rankdata(preds.scores, method='average')
    n_pos, n_neg = preds.n_pos, preds.n_neg
    rank_sum = ranks[preds.labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _threshold_blocks(preds: PredictionSet):
    """Cumulative (tp, fp) at the end of each block of equal scores, descending"""
    order = np.argsort(-preds.scores, kind='mergesort')
    scores = preds.scores[order]
    labels = preds.labels[order]
    tp = np.cumsum(labels)
    fp = np.cumsum(1 - labels)
    ends = np.r_[np.nonzero(np.diff(scores))[0], scores.size - 1]
    return tp[ends], fp[ends], scores[ends]


def auc_pr(preds: PredictionSet) -> float:
    _check_both_classes(preds)
    tp, fp, _ = _threshold_blocks(preds)
    recall = tp / preds.n_pos
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def pr_step_area(recall: Sequence[float], precision: Sequence[float]) -> float:
    """Right-continuous step area over curve points, first point is the origin anchor"""
    recall = np.asarray(recall)
    return float(np.sum(np.diff(recall) * np.asarray(precision)[1:]))


def roc_trapezoid_area(fpr: Sequence[float], tpr: Sequence[float]) -> float:
    fpr = np.asarray(fpr)
    tpr = np.asarray(tpr)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


class MetricsReport(BaseModel):
    level: Literal['image', 'subject'] = Field(description="Scoring unit")
    auc_pr: float = Field(ge=0, le=1)
    auc_roc: float = Field(ge=0, le=1)
    prevalence: float = Field(ge=0, le=1, description="Positives / total")
    n_pos: int
    n_neg: int
    thresholds: List[float] = Field(description="Descending unique scores")
    pr_recall: List[float]
    pr_precision: List[float]
    roc_fpr: List[float]
    roc_tpr: List[float]

    def frame(self) -> pd.DataFrame:
        """One row per curve point; the anchor row has no threshold"""
        return pd.DataFrame({'threshold': [np.nan] + self.thresholds,
                             'recall': self.pr_recall, 'precision': self.pr_precision,
                             'fpr': self.roc_fpr, 'tpr': self.roc_tpr})

    def scalars(self) -> dict:
        return {'level': self.level, 'auc_pr': self.auc_pr, 'auc_roc': self.auc_roc,
                'prevalence': self.prevalence, 'n_pos': self.n_pos, 'n_neg': self.n_neg}

    def write(self, path) -> None:
        """JSON with the scalars and every curve point"""
        utils.write_json(self.model_dump(), path)

    @classmethod
    def read(cls, path) -> 'MetricsReport':
        return cls.model_validate(utils.read_json(path))


def curves(preds: PredictionSet, level: str = 'image') -> MetricsReport:
    _check_both_classes(preds)
    tp, fp, thresholds = _threshold_blocks(preds)
    recall = tp / preds.n_pos
    precision = tp / (tp + fp)
    fpr = fp / preds.n_neg
    report = MetricsReport(
        level=level,
        auc_pr=auc_pr(preds),
        auc_roc=auc_roc(preds),
        prevalence=preds.prevalence,
        n_pos=preds.n_pos,
        n_neg=preds.n_neg,
        thresholds=thresholds.tolist(),
        pr_recall=[0.0] + recall.tolist(),
        pr_precision=[1.0] + precision.tolist(),
        roc_fpr=[0.0] + fpr.tolist(),
        roc_tpr=[0.0] + recall.tolist(),
    )
    logger.debug("%s-level AUC-PR %.4f AUC-ROC %.4f (prevalence %.4f)",
                 level, report.auc_pr, report.auc_roc, report.prevalence)
    return report


def evaluate(preds: PredictionSet):
    """(image-level, subject-level) reports"""
    return curves(preds, 'image'), curves(aggregate_subjects(preds), 'subject')
