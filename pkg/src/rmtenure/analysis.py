"""Two-model workflow: fit both processes, then predict per subject."""

from __future__ import annotations

import logging
from dataclasses import dataclass

from .cox import CountingProcessView, CoxFit, build_view, fit
from .data import Dataset, RestrictionWindow, SubjectRecord, validate_dataset
from .prediction import CounterfactualPolicy, RestrictedMeanEstimate, state_probability_curve
from .variance import estimate_with_se

log = logging.getLogger(__name__)

__all__ = ["TwoProcessModel", "SubjectPrediction", "fit_models"]


@dataclass(frozen=True)
class SubjectPrediction:
    subject_id: str
    lt: RestrictedMeanEstimate
    cap: RestrictedMeanEstimate
    rt: RestrictedMeanEstimate
    curve: list | None = None

    @property
    def estimates(self):
        return (self.lt, self.cap, self.rt)


@dataclass(frozen=True, eq=False)
class TwoProcessModel:
    dataset: Dataset
    viewP: CountingProcessView
    viewR: CountingProcessView
    fitP: CoxFit
    fitR: CoxFit

    @property
    def sample_ids(self) -> tuple[str, ...]:
        return tuple(s.id for s in self.dataset.subjects)

    def predict(self, record: SubjectRecord, policy: CounterfactualPolicy | None,
                window: RestrictionWindow, *, with_curve: bool = False) -> SubjectPrediction:
        ests, _ = estimate_with_se(self.fitP, self.viewP, self.fitR, self.viewR,
                                   record, policy, window, self.sample_ids)
        curve = None
        if with_curve:
            curve = state_probability_curve(self.fitP, self.fitR, record, policy, window)
        return SubjectPrediction(record.id, *ests, curve=curve)

    def predict_all(self, policy, window, *, subject_ids=None, with_curve=True):
        """Predictions for every eligible subject; those entering at or after
        ``tau1`` or lacking a promotion observation are skipped with a warning."""
        out = []
        wanted = set(subject_ids) if subject_ids is not None else None
        for rec in self.dataset.subjects:
            if wanted is not None and rec.id not in wanted:
                continue
            if rec.promotion is None:
                log.warning("skipping %s: no promotion observation", rec.id)
                continue
            if rec.promotion.entry >= window.tau1:
                log.warning("skipping %s: enters at %r, after window end %r",
                            rec.id, rec.promotion.entry, window.tau1)
                continue
            out.append(self.predict(rec, policy, window, with_curve=with_curve))
        return out


def fit_models(dataset: Dataset, *, validate: bool = True) -> TwoProcessModel:
    if validate:
        validate_dataset(dataset)
    viewP = build_view(dataset, "P")
    viewR = build_view(dataset, "R")
    return TwoProcessModel(dataset, viewP, viewR, fit(viewP), fit(viewR))
