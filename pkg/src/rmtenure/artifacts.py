"""JSON model artifacts and run manifests.

Numbers are written as shortest round-trip decimal strings so that a model
file reproduces the fitted floats exactly on any platform.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
from pathlib import Path

import numpy as np

from . import __version__
from .cox import CoxFit

FORMAT = "rmtenure-model/1"


def _s(x) -> str:
    return repr(float(x))


def _arr(a):
    a = np.asarray(a, dtype=float)
    if a.ndim == 0:
        return _s(a)
    return [_arr(v) for v in a]

def fit_to_dict(fit: CoxFit) -> dict:
    p = len(fit.beta_hat)
    coefs = []
    if p:
        se, hr, pv = fit.std_errors, fit.hazard_ratios, fit.p_values
        for j, name in enumerate(fit.covariate_names):
            coefs.append({"name": name, "coef": _s(fit.beta_hat[j]), "se": _s(se[j]),
                          "hazard_ratio": _s(hr[j]), "p_value": _s(pv[j])})
    return {
        "process": fit.process,
        "covariates": list(fit.covariate_names),
        "coefficients": coefs,
        "beta": _arr(fit.beta_hat),
        "hessian": _arr(fit.hessian),
        "hessian_inverse": _arr(fit.hessian_inverse),
        "baseline": {"times": _arr(fit.event_times), "jumps": _arr(fit.baseline_jumps)},
        "subject_ids": list(fit.subject_ids),
        "score_residuals": _arr(fit.score_residuals),
        "converged": fit.converged,
        "iterations": fit.iterations,
        "final_score_norm": _s(fit.final_score_norm),
        "log_likelihood": _s(fit.log_likelihood),
    }

def fit_from_dict(raw: dict) -> CoxFit:
    p = len(raw["covariates"])
    m = len(raw["subject_ids"])
    return CoxFit(
        process=raw["process"],
        covariate_names=tuple(raw["covariates"]),
        beta_hat=np.array(raw["beta"], dtype=float).reshape(p),
        hessian=np.array(raw["hessian"], dtype=float).reshape(p, p),
        hessian_inverse=np.array(raw["hessian_inverse"], dtype=float).reshape(p, p),
        event_times=np.array(raw["baseline"]["times"], dtype=float),
        baseline_jumps=np.array(raw["baseline"]["jumps"], dtype=float),
        subject_ids=tuple(raw["subject_ids"]),
        score_residuals=np.array(raw["score_residuals"], dtype=float).reshape(m, p),
        converged=bool(raw["converged"]),
        iterations=int(raw["iterations"]),
        final_score_norm=float(raw["final_score_norm"]),
        log_likelihood=float(raw["log_likelihood"]),
    )

def dumps_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"

def model_to_json(fitP: CoxFit, fitR: CoxFit, data_digest: str | None = None) -> str:
    return dumps_json({
        "format": FORMAT,
        "tool_version": __version__,
        "data_digest": data_digest,
        "promotion": fit_to_dict(fitP),
        "retirement": fit_to_dict(fitR),
    })

def load_model(path) -> tuple[CoxFit, CoxFit, dict]:
    raw = json.loads(Path(path).read_text())
    if raw.get("format") != FORMAT:
        raise ValueError(f"{path}: not a {FORMAT} model file")
    return fit_from_dict(raw["promotion"]), fit_from_dict(raw["retirement"]), raw

def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return "sha256:" + h.hexdigest()

def text_digest(text: str) -> str:
    return "sha256:" + hashlib.sha256(text.encode()).hexdigest()

def write_manifest(out_dir, command: str, config: dict, inputs: dict, seed=None) -> Path:
    """Record what produced the outputs in ``out_dir``; the timestamp is the
    only field that differs between identical reruns."""
    manifest = {
        "command": command,
        "config_digest": text_digest(json.dumps(config, sort_keys=True)),
        "config": config,
        "input_digests": {k: file_digest(v) for k, v in sorted(inputs.items()) if v is not None},
        "tool_version": __version__,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
        "seed": seed,
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(dumps_json(manifest))
    return path
