"""Training losses and their gradients.

The survival loss is the inverse-propensity-weighted factual negative
log-likelihood of the mixture, evaluated in the log domain with a
log-sum-exp over subgroups. Losses are weighted sums divided by batch size.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit, logsumexp
from scipy.special import softmax as _softmax

from cnsc.errors import DomainError, NumericError, ShapeError
from cnsc.model import CnscModel
from cnsc.nn import MLP, log_softmax

WEIGHT_FLOOR = 0.05
WEIGHT_CEIL = 0.95
CE_CLIP = 1e-12


def ipw_weights(propensities, treatments) -> np.ndarray:
    """Truncated inverse propensity weights.

    The inverse weight is ``a*p + (1-a)*(1-p)``, replaced by 0.05 when
    ``p < 0.05`` and by 0.95 when ``p > 0.95``.
    """
    p = np.asarray(propensities, dtype=float)
    a = np.asarray(treatments)
    if p.shape != a.shape:
        raise ShapeError("propensities and treatments must align")
    if np.any(~np.isfinite(p)) or np.any(p <= 0) or np.any(p >= 1):
        raise DomainError("propensities must lie in the open interval (0, 1)")
    inv = np.where(a == 1, p, 1.0 - p)
    inv = np.where(p < WEIGHT_FLOOR, WEIGHT_FLOOR, inv)
    inv = np.where(p > WEIGHT_CEIL, WEIGHT_CEIL, inv)
    return 1.0 / inv


def _batch_arrays(batch):
    x = np.asarray(batch.x, dtype=float)
    t = np.asarray(batch.t, dtype=float)
    d = np.asarray(batch.d).astype(float)
    a = np.asarray(batch.a).astype(int)
    n = x.shape[0]
    if t.shape != (n,) or d.shape != (n,) or a.shape != (n,):
        raise ShapeError("batch columns have inconsistent lengths")
    return x, t, d, a


def log_likelihood_terms(model: CnscModel, batch, record: bool = False):
    """Per-sample factual log-likelihood contributions.

    Events contribute ``log sum_k P(k|x) lambda_k(t|a) exp(-Lambda_k(t|a))``
    and censored samples ``log sum_k P(k|x) exp(-Lambda_k(t|a))``.
    """
    x, t, d, a = _batch_arrays(batch)
    n, k = x.shape[0], model.k
    xn, _ = model._prep(x)
    logits, g_tape = model.G.forward(xn)
    logp = log_softmax(logits)
    scale = model.normalizer.time_scale
    tn = np.repeat(t / scale, k)
    lat = np.tile(model.latents, (n, 1))
    Lambda, lam, h_tape = model.M.evaluate(lat, tn, record=True)
    rows = np.arange(n * k)
    heads = np.repeat(a, k)
    Lambda_a = Lambda[rows, heads].reshape(n, k)
    lam_a = lam[rows, heads].reshape(n, k)
    with np.errstate(divide="ignore"):
        z = logp - Lambda_a + d[:, None] * (np.log(lam_a) - np.log(scale))
    ll = logsumexp(z, axis=1)
    bad = np.flatnonzero(~np.isfinite(ll))
    if bad.size:
        raise NumericError(f"non-finite log-likelihood at sample index {int(bad[0])}")
    if not record:
        return ll
    cache = {"logits": logits, "g_tape": g_tape, "h_tape": h_tape, "z": z, "lam_a": lam_a, "rows": rows, "heads": heads, "d": d}
    return ll, cache


def weighted_nll(model: CnscModel, batch, weights=None, return_grad: bool = False):
    """Weighted factual NLL, ``-sum_i w_i l_i / n``.

    With ``return_grad`` also returns gradients keyed like
    :meth:`CnscModel.stage2_parameters`.
    """
    n = len(batch.t)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    if w.shape != (n,):
        raise ShapeError("weights must align with the batch")
    if not return_grad:
        ll = log_likelihood_terms(model, batch)
        return float(-np.dot(w, ll) / n)
    ll, c = log_likelihood_terms(model, batch, record=True)
    loss = float(-np.dot(w, ll) / n)
    k = model.k
    coef = (w / n)[:, None]
    r = _softmax(c["z"], axis=1)
    p = _softmax(c["logits"], axis=1)
    g_logits = -coef * (r - p)
    g_Lambda = np.zeros((n * k, 2))
    g_lam = np.zeros((n * k, 2))
    g_Lambda[c["rows"], c["heads"]] = (coef * r).ravel()
    g_lam[c["rows"], c["heads"]] = (-coef * r * c["d"][:, None] / c["lam_a"]).ravel()
    m_grads, g_lat = model.M.backward(c["h_tape"], g_Lambda, g_lam)
    g_grads, _ = model.G.backward(c["g_tape"], g_logits)
    grads = {}
    for i, (gw, gb) in enumerate(g_grads):
        grads[f"G.w{i}"], grads[f"G.b{i}"] = gw, gb
    for i, (gw, gb) in enumerate(m_grads):
        grads[f"M.w{i}"], grads[f"M.b{i}"] = gw, gb
    grads["latents"] = g_lat[:, : model.latent_dim].reshape(n, k, -1).sum(axis=0)
    return loss, grads


def factual_nll(model: CnscModel, batch) -> float:
    """Mean unweighted factual NLL per sample."""
    return weighted_nll(model, batch)


def propensity_ce(net: MLP, x, a, return_grad: bool = False):
    """Mean binary cross-entropy of ``sigmoid(net(x))`` against ``a``.

    ``x`` must already be normalised. Predictions are clipped to
    ``[1e-12, 1 - 1e-12]`` before taking logs.
    """
    a = np.asarray(a, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.shape[0] == 0:
        raise ShapeError("empty batch")
    if a.shape != (x.shape[0],):
        raise ShapeError("treatments must align with covariates")
    out, tape = net.forward(x)
    logit = out[:, 0]
    p = np.clip(expit(logit), CE_CLIP, 1.0 - CE_CLIP)
    loss = float(-np.mean(a * np.log(p) + (1.0 - a) * np.log1p(-p)))
    if not return_grad:
        return loss
    grads, _ = net.backward(tape, ((expit(logit) - a) / a.shape[0])[:, None])
    named = {}
    for i, (gw, gb) in enumerate(grads):
        named[f"W.w{i}"], named[f"W.b{i}"] = gw, gb
    return loss, named
