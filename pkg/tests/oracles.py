"""Independent reference implementations used as test oracles."""

import numpy as np


def mc_kl(mq, lvq, mp, lvp, n, seed):
    """Monte-Carlo E_q[log q − log p] for diagonal Gaussians, float64."""
    rng = np.random.default_rng(seed)
    total, done = 0.0, 0
    while done < n:
        m = min(200_000, n - done)
        z = mq + np.exp(0.5 * lvq) * rng.standard_normal((m, len(mq)))
        lq = -0.5 * (lvq + (z - mq) ** 2 / np.exp(lvq)).sum(1)
        lp = -0.5 * (lvp + (z - mp) ** 2 / np.exp(lvp)).sum(1)
        total += (lq - lp).sum()
        done += m
    return total / n


def auroc_pairs(pos, neg):
    """Exhaustive pair count with ½ for ties."""
    s = 0.0
    for a in pos:
        for b in neg:
            s += 1.0 if a > b else 0.5 if a == b else 0.0
    return s / (len(pos) * len(neg))


def auprc_steps(pos, neg):
    """Average precision by walking every distinct threshold from the top."""
    scores = list(pos) + list(neg)
    truth = [1] * len(pos) + [0] * len(neg)
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, y in zip(scores, truth) if s >= t and y)
        fp = sum(1 for s, y in zip(scores, truth) if s >= t and not y)
        recall = tp / len(pos)
        ap += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return ap


def elbo_direct(x, mean, log_var, logits_fn, eps):
    """Bernoulli ELBO with one reparameterised draw, written out in float64."""
    z = mean + np.exp(0.5 * log_var) * eps
    logits = logits_fn(z)
    rec = np.sum(x * logits - np.logaddexp(0.0, logits), axis=-1)
    kl = 0.5 * np.sum(np.exp(log_var) + mean ** 2 - 1.0 - log_var, axis=-1)
    return rec - kl, rec, kl
