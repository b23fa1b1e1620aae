"""Independent scalar re-implementations used as test oracles.

These work on plain floats / numpy arrays and never touch the tape.
Where the production code applies a stop-gradient, the oracle takes the
frozen value as an explicit argument, which is the function a finite
difference must be taken of for the comparison to be meaningful.
"""

import math



def log_sigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def lse(xs) -> float:
    m = max(xs)
    return m + math.log(math.fsum(math.exp(x - m) for x in xs))


def sft(pos_logps) -> float:
    return -math.fsum(pos_logps) / len(pos_logps)


def pl(r_w: float, r_neg, weights=None, beta: float = 1.0) -> float:
    weights = [1.0] * len(r_neg) if weights is None else list(weights)
    return -log_sigmoid(beta * lse([w * (r_w - r) for w, r in zip(weights, r_neg)]))


def dpo(pi_w, pi_l, ref_w, ref_l, beta=0.1) -> float:
    return -log_sigmoid(beta * ((pi_w - ref_w) - (pi_l - ref_l)))


def simpo(r_w, r_l, beta=2.0, gamma=0.0) -> float:
    return -log_sigmoid(beta * (r_w - r_l) - gamma)


def weight(sim, q25, q50, q75, lam=12.0) -> float:
    if sim < q25:
        return 1.0
    if sim > q75:
        return 0.5
    return 0.5 + 0.5 / (1.0 + math.exp(lam * (sim - q50)))


def quartiles(values) -> tuple[float, float, float]:
    """Linear-interpolation quartiles from an explicit sort."""
    v = sorted(values)
    n = len(v)

    def q(p):
        pos = p * (n - 1)
        lo = int(math.floor(pos))
        hi = min(lo + 1, n - 1)
        return v[lo] + (v[hi] - v[lo]) * (pos - lo)

    return q(0.25), q(0.5), q(0.75)


def session_total(cand_logps, neg_logps_for_contrast, lengths, pos_idx, anchor, neg_idx, weights,
                  beta=1.0, mlsft=True) -> float:
    """One session's SFT + weighted contrast from per-candidate sequence log-probs."""
    sft_term = sft([cand_logps[i] for i in pos_idx]) if mlsft else -cand_logps[anchor]
    r_w = cand_logps[anchor] / lengths[anchor]
    r_neg = [neg_logps_for_contrast[j] / lengths[j] for j in neg_idx]
    return sft_term + pl(r_w, r_neg, weights, beta)
