"""Independent reference implementations used to check the package."""

import numpy as np


def brute_force_map(obs, transition, emission, initial=None):
    """Score every one of the 4**n stage paths and return the best one.

    The score tensor has one axis per epoch, so its C-order flattening lists
    paths lexicographically.
    """
    obs = list(obs)
    la, lb = np.log(transition), np.log(emission)
    li = np.log(np.full(4, 0.25) if initial is None else initial)
    scores = li + lb[:, obs[0]]
    for o in obs[1:]:
        scores = scores[..., :, None] + la + lb[:, o]
    flat = int(np.argmax(scores.ravel()))
    return list(np.unravel_index(flat, scores.shape)), float(scores.ravel()[flat])


def map_paths(obs, transition, emission, initial=None, tol=1e-9):
    """Every path whose score is within ``tol`` of the best one.

    Repeated observations make exact ties common, because different paths can
    use the same multiset of transitions and emissions.
    """
    obs = list(obs)
    la, lb = np.log(transition), np.log(emission)
    li = np.log(np.full(4, 0.25) if initial is None else initial)
    scores = li + lb[:, obs[0]]
    for o in obs[1:]:
        scores = scores[..., :, None] + la + lb[:, o]
    flat_scores = scores.ravel()
    score = float(flat_scores.max())
    flat = np.flatnonzero(flat_scores >= score - tol * max(1.0, abs(score)))
    return {tuple(int(v) for v in np.unravel_index(f, scores.shape)) for f in flat}, score


def random_hmm(rng, concentration=1.0):
    t = rng.dirichlet(np.full(4, concentration), size=4)
    e = rng.dirichlet(np.full(5, concentration), size=4)
    i = rng.dirichlet(np.full(4, concentration))
    # keep entries strictly positive as the parameter type requires
    t = np.maximum(t, 1e-6)
    e = np.maximum(e, 1e-6)
    i = np.maximum(i, 1e-6)
    return t / t.sum(1, keepdims=True), e / e.sum(1, keepdims=True), i / i.sum()


def tally_confusion(pred, truth):
    """Per-epoch loop count of (truth, pred) over scored epochs."""
    m = [[0] * 4 for _ in range(4)]
    for p, t in zip(pred, truth):
        if p != "U" and t != "U":
            m["WLDR".index(t)]["WLDR".index(p)] += 1
    return np.array(m)


def kappa_by_hand(m):
    m = np.asarray(m, dtype=float)
    n = m.sum()
    po = sum(m[i][i] for i in range(len(m))) / n
    pe = sum((m[i].sum() / n) * (m[:, i].sum() / n) for i in range(len(m)))
    return (po - pe) / (1 - pe)
