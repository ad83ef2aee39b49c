"""Forward pass, multi-task loss and analytic gradients of the progressive encoder.

Parameters live in :class:`EncoderParams`. Level 1 is ``normalize(R x)`` with a
fixed reducer ``R``; level ``l >= 2`` is::

    z_l = F_l e_{l-1} + b_l + W_l e_1
    z_L = blend * x + (1 - blend) * z_L        (finest level only)
    e_l = z_l / ||z_l||

``proj_l`` (matrix ``P_l``, shape ``D_l x D_{l+1}``) maps level ``l+1`` back
down for the consistency term. Everything is computed in float64.
"""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EncoderParams:
    reducer: np.ndarray
    refine: list  # F_l for l = 2..L, each (D_l, D_{l-1})
    bias: list  # b_l for l = 2..L
    skip: list  # W_l for l = 2..L, each (D_l, D_1)
    proj: list  # P_l for l = 1..L-1, each (D_l, D_{l+1})
    blend: float = 0.5

    @property
    def dims(self):
        return (self.reducer.shape[0],) + tuple(F.shape[0] for F in self.refine)

    @property
    def n_levels(self):
        return len(self.refine) + 1

    def trainable(self):
        """Trainable arrays in a fixed order (used for updates and flattening)."""
        return [*self.refine, *self.bias, *self.skip, *self.proj]

    def with_trainable(self, arrays):
        k = len(self.refine)
        return EncoderParams(
            reducer=self.reducer,
            refine=list(arrays[:k]),
            bias=list(arrays[k:2 * k]),
            skip=list(arrays[2 * k:3 * k]),
            proj=list(arrays[3 * k:4 * k]),
            blend=self.blend,
        )

    def copy(self, dtype=None):
        cast = (lambda a: a.astype(dtype)) if dtype is not None else (lambda a: a.copy())
        return EncoderParams(cast(self.reducer), [cast(a) for a in self.refine],
                             [cast(a) for a in self.bias], [cast(a) for a in self.skip],
                             [cast(a) for a in self.proj], self.blend)


@dataclass
class LossWeights:
    alphas: tuple
    beta: float = 1.0
    gamma: float = 1e-4
    temperature: float = 0.07

    def __post_init__(self):
        self.alphas = tuple(float(a) for a in self.alphas)
        if any(a < 0 for a in self.alphas) or sum(self.alphas) <= 0:
            raise ValueError("alphas must be nonnegative with a positive sum")
        if self.beta < 0 or self.gamma < 0:
            raise ValueError("beta and gamma must be nonnegative")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")


@dataclass
class _Forward:
    levels: list
    norms: list = field(default_factory=list)


def forward(params, X):
    """Per-level embeddings of the rows of ``X`` plus the cache backward needs."""
    X = np.asarray(X, dtype=np.float64)
    u = X @ params.reducer.T.astype(np.float64)
    n1 = np.linalg.norm(u, axis=1, keepdims=True)
    if np.any(n1 == 0):
        raise ValueError("source vector lies in the null space of the level-1 reducer")
    e1 = u / n1
    levels, norms = [e1], [n1]
    last = params.n_levels - 2
    for i in range(params.n_levels - 1):
        z = levels[-1] @ params.refine[i].T + params.bias[i] + e1 @ params.skip[i].T
        if i == last:
            z = params.blend * X + (1.0 - params.blend) * z
        nz = np.linalg.norm(z, axis=1, keepdims=True)
        if np.any(nz == 0):
            raise ValueError(f"level {i + 2} pre-activation is zero")
        levels.append(z / nz)
        norms.append(nz)
    return _Forward(levels, norms)


def _backward(params, fw, dlevels):
    """Accumulate parameter gradients from gradients w.r.t. each level output."""
    L = params.n_levels
    dlevels = [d.copy() for d in dlevels]
    dF = [None] * (L - 1)
    db = [None] * (L - 1)
    dW = [None] * (L - 1)
    e1 = fw.levels[0]
    for i in range(L - 2, -1, -1):
        lv = i + 1
        e, nz, de = fw.levels[lv], fw.norms[lv], dlevels[lv]
        dz = (de - e * np.sum(e * de, axis=1, keepdims=True)) / nz
        if i == L - 2:
            dz = (1.0 - params.blend) * dz
        dF[i] = dz.T @ fw.levels[lv - 1]
        db[i] = dz.sum(axis=0)
        dW[i] = dz.T @ e1
        dlevels[lv - 1] += dz @ params.refine[i]
        dlevels[0] += dz @ params.skip[i]
    return dF, db, dW


def info_nce(ea, eb, temperature):
    """In-batch InfoNCE (anchor -> positive) with cosine similarity.

    Returns the mean loss and its gradients with respect to ``ea`` and ``eb``.
    """
    n = ea.shape[0]
    S = (ea @ eb.T) / temperature
    m = S.max(axis=1, keepdims=True)
    expS = np.exp(S - m)
    lse = np.log(expS.sum(axis=1)) + m[:, 0]
    loss = float(np.mean(lse - np.diag(S)))
    P = expS / expS.sum(axis=1, keepdims=True)
    dS = (P - np.eye(n)) / n
    return loss, dS @ eb / temperature, dS.T @ ea / temperature


def consistency_terms(levels, proj):
    """Mean over rows of sum_l ||e_l - P_l e_{l+1}||^2, plus per-level residuals."""
    n = levels[0].shape[0]
    total = 0.0
    residuals = []
    for lv, P in enumerate(proj):
        r = levels[lv] - levels[lv + 1] @ P.T
        residuals.append(r)
        total += float(np.sum(r * r)) / n
    return total, residuals


def regularization(params):
    return float(sum(np.sum(np.asarray(a, dtype=np.float64) ** 2) for a in params.trainable()))


def total_loss(params, anchors, positives, weights, with_grad=True):
    """Evaluate every loss component and, optionally, the gradients.

    Returns ``(components, grads)`` where ``components`` has keys
    ``retrieval`` (list per level), ``consistency``, ``reg`` and ``total``;
    ``grads`` lists arrays aligned with ``params.trainable()``.
    """
    L = params.n_levels
    if len(weights.alphas) != L:
        raise ValueError(f"expected {L} alpha weights, got {len(weights.alphas)}")
    fa = forward(params, anchors)
    fb = forward(params, positives)
    n = anchors.shape[0]

    dA = [np.zeros_like(e) for e in fa.levels]
    dB = [np.zeros_like(e) for e in fb.levels]
    retrieval = []
    for lv in range(L):
        loss, ga, gb = info_nce(fa.levels[lv], fb.levels[lv], weights.temperature)
        retrieval.append(loss)
        dA[lv] += weights.alphas[lv] * ga
        dB[lv] += weights.alphas[lv] * gb

    cons, residuals = consistency_terms(fa.levels, params.proj)
    dP = []
    for lv, (r, P) in enumerate(zip(residuals, params.proj)):
        g = (2.0 * weights.beta / n) * r
        dA[lv] += g
        dA[lv + 1] -= g @ P
        dP.append(-(g.T @ fa.levels[lv + 1]))

    reg = regularization(params)
    total = float(np.dot(weights.alphas, retrieval) + weights.beta * cons + weights.gamma * reg)
    components = {"retrieval": retrieval, "consistency": cons, "reg": reg, "total": total}
    if not with_grad:
        return components, None

    dFa, dba, dWa = _backward(params, fa, dA)
    dFb, dbb, dWb = _backward(params, fb, dB)
    k = L - 1
    grads = ([dFa[i] + dFb[i] for i in range(k)]
             + [dba[i] + dbb[i] for i in range(k)]
             + [dWa[i] + dWb[i] for i in range(k)]
             + dP)
    grads = [g + 2.0 * weights.gamma * p for g, p in zip(grads, params.trainable())]
    return components, grads
