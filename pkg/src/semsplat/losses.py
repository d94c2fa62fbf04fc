"""Training losses and their analytic gradients.

Every function returns (scalar_value, grads) where grads is a small dict of
cotangents keyed by what they flow into: "image" / "feature_img" /
"pseudo_feature_imgs" (per-view list) / "features" / "positions" and a
`HeadGrads` under "heads". All values are plain float64 numpy; every analytic
gradient in here is covered by a central finite-difference check in the test
suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import GaussianSet
from .heads import (
    HeadGrads,
    SemanticHeads,
    TextBank,
    cosine_logits_backward,
    feature_head_forward,
    segmentation_logits,
    softmax,
)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WEIGHT = 0.2  # lambda of the (1 - SSIM) term in the color loss


@dataclass
class SupervisionMaps:
    """Per-view semantic targets: a hard label map plus the per-class feature
    table (expanded lazily), or an optional dense feature raster."""

    gt_labels: np.ndarray                 # (H,W) int
    class_features: np.ndarray            # (M, 512)
    gt_features_dense: np.ndarray | None = None  # (H,W,512) overrides table

    def __post_init__(self):
        self.gt_labels = np.ascontiguousarray(self.gt_labels)
        self.class_features = np.ascontiguousarray(self.class_features, dtype=np.float64)
        m = self.class_features.shape[0]
        if self.gt_labels.min(initial=0) < 0 or self.gt_labels.max(initial=0) >= m:
            raise ValueError("labels out of range for class table")


def _ssim_kernel():
    half = SSIM_WINDOW // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    return k / k.sum()


_SSIM_K = _ssim_kernel()


def _blur(img: np.ndarray) -> np.ndarray:
    """Separable window filter, zero padding, applied over the leading 2 axes."""
    out = ndimage.correlate1d(img, _SSIM_K, axis=0, mode="constant", cval=0.0)
    return ndimage.correlate1d(out, _SSIM_K, axis=1, mode="constant", cval=0.0)


def ssim_map(a: np.ndarray, b: np.ndarray):
    """Per-pixel, per-channel SSIM with the standard constants.

    Returns (map, intermediates) so loss_color can reuse them for gradients.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    mu_a = _blur(a)
    mu_b = _blur(b)
    var_a = _blur(a * a) - mu_a**2
    var_b = _blur(b * b) - mu_b**2
    cov = _blur(a * b) - mu_a * mu_b
    a1 = 2 * mu_a * mu_b + c1
    a2 = 2 * cov + c2
    b1 = mu_a**2 + mu_b**2 + c1
    b2 = var_a + var_b + c2
    smap = (a1 * a2) / (b1 * b2)
    inter = dict(mu_a=mu_a, mu_b=mu_b, a1=a1, a2=a2, b1=b1, b2=b2)
    return smap, inter


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    smap, _ = ssim_map(a, b)
    return float(smap.mean())


def loss_color(rendered: np.ndarray, gt: np.ndarray):
    """(1 - w) * L1 + w * (1 - SSIM), w = 0.2. Gradient w.r.t. `rendered`."""
    x = np.asarray(rendered, dtype=np.float64)
    y = np.asarray(gt, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    n = x.size
    diff = x - y
    l1 = np.abs(diff).mean()
    smap, it = ssim_map(x, y)
    value = (1 - SSIM_WEIGHT) * l1 + SSIM_WEIGHT * (1.0 - smap.mean())

    d_map = np.full(x.shape, -SSIM_WEIGHT / n)
    mu_a, mu_b = it["mu_a"], it["mu_b"]
    a1, a2, b1, b2 = it["a1"], it["a2"], it["b1"], it["b2"]
    denom = b1 * b2
    d_mu_a = d_map * (2 * mu_b * a2 / denom - 2 * mu_a * a1 * a2 / (b1 * denom))
    d_var_a = d_map * (-a1 * a2 / (b2 * denom))
    d_cov = d_map * (2 * a1 / denom)
    d_x = (_blur(d_mu_a)
           + 2 * x * _blur(d_var_a) - 2 * _blur(d_var_a * mu_a)
           + y * _blur(d_cov) - _blur(d_cov * mu_b))
    d_x += (1 - SSIM_WEIGHT) * np.sign(diff) / n
    return float(value), {"image": d_x}


def loss_semantic(feature_img: np.ndarray, logits: np.ndarray,
                  sup: SupervisionMaps, heads: SemanticHeads, bank: TextBank):
    """Mean (1 - cos(w_f(F), F_gt)) plus mean cross-entropy of softmax(w_s(S))
    against the hard ground-truth label.

    The class-table path contracts every w_f product through (M,D)/(D,D)
    matrices; the dense-raster path materializes the aligned features.
    """
    from .heads import aligned_norms

    f = np.asarray(feature_img, dtype=np.float64)
    h, w, dim = f.shape
    npix = h * w
    flat_f = f.reshape(npix, dim)
    labels = sup.gt_labels.reshape(-1)
    grads = HeadGrads.zeros(heads)
    coef = -1.0 / npix

    if sup.gt_features_dense is not None:
        y = feature_head_forward(flat_f, heads)
        y_norm = np.linalg.norm(y, axis=1)
        ok = y_norm > 1e-12
        safe = np.where(ok, y_norm, 1.0)
        tgt = sup.gt_features_dense.reshape(npix, -1)
        t_norm = np.linalg.norm(tgt, axis=1)
        t_ok = t_norm > 1e-12
        t_safe = np.where(t_ok, t_norm, 1.0)
        cosv = np.where(ok & t_ok, np.sum(y * tgt, axis=1) / (safe * t_safe), 0.0)
        cos_term = float(np.mean(1.0 - cosv))
        d_y = coef * (tgt / (safe * t_safe)[:, None] - (cosv / safe**2)[:, None] * y)
        d_y = np.where((ok & t_ok)[:, None], d_y, 0.0)
        d_f = d_y @ heads.w_f
        grads.w_f += d_y.T @ flat_f
        grads.b_f += d_y.sum(axis=0)
    else:
        table = sup.class_features
        gram = heads.w_f.T @ heads.w_f
        hh = heads.w_f.T @ heads.b_f
        at = table @ heads.w_f      # (M, D)
        ut = table @ heads.b_f      # (M,)
        norm = aligned_norms(flat_f, heads)
        ok = norm > 1e-12
        safe = np.where(ok, norm, 1.0)
        t_norm = np.linalg.norm(table, axis=1)[labels]
        t_ok = t_norm > 1e-12
        t_safe = np.where(t_ok, t_norm, 1.0)
        numer = np.einsum("nd,nd->n", flat_f, at[labels]) + ut[labels]
        both = ok & t_ok
        cosv = np.where(both, numer / (safe * t_safe), 0.0)
        cos_term = float(np.mean(1.0 - cosv))
        w1 = np.where(both, coef / (safe * t_safe), 0.0)   # weight on F_l / (n t)
        c2 = np.where(both, coef * cosv / safe**2, 0.0)    # weight on -y / n^2
        yw = flat_f @ gram + hh                              # y @ w_f per pixel
        d_f = w1[:, None] * at[labels] - c2[:, None] * yw
        m_cls = table.shape[0]
        onehot = labels[None, :] == np.arange(m_cls)[:, None]  # (M, npix) bool
        scat = (onehot * w1[None, :]) @ flat_f                 # sum of w1*f per class
        cf = c2[:, None] * flat_f
        grads.w_f += table.T @ scat - (heads.w_f @ (flat_f.T @ cf)
                                       + np.outer(heads.b_f, cf.sum(axis=0)))
        wsum = (onehot * w1[None, :]).sum(axis=1)
        grads.b_f += table.T @ wsum - (heads.w_f @ cf.sum(axis=0) + heads.b_f * c2.sum())

    m = bank.num_classes
    s = np.asarray(logits, dtype=np.float64).reshape(npix, m)
    s_prime = s @ heads.w_s.T + heads.b_s
    p = softmax(s_prime, axis=1)
    smax = s_prime.max(axis=1, keepdims=True)
    logp = s_prime - smax - np.log(np.sum(np.exp(s_prime - smax), axis=1, keepdims=True))
    ce_term = float(-logp[np.arange(npix), labels].mean())
    value = cos_term + ce_term

    d_sprime = p.copy()
    d_sprime[np.arange(npix), labels] -= 1.0
    d_sprime /= npix
    grads.w_s += d_sprime.T @ s
    grads.b_s += d_sprime.sum(axis=0)
    d_logits = (d_sprime @ heads.w_s).reshape(h, w, m)
    d_f2, d_wf2, d_bf2 = cosine_logits_backward(f, heads, bank, d_logits)
    d_f = d_f.reshape(f.shape) + d_f2
    grads.w_f += d_wf2
    grads.b_f += d_bf2
    return value, {"feature_img": d_f, "heads": grads}


def loss_generated_semantic(feature_img, logits, sup, heads, bank):
    """Semantic loss for augmented (generated) views; color deliberately has
    no counterpart here."""
    return loss_semantic(feature_img, logits, sup, heads, bank)


def loss_local_adaptive(scene: GaussianSet, rng: np.random.Generator,
                        sample_count: int = 800, num_neighbors: int = 5,
                        sample_idx: np.ndarray | None = None):
    """Distance-weighted feature smoothness over sampled Gaussians and their
    Euclidean nearest neighbors."""
    from scipy.spatial import cKDTree

    n = len(scene)
    if n <= 1:
        return 0.0, {"features": np.zeros(scene.features.shape),
                     "positions": np.zeros((n, 3))}
    if sample_idx is None:
        take = min(sample_count, n)
        sample_idx = rng.choice(n, size=take, replace=False)
    sample_idx = np.asarray(sample_idx)
    k = min(num_neighbors, n - 1)
    pos = scene.positions.astype(np.float64)
    feat = scene.features.astype(np.float64)
    tree = cKDTree(pos)
    _, nbr = tree.query(pos[sample_idx], k=k + 1)
    nbr = np.atleast_2d(nbr)
    # Drop self; with exact duplicates self can land in any column.
    cleaned = np.empty((len(sample_idx), k), dtype=np.int64)
    for row, (i, cand) in enumerate(zip(sample_idx, nbr)):
        cand = cand[cand != i][:k]
        if len(cand) < k:
            extra = [j for j in nbr[row] if j != i and j not in cand]
            cand = np.concatenate([cand, extra[: k - len(cand)]])
        cleaned[row] = cand

    i_idx = np.repeat(sample_idx, k)
    j_idx = cleaned.reshape(-1)
    delta_p = pos[i_idx] - pos[j_idx]
    dist = np.linalg.norm(delta_p, axis=1)
    wgt = np.exp(-dist)
    delta_f = feat[i_idx] - feat[j_idx]
    fdist = np.linalg.norm(delta_f, axis=1)
    scale = 1.0 / (len(sample_idx) * k)
    value = float(scale * np.sum(wgt * fdist))

    d_feat = np.zeros_like(feat)
    d_pos = np.zeros_like(pos)
    f_ok = fdist > 1e-12
    coef_f = np.where(f_ok, scale * wgt / np.where(f_ok, fdist, 1.0), 0.0)
    contrib_f = coef_f[:, None] * delta_f
    np.add.at(d_feat, i_idx, contrib_f)
    np.add.at(d_feat, j_idx, -contrib_f)
    d_ok = dist > 1e-12
    coef_p = np.where(d_ok, -scale * wgt * fdist / np.where(d_ok, dist, 1.0), 0.0)
    contrib_p = coef_p[:, None] * delta_p
    np.add.at(d_pos, i_idx, contrib_p)
    np.add.at(d_pos, j_idx, -contrib_p)
    return value, {"features": d_feat, "positions": d_pos}


def phi_uniform(logits: np.ndarray, mask: np.ndarray, heads: SemanticHeads) -> int | None:
    """Dominant class by max voting of per-pixel argmax(w_s(logits)) inside
    the mask; ties break to the lowest class index; empty mask -> None."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return None
    s = np.asarray(logits, dtype=np.float64)[mask]
    s_prime = s @ heads.w_s.T + heads.b_s
    votes = np.argmax(s_prime, axis=1)
    counts = np.bincount(votes, minlength=heads.num_classes)
    return int(np.argmax(counts))


def loss_inter_view(train_out, pseudo_outs, masks, heads: SemanticHeads, bank: TextBank):
    """Training-to-pseudo consistency: masked feature means (L2) plus
    cross-entropy of pseudo logits against the training region's dominant
    class. Training-view quantities are constants (detached targets)."""
    train_mask = np.asarray(masks.train_mask, dtype=bool)
    grads = HeadGrads.zeros(heads)
    d_pseudo = [np.zeros(po.feature.shape) for po in pseudo_outs]
    out = {"pseudo_feature_imgs": d_pseudo, "heads": grads, "skipped": False}
    if not train_mask.any() or all(not np.asarray(m, dtype=bool).any()
                                   for m in masks.pseudo_masks):
        out["skipped"] = True
        return 0.0, out

    mean_train = train_out.feature[train_mask].mean(axis=0)  # detached
    train_logits = segmentation_logits(train_out.feature, heads, bank)
    dominant = phi_uniform(train_logits, train_mask, heads)

    value = 0.0
    for p, (po, pm) in enumerate(zip(pseudo_outs, masks.pseudo_masks)):
        pm = np.asarray(pm, dtype=bool)
        if not pm.any():
            continue
        cnt = int(pm.sum())
        mean_p = po.feature[pm].mean(axis=0)
        diff = mean_p - mean_train
        nrm = float(np.linalg.norm(diff))
        value += nrm
        if nrm > 1e-12:
            d_pseudo[p][pm] += diff / (nrm * cnt)
        if dominant is None:
            continue
        logits_p = segmentation_logits(po.feature, heads, bank)
        sel = logits_p[pm]
        probs = softmax(sel, axis=1)
        shifted = sel - sel.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        value += float(-logp[:, dominant].mean())
        d_sel = probs.copy()
        d_sel[:, dominant] -= 1.0
        d_sel /= cnt
        d_logits = np.zeros(logits_p.shape)
        d_logits[pm] = d_sel
        d_f, d_wf, d_bf = cosine_logits_backward(po.feature, heads, bank, d_logits)
        d_pseudo[p] += d_f
        grads.w_f += d_wf
        grads.b_f += d_bf
    return float(value), out


def loss_contrastive(feature_img: np.ndarray, logits: np.ndarray,
                     auto_masks: list[np.ndarray], heads: SemanticHeads,
                     rng: np.random.Generator, patch_size: tuple[int, int] = (32, 32),
                     max_samples: int = 1024, temperature: float = 0.2):
    """Supervised contrastive loss over a random patch: positives share the
    dominant class of the auto-mask containing them; anchors without positives
    are skipped and the loss averages over anchors that have any."""
    f = np.asarray(feature_img, dtype=np.float64)
    h, w, d = f.shape
    grads = HeadGrads.zeros(heads)
    zero = 0.0, {"feature_img": np.zeros(f.shape), "heads": grads}
    if not auto_masks:
        return zero

    # One vote pass for all masks (same result as phi_uniform per mask).
    s_prime = np.asarray(logits, dtype=np.float64) @ heads.w_s.T + heads.b_s
    votes = np.argmax(s_prime, axis=-1)
    label_map = np.full((h, w), -1, dtype=np.int64)
    for m in auto_masks:
        m = np.asarray(m, dtype=bool)
        if m.any():
            counts = np.bincount(votes[m], minlength=heads.num_classes)
            label_map[m] = int(np.argmax(counts))

    ph = min(patch_size[0], h)
    pw = min(patch_size[1], w)
    top = int(rng.integers(0, h - ph + 1))
    left = int(rng.integers(0, w - pw + 1))
    patch_labels = label_map[top:top + ph, left:left + pw].reshape(-1)
    valid = np.flatnonzero(patch_labels >= 0)
    if len(valid) > max_samples:
        valid = np.sort(rng.choice(valid, size=max_samples, replace=False))
    if len(valid) < 2:
        return zero
    labels = patch_labels[valid]
    if len(np.unique(labels)) == len(labels):
        return zero  # no anchor has a positive

    rows = top + valid // pw
    cols = left + valid % pw
    samples = f[rows, cols]  # (N, D)
    u = samples @ heads.w_psi.T + heads.b_psi
    u_norm = np.linalg.norm(u, axis=1, keepdims=True)
    u_ok = u_norm > 1e-12
    safe = np.where(u_ok, u_norm, 1.0)
    z = np.where(u_ok, u / safe, 0.0)

    n = len(z)
    sim = z @ z.T / temperature
    np.fill_diagonal(sim, -np.inf)
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    pos_counts = same.sum(axis=1)
    anchors = np.flatnonzero(pos_counts > 0)
    row_max = np.max(sim, axis=1, keepdims=True)
    expv = np.exp(sim - row_max)  # diagonal exp(-inf) = 0
    denom = expv.sum(axis=1)
    lse = np.log(denom) + row_max[:, 0]
    pos_sum = np.sum(sim, axis=1, where=same, initial=0.0)
    per_anchor = np.where(pos_counts > 0,
                          -(pos_sum - pos_counts * lse) / np.maximum(pos_counts, 1),
                          0.0)
    value = float(per_anchor[anchors].mean())

    # d value / d sim.
    n_a = len(anchors)
    d_sim = np.zeros((n, n))
    d_sim[anchors] = expv[anchors] / denom[anchors, None] / n_a
    d_sim[anchors] -= same[anchors] / (pos_counts[anchors][:, None] * n_a)
    d_sim /= temperature
    d_z = d_sim @ z + d_sim.T @ z
    d_u = np.where(u_ok, (d_z - np.sum(d_z * z, axis=1, keepdims=True) * z) / safe, 0.0)
    d_feature = np.zeros(f.shape)
    d_feature[rows, cols] += d_u @ heads.w_psi
    grads.w_psi += d_u.T @ samples
    grads.b_psi += d_u.sum(axis=0)
    return value, {"feature_img": d_feature, "heads": grads}


def loss_region_kl(train_out, pseudo_outs, eroded_train_mask,
                   eroded_pseudo_masks, scene: GaussianSet):
    """KL between softmax-normalized mean feature of the training region's
    dominant (max-weight) Gaussians and each pseudo region Gaussian's
    softmax-normalized feature. Training side is a detached target."""
    from .regions import collect_max_weight

    n = len(scene)
    d_feat = np.zeros(scene.features.shape)
    out = {"features": d_feat, "skipped": False}
    train_mask = np.asarray(eroded_train_mask, dtype=bool)
    if not train_mask.any() or any(not np.asarray(m, dtype=bool).any()
                                   for m in eroded_pseudo_masks):
        out["skipped"] = True
        return 0.0, out
    train_idx = collect_max_weight(train_out, train_mask)
    if len(train_idx) == 0:
        out["skipped"] = True
        return 0.0, out
    pseudo_idx: list[np.ndarray] = []
    for po, m in zip(pseudo_outs, eroded_pseudo_masks):
        idx = collect_max_weight(po, np.asarray(m, dtype=bool))
        if len(idx) == 0:
            out["skipped"] = True
            return 0.0, out
        pseudo_idx.append(idx)
    union = np.unique(np.concatenate(pseudo_idx))

    feats = scene.features.astype(np.float64)
    mean_f = feats[train_idx].mean(axis=0)  # detached
    p = softmax(mean_f)
    q = softmax(feats[union], axis=1)
    value = float(np.sum(p[None, :] * (np.log(p)[None, :] - np.log(q))))
    d_feat[union] += q - p[None, :]
    return value, out


def lambda_weight(iteration: int, warmup: int = 4000) -> float:
    """Consistency-term weight schedule: 0 before `warmup`, 1 from it on."""
    return 0.0 if iteration < warmup else 1.0


def loss_total(components: dict[str, float], iteration: int, warmup: int = 4000) -> float:
    """Combine per-term scalars: color + semantic + generated-semantic +
    local-adaptive + lambda * (inter-view + contrastive + region-KL)."""
    lam = lambda_weight(iteration, warmup)
    base = (components.get("color", 0.0) + components.get("semantic", 0.0)
            + components.get("generated_semantic", 0.0)
            + components.get("local_adaptive", 0.0))
    spc = (components.get("inter_view", 0.0) + components.get("contrastive", 0.0)
           + components.get("region_kl", 0.0))
    return base + lam * spc
