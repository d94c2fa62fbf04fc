"""Learnable per-pixel heads and the class text bank.

Three small linear maps applied per pixel/sample (the 1x1-convolution
equivalents): `w_f` aligns the D-dim rendered feature with the 512-dim class
embedding space, `w_s` remaps class logits before the cross-entropy, and
`w_psi` projects features into the contrastive embedding space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

EMBED_DIM = 512
CONTRAST_DIM = 16


@dataclass
class TextBank:
    embeddings: np.ndarray  # (M, 512), rows unit norm
    names: list[str]

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[1] != EMBED_DIM:
            raise ValueError(f"text bank must be (M,{EMBED_DIM})")
        if len(self.names) != len(self.embeddings):
            raise ValueError("names/embeddings length mismatch")
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("text bank rows must be unit norm")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    def resolve(self, query: str) -> int | None:
        """Case-insensitive exact match, then unique-prefix match."""
        q = query.strip().lower()
        if not q:
            return None
        lowered = [n.lower() for n in self.names]
        if q in lowered:
            return lowered.index(q)
        hits = [i for i, n in enumerate(lowered) if n.startswith(q)]
        return hits[0] if len(hits) == 1 else None


@dataclass
class SemanticHeads:
    w_f: np.ndarray    # (512, D)
    b_f: np.ndarray    # (512,)
    w_s: np.ndarray    # (M, M)
    b_s: np.ndarray    # (M,)
    w_psi: np.ndarray  # (d_z, D)
    b_psi: np.ndarray  # (d_z,)

    def __post_init__(self):
        for name in ("w_f", "b_f", "w_s", "b_s", "w_psi", "b_psi"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=np.float64))
        if self.w_f.shape[0] != EMBED_DIM or self.b_f.shape != (EMBED_DIM,):
            raise ValueError("w_f must map D -> 512")
        m = self.w_s.shape[0]
        if self.w_s.shape != (m, m) or self.b_s.shape != (m,):
            raise ValueError("w_s must be square (M,M)")
        if self.w_psi.shape[1] != self.w_f.shape[1] or self.b_psi.shape != (self.w_psi.shape[0],):
            raise ValueError("w_psi input dim must match w_f input dim")

    @property
    def feature_dim(self) -> int:
        return self.w_f.shape[1]

    @property
    def num_classes(self) -> int:
        return self.w_s.shape[0]

    @staticmethod
    def create(feature_dim: int, num_classes: int, rng: np.random.Generator,
               w_f_init: np.ndarray | None = None,
               contrast_dim: int = CONTRAST_DIM) -> "SemanticHeads":
        """Fresh heads. `w_f_init` (512, D) aligns the feature head with a known
        embedding->feature projection; otherwise a small random init is used."""
        if w_f_init is not None:
            w_f = np.array(w_f_init, dtype=np.float64)
        else:
            w_f = rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (EMBED_DIM, feature_dim))
        return SemanticHeads(
            w_f=w_f,
            b_f=np.zeros(EMBED_DIM),
            w_s=np.eye(num_classes) + rng.normal(0, 0.01, (num_classes, num_classes)),
            b_s=np.zeros(num_classes),
            w_psi=rng.normal(0.0, 1.0 / np.sqrt(feature_dim), (contrast_dim, feature_dim)),
            b_psi=np.zeros(contrast_dim),
        )

    def copy(self) -> "SemanticHeads":
        return SemanticHeads(self.w_f.copy(), self.b_f.copy(), self.w_s.copy(),
                             self.b_s.copy(), self.w_psi.copy(), self.b_psi.copy())


@dataclass
class HeadGrads:
    w_f: np.ndarray
    b_f: np.ndarray
    w_s: np.ndarray
    b_s: np.ndarray
    w_psi: np.ndarray
    b_psi: np.ndarray

    @staticmethod
    def zeros(heads: SemanticHeads) -> "HeadGrads":
        return HeadGrads(*(np.zeros_like(getattr(heads, f))
                           for f in ("w_f", "b_f", "w_s", "b_s", "w_psi", "b_psi")))

    def add(self, other: "HeadGrads | None"):
        if other is None:
            return self
        for f in ("w_f", "b_f", "w_s", "b_s", "w_psi", "b_psi"):
            getattr(self, f).__iadd__(getattr(other, f))
        return self


def feature_head_forward(feature_img: np.ndarray, heads: SemanticHeads) -> np.ndarray:
    """Apply w_f per pixel: (..., D) -> (..., 512)."""
    return feature_img @ heads.w_f.T + heads.b_f


def aligned_norms(feature_img: np.ndarray, heads: SemanticHeads) -> np.ndarray:
    """|w_f f + b_f| per pixel without materializing the 512-dim vectors:
    |y|^2 = f G f + 2 f.h + |b|^2 with G = w_f^T w_f."""
    f = np.asarray(feature_img, dtype=np.float64)
    gram = heads.w_f.T @ heads.w_f
    h = heads.w_f.T @ heads.b_f
    sq = np.einsum("...d,...d->...", f @ gram, f) + 2.0 * (f @ h) + heads.b_f @ heads.b_f
    return np.sqrt(np.maximum(sq, 0.0))


def segmentation_logits(feature_img: np.ndarray, heads: SemanticHeads,
                        bank: TextBank) -> np.ndarray:
    """Per-pixel cosine between the aligned feature w_f(f) and every bank row.

    Contracted through A = bank @ w_f so no per-pixel 512-dim intermediate is
    built. A zero-norm aligned feature yields all-zero logits (guard against
    the undefined cosine at initialization).
    """
    f = np.asarray(feature_img, dtype=np.float64)
    norm = aligned_norms(f, heads)[..., None]
    a = bank.embeddings @ heads.w_f     # (M, D)
    u = bank.embeddings @ heads.b_f     # (M,)
    safe = np.where(norm > 1e-12, norm, 1.0)
    logits = (f @ a.T + u) / safe
    return np.where(norm > 1e-12, logits, 0.0)


def cosine_logits_backward(feature_img: np.ndarray, heads: SemanticHeads,
                           bank: TextBank, d_logits: np.ndarray):
    """Chain d(loss)/d(logits) back to the feature image and w_f/b_f.

    logit_m = (y . T_m)/|y| with y = w_f f + b_f, so
    d/dy = (dL @ T)/|y| - y (dL . logits)/|y|^2; everything is contracted
    through (M,D) and (D,D) matrices. Returns (d_feature_img, d_w_f, d_b_f).
    """
    f = np.asarray(feature_img, dtype=np.float64)
    d_logits = np.asarray(d_logits, dtype=np.float64)
    shape = f.shape
    flat_f = f.reshape(-1, shape[-1])
    flat_dl = d_logits.reshape(-1, d_logits.shape[-1])
    emb = bank.embeddings
    a = emb @ heads.w_f                      # (M, D)
    u = emb @ heads.b_f                      # (M,)
    gram = heads.w_f.T @ heads.w_f
    h = heads.w_f.T @ heads.b_f
    norm = aligned_norms(flat_f, heads)
    ok = norm > 1e-12
    safe = np.where(ok, norm, 1.0)
    logits = np.where(ok[:, None], (flat_f @ a.T + u) / safe[:, None], 0.0)
    s = np.where(ok, np.sum(flat_dl * logits, axis=1), 0.0)  # dL . logits
    dl_n = np.where(ok[:, None], flat_dl / safe[:, None], 0.0)
    s_n2 = s / np.where(ok, safe**2, 1.0)
    yw = flat_f @ gram + h                   # y @ w_f per pixel
    d_f = (dl_n @ a - s_n2[:, None] * yw).reshape(shape)
    # d_w_f = E^T[(dL/n)^T f] - (w_f sum(c f f^T) + b_f outer sum(c f)).
    cf = s_n2[:, None] * flat_f
    d_w_f = emb.T @ (dl_n.T @ flat_f) - (heads.w_f @ (flat_f.T @ cf)
                                         + np.outer(heads.b_f, cf.sum(axis=0)))
    d_b_f = emb.T @ dl_n.sum(axis=0) - (heads.w_f @ cf.sum(axis=0)
                                        + heads.b_f * s_n2.sum())
    return d_f, d_w_f, d_b_f


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)
