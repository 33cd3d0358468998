"""Point-cloud completion with support points and occupancy masses.

A point-MLP maps a partial, globally aligned cloud to ``M`` support points
``S`` and masses ``delta``. Training pulls the support towards the ground-truth
surface (``loss_pcl``) and regresses each point's share of nearest
ground-truth points (``loss_delta``). The completed shape keeps the support
points whose predicted mass reaches ``tau``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import PointCloud
from .kernels import knn_indices, nn_argmin
from .learn import autodiff as ad
from .learn.nn import MlpSpec, ParamStore

LEAK = 0.2


def _as_points(x) -> np.ndarray:
    pts = np.asarray(getattr(x, "points", x), dtype=np.float64)
    return pts.reshape(-1, 3)


@dataclass(eq=False)
class SupportCloud:
    points: np.ndarray
    masses: np.ndarray

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        self.masses = np.asarray(self.masses, dtype=np.float64).reshape(-1)
        if self.points.shape[0] != self.masses.shape[0]:
            raise ValueError("one mass per support point required")
        if not (np.all(np.isfinite(self.masses)) and np.all(self.masses >= 0)):
            raise ValueError("masses must be finite and non-negative")

    def __len__(self):
        return self.points.shape[0]

    def cloud(self) -> PointCloud:
        return PointCloud(self.points)


def default_tau(m: int) -> float:
    """Half of the uniform mass ``1/M``."""
    return 0.5 / m


# -- targets and losses -------------------------------------------------------


def occupancy_targets(support, gt) -> np.ndarray:
    """Fraction of ground-truth points whose nearest support point is each ``s_m``.

    Ties go to the lowest support index.
    """
    s, c = _as_points(support), _as_points(gt)
    if len(s) == 0 or len(c) == 0:
        raise ValueError("support and ground truth must be non-empty")
    idx, _ = nn_argmin(c, s)
    return np.bincount(idx, minlength=len(s)) / len(c)


def loss_pcl(pred_points, gt) -> float:
    """Mean distance from each ground-truth point to its nearest support point."""
    s, c = _as_points(pred_points), _as_points(gt)
    if len(s) == 0 or len(c) == 0:
        raise ValueError("support and ground truth must be non-empty")
    _, d = nn_argmin(c, s)
    return float(d.mean())


def loss_delta(pred_masses, target_masses) -> float:
    p = np.asarray(pred_masses, dtype=np.float64).reshape(-1)
    t = np.asarray(target_masses, dtype=np.float64).reshape(-1)
    if p.shape != t.shape:
        raise ValueError("mass vectors must have equal length")
    return float(((p - t) ** 2).sum())


def batch_loss_pcl(support, gt: np.ndarray):
    """Differentiable ``loss_pcl`` for a support tensor ``(M, 3)``.

    The nearest-support assignment is piecewise constant, so it is computed on
    the current values and only the distances carry gradient.
    """
    idx, _ = nn_argmin(gt, support.data)
    return ad.mean(ad.norm(ad.getitem(support, idx) - gt, axis=-1))


def batch_loss_delta(masses, targets: np.ndarray):
    d = masses - targets
    return ad.tsum(d * d)


# -- post-processing ----------------------------------------------------------


def threshold_cloud(sc: SupportCloud, tau: float) -> PointCloud:
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return PointCloud(sc.points[sc.masses >= tau])


def laplacian_smooth(cloud: PointCloud, k_neighbors: int = 8, iterations: int = 1, step: float = 0.5) -> PointCloud:
    """Move each point ``step`` of the way towards the centroid of its k nearest neighbours."""
    pts = _as_points(cloud).copy()
    if len(pts) <= k_neighbors:
        raise ValueError(f"need more than {k_neighbors} points, got {len(pts)}")
    for _ in range(iterations):
        nbr = knn_indices(pts, k_neighbors)
        pts = pts + step * (pts[nbr].mean(axis=1) - pts)
    return PointCloud(pts, getattr(cloud, "confidence", None))


def remove_outliers(points, k_neighbors: int = 8, n_std: float = 2.0) -> np.ndarray:
    """Mask of points whose mean distance to their k nearest neighbours is
    at most ``n_std`` standard deviations above the cloud-wide mean."""
    pts = _as_points(points)
    if len(pts) <= k_neighbors:
        return np.ones(len(pts), dtype=bool)
    nbr = knn_indices(pts, k_neighbors)
    d = np.linalg.norm(pts[nbr] - pts[:, None, :], axis=-1).mean(axis=1)
    return d <= d.mean() + n_std * d.std()


def leave_out(cloud: PointCloud, m_min: int, m_max: int, seed=0, test_time: bool = False,
              return_index: bool = False):
    """Confidence-weighted subsample without replacement.

    The size is uniform in ``[m_min, min(m_max, |cloud|)]``, or the upper end
    at test time. Points with zero confidence are drawn only when nothing else
    is left. With ``return_index`` the chosen row indices are returned as well.
    """
    n = len(cloud)
    if n == 0:
        raise ValueError("cannot subsample an empty cloud")
    if m_min > m_max:
        raise ValueError("m_min must not exceed m_max")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    hi = min(m_max, n)
    size = hi if test_time else int(rng.integers(min(m_min, hi), hi + 1))
    w = np.ones(n) if cloud.confidence is None else np.asarray(cloud.confidence, dtype=np.float64)
    positive = np.flatnonzero(w > 0)
    if positive.size >= size:
        pick = rng.choice(positive, size=size, replace=False, p=w[positive] / w[positive].sum())
    else:
        zero = np.flatnonzero(w <= 0)
        pick = np.concatenate([positive, rng.permutation(zero)[: size - positive.size]])
        pick = pick[rng.permutation(pick.size)]
    sub = cloud.subset(pick)
    return (sub, pick) if return_index else sub


# -- point-MLP ----------------------------------------------------------------


@dataclass(frozen=True)
class PointMlpParams:
    """Layer layout of the completion network; weights live in ``store``."""

    store: ParamStore
    n_support: int
    n_desc: int = 0
    encoder: int = 128
    decoder: int = 256
    sum_scale: float = 1.0  # constant factor on the sum-pooled features

    @property
    def encoder_spec(self) -> MlpSpec:
        e = self.encoder
        return MlpSpec("pcl.enc", (3 + self.n_desc, e, e, e), LEAK)

    @property
    def decoder_spec(self) -> MlpSpec:
        d = self.decoder
        return MlpSpec("pcl.dec", (2 * self.encoder, d, d, 4 * self.n_support), LEAK)

    @classmethod
    def init(cls, n_support: int, mean_cloud, n_desc: int = 0, encoder: int = 128, decoder: int = 256,
             seed=0, sum_scale: float = 1.0) -> "PointMlpParams":
        """Random hidden layers; the output layer has zero weights and a bias
        holding ``mean_cloud`` with uniform masses ``1/M``.

        ``sum_scale`` is typically ``1/n`` for the usual input size ``n`` so
        the sum-pooled features stay of order one.
        """
        mean_cloud = _as_points(mean_cloud)
        if mean_cloud.shape[0] != n_support:
            raise ValueError("mean cloud must have one point per support slot")
        rng = np.random.default_rng(seed)
        store = ParamStore()
        p = cls(store, n_support, n_desc, encoder, decoder, sum_scale)
        p.encoder_spec.init(store, rng, zero_last=False)
        p.decoder_spec.init(store, rng, zero_last=True)
        last = len(p.decoder_spec.sizes) - 2
        store.params[f"pcl.dec.b{last}"] = np.concatenate(
            [mean_cloud.reshape(-1), np.full(n_support, np.log(np.expm1(1.0 / n_support)))])
        return p

    def with_store(self, store: ParamStore) -> "PointMlpParams":
        return PointMlpParams(store, self.n_support, self.n_desc, self.encoder, self.decoder, self.sum_scale)


def point_mlp_apply(p: dict, params: PointMlpParams, x):
    """Tensor forward pass on one cloud ``x`` of shape ``(N, 3 + n_desc)``."""
    h = params.encoder_spec.apply(p, x, final_activation=True)
    pooled = ad.concat([ad.tmax(h, axis=0), ad.sorted_sum(h, axis=0) * params.sum_scale], axis=-1)
    out = params.decoder_spec.apply(p, ad.reshape(pooled, (1, -1)))
    m = params.n_support
    points = ad.reshape(out[0, : 3 * m], (m, 3))
    masses = ad.softplus(out[0, 3 * m:])
    return points, masses


def point_mlp_forward(cloud: PointCloud, descriptors: Optional[np.ndarray], params: PointMlpParams) -> SupportCloud:
    pts = _as_points(cloud)
    if len(pts) == 0:
        raise ValueError("input cloud is empty")
    x = _point_features(pts, descriptors, params.n_desc)
    p = {k: ad.Tensor(v) for k, v in params.store.items()}
    points, masses = point_mlp_apply(p, params, ad.Tensor(x))
    return SupportCloud(points.data, masses.data)


def _point_features(pts: np.ndarray, descriptors, n_desc: int) -> np.ndarray:
    if n_desc == 0:
        if descriptors is not None and np.size(descriptors) > 0:
            raise ValueError("this network takes no per-point descriptors")
        return pts
    d = np.asarray(descriptors, dtype=np.float64).reshape(len(pts), -1)
    if d.shape[1] != n_desc:
        raise ValueError(f"expected {n_desc} descriptor values per point, got {d.shape[1]}")
    return np.concatenate([pts, d], axis=1)
