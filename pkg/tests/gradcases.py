"""Finite-difference gradient cases shared by the unit and acceptance suites.

Each case builds a random point from a seed and returns ``(f, x0)`` where
``f`` maps a flat parameter vector to a scalar :class:`Tensor`.
"""

import numpy as np

from lookaround import factorization as fz
from lookaround.completion import PointMlpParams, batch_loss_delta, batch_loss_pcl, occupancy_targets, point_mlp_apply
from lookaround.depth import batch_depth_nll
from lookaround.learn import autodiff as ad
from lookaround.learn import lie
from lookaround.learn.nn import ParamStore
from lookaround.learn.train import TrainConfig, depth_forward, init_stage1, vp_forward


def _pose_inputs(rng, n):
    """Axis-angle and translation predictions for ``n`` pairs plus observed relative poses."""
    w = rng.standard_normal((2, n, 3))
    w *= rng.uniform(0.2, 2.5, (2, n, 1)) / np.linalg.norm(w, axis=-1, keepdims=True)
    t = rng.standard_normal((2, n, 3)) * 2
    obs_w = rng.standard_normal((n, 3))
    q_obs = lie.exp_quat(ad.Tensor(obs_w)).data
    t_obs = rng.standard_normal((n, 3)) * 2
    return np.concatenate([w.ravel(), t.ravel()]), q_obs, t_obs


def _unpack_pose(x, n):
    w = ad.reshape(x[: 6 * n], (2, n, 3))
    t = ad.reshape(x[6 * n: 12 * n], (2, n, 3))
    q = lie.exp_quat(w)
    return q[0], t[0], q[1], t[1]


def case_rotation_loss(seed, n=4):
    rng = np.random.default_rng(seed)
    x0, q_obs, t_obs = _pose_inputs(rng, n)

    def f(x):
        l_r, _ = fz.batch_losses(*_unpack_pose(x, n), q_obs, t_obs, False)
        return ad.tsum(l_r)

    return f, x0


def case_translation_loss(seed, n=4):
    rng = np.random.default_rng(seed)
    x0, q_obs, t_obs = _pose_inputs(rng, n)
    norm = np.arange(n) % 2 == 0

    def f(x):
        _, l_t = fz.batch_losses(*_unpack_pose(x, n), q_obs, t_obs, norm)
        return ad.tsum(l_t)

    return f, x0


def case_gaussian_nll(seed, n=4):
    rng = np.random.default_rng(seed)
    x0, q_obs, t_obs = _pose_inputs(rng, n)
    x0 = np.concatenate([x0, rng.uniform(-1, 1, 2 * n)])

    def f(x):
        l_r, l_t = fz.batch_losses(*_unpack_pose(x, n), q_obs, t_obs, False)
        s = fz.sigma_from_raw(x[12 * n:])
        _, big_t = fz.batch_nll(l_r, l_t, s[:n], s[n:])
        return ad.tsum(big_t)

    return f, x0


def case_laplace_nll(seed, n=4):
    rng = np.random.default_rng(seed)
    x0, q_obs, t_obs = _pose_inputs(rng, n)
    x0 = np.concatenate([x0, rng.uniform(-1, 1, 2 * n)])

    def f(x):
        l_r, l_t = fz.batch_losses(*_unpack_pose(x, n), q_obs, t_obs, True)
        s = fz.sigma_from_raw(x[12 * n:])
        big_r, _ = fz.batch_nll(l_r, l_t, s[:n], s[n:])
        return ad.tsum(big_r)

    return f, x0


def case_depth_nll(seed, b=2, p=12):
    rng = np.random.default_rng(seed)
    gt = rng.uniform(1, 3, (b, p))
    valid = rng.uniform(size=(b, p)) < 0.8
    inv_lam = rng.uniform(0.5, 2, (b, 1))
    x0 = np.concatenate([rng.uniform(1, 3, b * p), rng.uniform(-1, 1, b * p)])

    def f(x):
        mean = ad.reshape(x[: b * p], (b, p))
        sigma = ad.reshape(ad.softplus(x[b * p:]), (b, p))
        return ad.tsum(batch_depth_nll(mean, sigma, np.where(valid, gt, 0.0), valid, inv_lam))

    return f, x0


def case_pcl_loss(seed, m=8, n=30):
    rng = np.random.default_rng(seed)
    gt = rng.standard_normal((n, 3))
    x0 = rng.standard_normal(3 * m)
    return (lambda x: batch_loss_pcl(ad.reshape(x, (m, 3)), gt)), x0


def case_delta_loss(seed, m=8):
    rng = np.random.default_rng(seed)
    target = rng.dirichlet(np.ones(m))
    x0 = rng.uniform(0, 0.3, m)
    return (lambda x: batch_loss_delta(x, target)), x0


def _small_point_mlp(rng, n_support=6):
    mean = rng.standard_normal((n_support, 3))
    params = PointMlpParams.init(n_support, mean, n_desc=1, encoder=8, decoder=8, seed=rng.integers(1 << 30),
                                 sum_scale=0.1)
    for k, v in params.store.items():
        # replace the zero output weights so every path carries gradient
        params.store.params[k] = v + 0.3 * rng.standard_normal(v.shape)
    return params


def case_point_mlp(seed, n_points=10):
    rng = np.random.default_rng(seed)
    params = _small_point_mlp(rng)
    cloud = np.concatenate([rng.standard_normal((n_points, 3)), rng.uniform(0, 1, (n_points, 1))], axis=1)
    gt = rng.standard_normal((40, 3))
    names = list(params.store.params)
    shapes = [params.store[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    x0 = np.concatenate([params.store[k].ravel() for k in names])

    def f(x):
        p, off = {}, 0
        for k, s, z in zip(names, shapes, sizes):
            p[k] = ad.reshape(x[off: off + z], s)
            off += z
        pts, masses = point_mlp_apply(p, params, ad.Tensor(cloud))
        return batch_loss_pcl(pts, gt) + batch_loss_delta(masses, occupancy_targets(pts.data, gt))

    return f, x0


def case_stage1(seed, n_in=6, n_pix=5, bsz=3):
    """Full stage-1 objective through both regressors."""
    rng = np.random.default_rng(seed)
    cfg = TrainConfig(hidden=6, seed=int(seed))
    vp, dp = init_stage1(n_in, n_pix, cfg, 2.0)
    store = ParamStore({**vp.params, **dp.params})
    for k, v in store.items():
        store.params[k] = v + 0.2 * rng.standard_normal(v.shape)
    names = list(store.params)
    shapes = [store[k].shape for k in names]
    sizes = [int(np.prod(s)) for s in shapes]
    x_in = rng.standard_normal((2 * bsz, n_in))
    q_obs = lie.exp_quat(ad.Tensor(rng.standard_normal((bsz, 3)))).data
    t_obs = rng.standard_normal((bsz, 3))
    gt = rng.uniform(1, 3, (2 * bsz, n_pix))
    valid = rng.uniform(size=gt.shape) < 0.8
    x0 = np.concatenate([store[k].ravel() for k in names])

    def f(x):
        p, off = {}, 0
        for k, s, z in zip(names, shapes, sizes):
            p[k] = ad.reshape(x[off: off + z], s)
            off += z
        q, t, s_r, s_t = vp_forward(p, ad.Tensor(x_in), cfg.hidden)
        l_r, l_t = fz.batch_losses(q[:bsz], t[:bsz], q[bsz:], t[bsz:], q_obs, t_obs, np.array([True, False, True]))
        big_r, big_t = fz.batch_nll(l_r, l_t, s_r[:bsz] + s_r[bsz:], s_t[:bsz] + s_t[bsz:])
        mean, sig = depth_forward(p, ad.Tensor(x_in), cfg.hidden, n_pix)
        d = batch_depth_nll(mean, sig, np.where(valid, gt, 0.0), valid, np.ones((2 * bsz, 1)))
        return ad.mean(big_r + big_t) + ad.mean(d)

    return f, x0


CASES = {
    "rotation_loss": (case_rotation_loss, 1e-4),
    "translation_loss": (case_translation_loss, 1e-4),
    "gaussian_translation_nll": (case_gaussian_nll, 1e-4),
    "laplace_rotation_nll": (case_laplace_nll, 1e-4),
    "depth_nll": (case_depth_nll, 1e-4),
    "pcl_loss": (case_pcl_loss, 1e-4),
    "delta_loss": (case_delta_loss, 1e-4),
    "stage1_objective": (case_stage1, 1e-4),
    "point_mlp_composition": (case_point_mlp, 1e-3),
}


def relative_gradient_error(case, seed, h=1e-5) -> float:
    """``|g_analytic - g_numeric| / max(|g_numeric|, 1e-8)`` in the Euclidean norm."""
    f, x0 = case(seed)
    value, grads = ad.grad(lambda p: f(p["x"]), {"x": x0})
    numeric = ad.numeric_grad(lambda x: float(f(ad.Tensor(x)).data), x0, h)
    return float(np.linalg.norm(grads["x"] - numeric) / max(np.linalg.norm(numeric), 1e-8))
