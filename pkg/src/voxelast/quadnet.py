"""Neural quadrature generation for partially filled voxels.

A small fully connected network maps the 8 corner SDF values of a cell to
offsets/multipliers for the Gauss-Legendre points and weights of a chosen
order.  Inputs are normalized so the field gradient at the cell center is
unit; outputs are remapped as y = y_GL + tanh(.), w = w_GL * exp(.), which
keeps weights strictly positive.  Training minimizes the moment mismatch
against brute-force integrals plus containment and weight-ratio penalties.

Everything here (forward pass, reverse-mode gradients, AdamW loop, input
Jacobians) is explicit numpy so the rule derivatives used by the adjoint
are exact and dependency-free.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import hexa
from .io import atomic_write_bytes
from .quadrature import QuadratureRule, TestBasis, gauss_legendre_rule, ground_truth_batch

N_INPUTS = 8
DEPTH = 5
_WIDTHS = {2: 64, 4: 128}
_MAGIC = b"VXQNET01"
_GRAD_GUARD = 1e-8


class TrainingDiverged(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, iteration, breakdown):
        super().__init__(f"non-finite loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.breakdown = breakdown


@dataclass
class QuadNetParams:
    """Weights/biases of the quadrature MLP plus its order metadata."""

    order: int
    weights: list  # DEPTH matrices, each (fan_in, fan_out)
    biases: list

    def __post_init__(self):
        if len(self.weights) != DEPTH or len(self.biases) != DEPTH:
            raise ValueError(f"expected {DEPTH} layers")

    @property
    def width(self):
        return self.weights[0].shape[1]

    @property
    def n_points(self):
        return (self.order // 2 + 1) ** 3

    def copy(self):
        return QuadNetParams(self.order, [w.copy() for w in self.weights], [b.copy() for b in self.biases])


@dataclass
class TrainConfig:
    """Training hyperparameters.

    Desk-scale defaults; the full-scale recipe uses dataset_size=2**24,
    batch_size=2**18, iterations=64000, oracle_res=32 and gamma_cond=1e-5
    (order 2) or 1e-6 (order 4).  Training data are standard-normal corner
    values; held-out test cells use the same distribution while validation
    elsewhere draws uniform cells.
    """

    order: int = 2
    dataset_size: int = 2**18
    batch_size: int = 2**12
    iterations: int = 8000
    learning_rate: float = 1e-3
    lr_final: float = 1e-5
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-4
    gamma_box: float = 10.0
    gamma_cond: float = 1e-5
    oracle_res: int = 16
    test_size: int = 2**10
    test_oracle_res: int = 32
    eval_every: int = 250
    seed: int = 0
    input_distribution: str = "normal"

    def __post_init__(self):
        if self.batch_size > self.dataset_size:
            raise ValueError("batch_size must not exceed dataset_size")
        if self.gamma_box < 0 or self.gamma_cond < 0:
            raise ValueError("penalty scales must be >= 0")


@dataclass
class LossBreakdown:
    fit: float  # squared moment mismatch
    box: float  # containment penalty (points outside the unit cube)
    cond: float  # log max/min weight ratio
    total: float

    def as_tuple(self):
        return (self.fit, self.box, self.cond, self.total)


def init_params(order, rng=None):
    """Fan-in-scaled uniform hidden layers; zero final layer.

    With a zero final layer the untrained network emits exactly the
    Gauss-Legendre rule.
    """
    if order not in _WIDTHS:
        raise ValueError(f"unsupported order {order}")
    rng = np.random.default_rng(rng)
    w_mlp = _WIDTHS[order]
    n_out = 4 * (order // 2 + 1) ** 3
    sizes = [N_INPUTS] + [w_mlp] * (DEPTH - 1) + [n_out]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    weights[-1][:] = 0.0
    return QuadNetParams(order, weights, biases)


def normalize_inputs(corner_phi):
    """Scale cells to unit center gradient, then shift one-sided cells.

    Cells whose normalized values are all > 1 are shifted so the minimum is
    1; all < -1 so the maximum is -1.  Both the test and the shift use the
    normalized values.
    """
    phi = np.atleast_2d(np.asarray(corner_phi, dtype=np.float64))
    g = phi @ hexa.CENTER_GRAD  # (B, 3)
    scale = np.linalg.norm(g, axis=1) + _GRAD_GUARD
    out = phi / scale[:, None]
    mn = out.min(axis=1)
    mx = out.max(axis=1)
    pos = mn > 1.0
    out[pos] -= (mn[pos] - 1.0)[:, None]
    neg = mx < -1.0
    out[neg] -= (mx[neg] + 1.0)[:, None]
    return out


def _mlp_forward(params, x, want_cache=False):
    acts = [x]
    pre = []
    for layer in range(DEPTH):
        z = acts[-1] @ params.weights[layer] + params.biases[layer]
        if layer < DEPTH - 1:
            pre.append(z)
            acts.append(np.maximum(z, 0.0))
        else:
            acts.append(z)
    if want_cache:
        return acts[-1], (acts, pre)
    return acts[-1]


def _remap(params, raw):
    base = gauss_legendre_rule(params.order)
    x = raw.reshape(raw.shape[0], params.n_points, 4)
    t = np.tanh(x[..., :3])
    points = base.points + t
    weights = base.weights * np.exp(x[..., 3])
    return points, weights, t


def forward(params, corner_phi):
    """Infer rules for a batch of cells -> (points (B,n_Q,3), weights (B,n_Q))."""
    phi = np.atleast_2d(np.asarray(corner_phi, dtype=np.float64))
    raw = _mlp_forward(params, normalize_inputs(phi))
    points, weights, _ = _remap(params, raw)
    return points, weights


def rule_for_cell(params, corner_phi):
    """Single-cell convenience wrapper returning a QuadratureRule."""
    points, weights = forward(params, np.asarray(corner_phi)[None, :])
    return QuadratureRule(points[0], weights[0], meta={"source": "neural"})


def quadnet_loss(points, weights, gt, basis, gamma_box=10.0, gamma_cond=1e-5):
    """Batch-mean loss: fit + gamma_box * box + gamma_cond * cond."""
    vals = basis.values(points)  # (B, n_Q, n_P)
    moments = np.einsum("bq,bql->bl", weights, vals)
    fit = np.sum((moments - gt) ** 2, axis=1)
    excess = points - np.clip(points, 0.0, 1.0)
    box = np.sqrt(np.sum(excess**2, axis=(1, 2)))
    cond = np.log(weights.max(axis=1)) - np.log(weights.min(axis=1))
    fit_m, box_m, cond_m = fit.mean(), box.mean(), cond.mean()
    return LossBreakdown(fit_m, box_m, cond_m, fit_m + gamma_box * box_m + gamma_cond * cond_m)


def _loss_and_rule_grads(points, weights, gt, basis, gamma_box, gamma_cond):
    """Loss plus dL/d(points), dL/d(weights) for the batch-mean loss.

    Works on the separable 1D Lagrange factors; the (B, n_Q, n_P) basis
    tensor is never materialized.
    """
    nb = weights.shape[0]
    n = basis.n_1d
    (vx, vy, vz), (dx, dy, dz) = basis.values_1d_all(points)
    # moments_ijk = sum_q w_q Lx_i Ly_j Lz_k, flattened x-fastest
    wq = weights[..., None] * vx
    moments = np.einsum("bqi,bqj,bqk->bijk", wq, vy, vz, optimize=True)
    mismatch = moments.transpose(0, 3, 2, 1).reshape(nb, -1) - gt
    fit = np.sum(mismatch**2, axis=1)
    excess = points - np.clip(points, 0.0, 1.0)
    box = np.sqrt(np.sum(excess**2, axis=(1, 2)))
    qmax = weights.argmax(axis=1)
    qmin = weights.argmin(axis=1)
    rows = np.arange(nb)
    cond = np.log(weights[rows, qmax]) - np.log(weights[rows, qmin])
    breakdown = LossBreakdown(
        fit.mean(), box.mean(), cond.mean(),
        fit.mean() + gamma_box * box.mean() + gamma_cond * cond.mean(),
    )

    err = mismatch.reshape(nb, n, n, n).transpose(0, 3, 2, 1)  # back to ijk
    d_w = (2.0 / nb) * np.einsum("bijk,bqi,bqj,bqk->bq", err, vx, vy, vz, optimize=True)
    # axis contractions for the point gradient
    gx = np.einsum("bijk,bqi,bqj,bqk->bq", err, dx, vy, vz, optimize=True)
    gy = np.einsum("bijk,bqi,bqj,bqk->bq", err, vx, dy, vz, optimize=True)
    gz = np.einsum("bijk,bqi,bqj,bqk->bq", err, vx, vy, dz, optimize=True)
    d_y = np.stack([gx, gy, gz], axis=-1) * (2.0 / nb) * weights[..., None]
    safe = np.maximum(box, 1e-30)
    d_y += (gamma_box / nb) * excess / safe[:, None, None]
    d_w[rows, qmax] += gamma_cond / (nb * weights[rows, qmax])
    d_w[rows, qmin] -= gamma_cond / (nb * weights[rows, qmin])
    return breakdown, d_y, d_w


def loss_and_param_grad(params, normalized_phi, gt, basis, gamma_box, gamma_cond):
    """Loss and exact gradients with respect to every MLP weight and bias.

    The per-cell normalization scale is data, not a parameter, so gradients
    flow through the normalized values only.
    """
    raw, (acts, pre) = _mlp_forward(params, normalized_phi, want_cache=True)
    points, weights, t = _remap(params, raw)
    breakdown, d_y, d_w = _loss_and_rule_grads(points, weights, gt, basis, gamma_box, gamma_cond)

    d_x = np.empty_like(raw.reshape(points.shape[0], params.n_points, 4))
    d_x[..., :3] = d_y * (1.0 - t**2)
    d_x[..., 3] = d_w * weights
    delta = d_x.reshape(raw.shape)

    grad_w = [None] * DEPTH
    grad_b = [None] * DEPTH
    for layer in reversed(range(DEPTH)):
        grad_w[layer] = acts[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ params.weights[layer].T) * (pre[layer - 1] > 0.0)
    return breakdown, grad_w, grad_b


def backward(params, corner_phi, gt, basis, gamma_box=10.0, gamma_cond=1e-5):
    """Gradient of the total loss with respect to all parameters."""
    normalized = normalize_inputs(corner_phi)
    _, grad_w, grad_b = loss_and_param_grad(params, normalized, gt, basis, gamma_box, gamma_cond)
    return grad_w, grad_b


def _normalize_jacobian(phi):
    """d(normalized)/d(raw) for a batch -> (B, 8, 8), full chain with branches."""
    phi = np.atleast_2d(np.asarray(phi, dtype=np.float64))
    nb = phi.shape[0]
    g = phi @ hexa.CENTER_GRAD
    gnorm = np.linalg.norm(g, axis=1)
    scale = gnorm + _GRAD_GUARD
    base = phi / scale[:, None]
    # d scale / d phi_j = (G @ g_hat)_j; zero where the gradient vanishes
    safe = np.where(gnorm > 1e-300, gnorm, 1.0)
    dscale = (hexa.CENTER_GRAD @ (g / safe[:, None]).T).T
    dscale[gnorm <= 1e-300] = 0.0
    jac = np.eye(N_INPUTS)[None, :, :] / scale[:, None, None]
    jac -= base[:, :, None] * dscale[:, None, :] / scale[:, None, None]
    mn_idx = base.argmin(axis=1)
    mx_idx = base.argmax(axis=1)
    rows = np.arange(nb)
    pos = base[rows, mn_idx] > 1.0
    neg = base[rows, mx_idx] < -1.0
    jac[pos] -= jac[pos, mn_idx[pos], None, :]
    jac[neg] -= jac[neg, mx_idx[neg], None, :]
    return jac


def rule_jacobian_wrt_sdf(params, corner_phi):
    """Exact derivatives of points and weights w.r.t. the 8 raw SDF values.

    Unlike the training-time treatment, the normalization layer's full
    dependence on the inputs (scale and shift branches) is differentiated.
    Returns (d_points (B,n_Q,3,8), d_weights (B,n_Q,8)); single cells are
    accepted and returned with B=1 squeezed away.
    """
    phi = np.asarray(corner_phi, dtype=np.float64)
    single = phi.ndim == 1
    phi = np.atleast_2d(phi)
    tangent = _normalize_jacobian(phi)  # (B, 8in, 8phi) seeded as d(normalized)/d(phi)
    x = normalize_inputs(phi)
    for layer in range(DEPTH):
        z = x @ params.weights[layer] + params.biases[layer]
        tangent = np.einsum("bij,io->boj", tangent, params.weights[layer])
        if layer < DEPTH - 1:
            tangent *= (z > 0.0)[:, :, None]
            x = np.maximum(z, 0.0)
        else:
            x = z
    raw = x.reshape(phi.shape[0], params.n_points, 4)
    tangent = tangent.reshape(phi.shape[0], params.n_points, 4, N_INPUTS)
    t = np.tanh(raw[..., :3])
    base = gauss_legendre_rule(params.order)
    d_points = (1.0 - t**2)[..., None] * tangent[:, :, :3, :]
    w = base.weights[None, :] * np.exp(raw[..., 3])
    d_weights = w[..., None] * tangent[:, :, 3, :]
    if single:
        return d_points[0], d_weights[0]
    return d_points, d_weights


def _adamw_step(params, grads_w, grads_b, state, lr, betas, weight_decay, eps=1e-8):
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for kind, grads in (("w", grads_w), ("b", grads_b)):
        tensors = params.weights if kind == "w" else params.biases
        for i, g in enumerate(grads):
            m = state[f"m_{kind}{i}"]
            v = state[f"v_{kind}{i}"]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1**t)
            vhat = v / (1 - b2**t)
            tensors[i] -= lr * (mhat / (np.sqrt(vhat) + eps) + weight_decay * tensors[i])


def _sample_cells(rng, n, distribution):
    if distribution == "normal":
        return rng.standard_normal((n, N_INPUTS))
    if distribution == "uniform":
        return rng.uniform(-1.0, 1.0, size=(n, N_INPUTS))
    raise ValueError(f"unknown input distribution {distribution!r}")


def train(config, progress=None):
    """Train a quadrature network; returns (best params, metric trace rows).

    Trace rows are (iteration, train_total, train_fit, train_box,
    train_cond, test_fit, test_cond_median), emitted every eval_every
    iterations.  The returned parameters are the best-by-test-fit snapshot.
    """
    rng = np.random.default_rng(config.seed)
    basis = TestBasis(config.order)
    data = _sample_cells(rng, config.dataset_size, config.input_distribution)
    gt = ground_truth_batch(data, basis, config.oracle_res)
    normalized = normalize_inputs(data)
    test_cells = _sample_cells(rng, config.test_size, config.input_distribution)
    test_gt = ground_truth_batch(test_cells, basis, config.test_oracle_res)
    test_norm = normalize_inputs(test_cells)

    params = init_params(config.order, rng)
    state = {"t": 0}
    for kind, tensors in (("w", params.weights), ("b", params.biases)):
        for i, tns in enumerate(tensors):
            state[f"m_{kind}{i}"] = np.zeros_like(tns)
            state[f"v_{kind}{i}"] = np.zeros_like(tns)

    def evaluate():
        raw = _mlp_forward(params, test_norm)
        pts, wts, _ = _remap(params, raw)
        bd = quadnet_loss(pts, wts, test_gt, basis, config.gamma_box, config.gamma_cond)
        cond = np.log(wts.max(axis=1)) - np.log(wts.min(axis=1))
        return bd.fit, float(np.median(np.exp(cond)))

    best = params.copy()
    best_fit = np.inf
    trace = []
    for it in range(config.iterations + 1):
        frac = it / max(1, config.iterations)
        lr = config.lr_final + 0.5 * (config.learning_rate - config.lr_final) * (
            1.0 + np.cos(np.pi * frac)
        )
        idx = rng.integers(0, config.dataset_size, size=config.batch_size)
        breakdown, grad_w, grad_b = loss_and_param_grad(
            params, normalized[idx], gt[idx], basis, config.gamma_box, config.gamma_cond
        )
        if not np.isfinite(breakdown.total):
            raise TrainingDiverged(it, breakdown)
        if it % config.eval_every == 0 or it == config.iterations:
            test_fit, test_cond = evaluate()
            trace.append((it, breakdown.total, breakdown.fit, breakdown.box, breakdown.cond, test_fit, test_cond))
            if test_fit < best_fit:
                best_fit = test_fit
                best = params.copy()
            if progress is not None:
                progress(trace[-1])
        if it < config.iterations:
            _adamw_step(params, grad_w, grad_b, state, lr, config.betas, config.weight_decay)
    return best, trace


def save_params(params, path):
    """Versioned little-endian binary dump; round-trips bit-exactly."""
    chunks = [_MAGIC, struct.pack("<3i", params.order, DEPTH, params.width)]
    for w, b in zip(params.weights, params.biases):
        chunks.append(struct.pack("<2i", *w.shape))
        chunks.append(w.astype("<f8").tobytes())
        chunks.append(b.astype("<f8").tobytes())
    atomic_write_bytes(path, b"".join(chunks))


def load_params(path, expected_order=None):
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _MAGIC:
        raise ValueError("bad parameter file: magic/version mismatch")
    order, depth, width = struct.unpack("<3i", data[8:20])
    if depth != DEPTH:
        raise ValueError(f"bad parameter file: depth {depth}")
    if expected_order is not None and order != expected_order:
        raise ValueError(f"parameter file has order {order}, expected {expected_order}")
    off = 20
    weights, biases = [], []
    for _ in range(DEPTH):
        if off + 8 > len(data):
            raise ValueError("bad parameter file: truncated header")
        fan_in, fan_out = struct.unpack("<2i", data[off : off + 8])
        off += 8
        nw, nb_ = fan_in * fan_out * 8, fan_out * 8
        if off + nw + nb_ > len(data):
            raise ValueError("bad parameter file: truncated payload")
        weights.append(np.frombuffer(data[off : off + nw], dtype="<f8").reshape(fan_in, fan_out).copy())
        off += nw
        biases.append(np.frombuffer(data[off : off + nb_], dtype="<f8").copy())
        off += nb_
    if off != len(data):
        raise ValueError("bad parameter file: trailing bytes")
    params = QuadNetParams(order, weights, biases)
    if params.width != width or weights[0].shape[0] != N_INPUTS:
        raise ValueError("bad parameter file: shape mismatch")
    return params
