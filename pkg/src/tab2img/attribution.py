"""Per-sample attribution: coalition SHAP, DeepLIFT-style image SHAP,
pixel rearrangement, distribution discrepancies, and the dual-alignment
optimization that reconciles tabular-side and image-side evidence.

The dual fit works on two signed ratio vectors,

    P = S * phi_tab / X_recon      (length N)
    Q = T * phi_img / I_recon      (784, reduced to N)

where S and T are reparameterized Gaussian samples whose moments come
from two small MLP heads; the heads are trained to minimize
MSE(P,Q) + KLD(P,Q) + MMD^2(P,Q). The final P is the importance vector.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .errors import ConfigError, ShapeError, TrainingDiverged, UsageError
from .nn import AdamW, Conv2d, Linear
from .tensor import Tensor, no_grad

# ---------------------------------------------------------------------------
# kernel SHAP over tabular inputs


def _shapley_kernel_weight(n: int, s: int) -> float:
    return (n - 1.0) / (math.comb(n, s) * s * (n - s))


def _coalition_values(f, x, background, masks):
    """v(S) = mean over background rows of f(x on S, background off S)."""
    b, n = background.shape
    k = masks.shape[0]
    tiled = np.repeat(masks, b, axis=0)                       # (k*b, n)
    rows = np.where(tiled.astype(bool), x[None, :], np.tile(background, (k, 1)))
    return f(rows).reshape(k, b).mean(axis=1)


def kernel_shap(f, x: np.ndarray, background: np.ndarray,
                n_coalitions: int = 2048, exact_limit: int = 12,
                seed: int = 0) -> np.ndarray:
    """Shapley values via the kernel-weighted least-squares formulation.

    Parameters
    ----------
    f : callable
        Batched model output, (k, N) -> (k,). Must be deterministic.
    x : (N,) array
        Instance to explain.
    background : (B, N) array
        Reference rows; masked-out features take background values and
        coalition payoffs average over the B rows.
    n_coalitions : int
        Mask budget when N is too large for exact enumeration.
    exact_limit : int
        Up to this many features all 2^N coalitions are enumerated, which
        reproduces exact Shapley values.

    The efficiency property sum(phi) = f(x) - mean_b f(b) holds exactly:
    the last coefficient is eliminated through that constraint.
    """
    x = np.asarray(x, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if background.ndim != 2 or background.shape[0] == 0:
        raise ConfigError("kernel_shap needs at least one background row")
    if background.shape[1] != x.shape[0]:
        raise ShapeError(f"background width {background.shape[1]} != {x.shape[0]}")
    n = x.shape[0]

    v0 = float(np.mean(f(background)))
    v_full = float(np.mean(f(x[None, :])))
    delta = v_full - v0
    if n == 1:
        return np.array([delta])

    if n <= exact_limit:
        codes = np.arange(1, 2 ** n - 1)
        masks = ((codes[:, None] >> np.arange(n)) & 1).astype(np.float64)
        weights = np.array([_shapley_kernel_weight(n, int(s))
                            for s in masks.sum(axis=1)])
    else:
        masks, weights = _sampled_masks(n, n_coalitions, seed)

    values = _coalition_values(f, x, background, masks)

    # eliminate phi[n-1] via the efficiency constraint
    z = masks[:, :-1] - masks[:, -1:]
    y = (values - v0) - masks[:, -1] * delta
    sw = np.sqrt(weights)
    beta, *_ = np.linalg.lstsq(z * sw[:, None], y * sw, rcond=None)
    phi = np.empty(n)
    phi[:-1] = beta
    phi[-1] = delta - beta.sum()
    return phi


def _sampled_masks(n: int, budget: int, seed: int):
    """Size-stratified coalition sample.

    Coalition sizes whose full enumeration fits their share of the budget
    are enumerated with exact kernel weights; the rest of the budget is
    spent on masks drawn from the leftover kernel mass, each carrying an
    equal share of that mass.
    """
    rng = np.random.default_rng(seed)
    size_mass = np.array([(n - 1.0) / (s * (n - s)) for s in range(1, n)])

    masks, weights = [], []
    remaining = budget
    enumerated = np.zeros(n - 1, dtype=bool)
    for s in sorted(range(1, n), key=lambda s: min(s, n - s)):
        count = math.comb(n, s)
        share = size_mass[s - 1] / size_mass.sum() * budget
        if count <= max(share, 2 * n) and count <= remaining:
            for combo in itertools.combinations(range(n), s):
                m = np.zeros(n)
                m[list(combo)] = 1.0
                masks.append(m)
                weights.append(_shapley_kernel_weight(n, s))
            remaining -= count
            enumerated[s - 1] = True

    leftover = size_mass[~enumerated].sum()
    if leftover > 0 and remaining > 0:
        p = np.where(enumerated, 0.0, size_mass)
        p /= p.sum()
        sizes = rng.choice(np.arange(1, n), size=remaining, p=p)
        per_mask_weight = leftover / remaining
        for s in sizes:
            members = rng.choice(n, size=int(s), replace=False)
            m = np.zeros(n)
            m[members] = 1.0
            masks.append(m)
            weights.append(per_mask_weight)
    return np.array(masks), np.array(weights)


# ---------------------------------------------------------------------------
# DeepLIFT-style attribution through the CNN head


class ActRelu:
    pass


class ActSigmoid:
    pass


class Pool2x2:
    pass


class Flatten:
    pass


def cnn_stack(model, with_activations: bool = True):
    """Ordered replayable layer list of the classifier head (dropout off).

    The explained score is the pre-softmax logit of the chosen class, so
    summation-to-delta has a well-defined target.
    """
    if with_activations:
        return [model.conv1, ActRelu(), Pool2x2(), model.conv2, ActRelu(),
                Pool2x2(), Flatten(), model.fc7, ActRelu(), model.fc8]
    return [model.conv1, Pool2x2(), model.conv2, Pool2x2(), Flatten(),
            model.fc7, model.fc8]


def stack_forward(stack, x: np.ndarray) -> list[np.ndarray]:
    """All intermediate values [input, after layer 0, ...]."""
    acts = [x.astype(np.float64)]
    for layer in stack:
        a = acts[-1]
        if isinstance(layer, Conv2d):
            acts.append(nn.conv2d_forward(a, layer.kernels.data.astype(np.float64),
                                          layer.bias.data.astype(np.float64),
                                          layer.padding))
        elif isinstance(layer, Linear):
            acts.append(a @ layer.weight.data.astype(np.float64)
                        + layer.bias.data.astype(np.float64))
        elif isinstance(layer, ActRelu):
            acts.append(np.maximum(a, 0.0))
        elif isinstance(layer, ActSigmoid):
            acts.append(1.0 / (1.0 + np.exp(-a)))
        elif isinstance(layer, Pool2x2):
            acts.append(nn.maxpool2d_forward(a))
        elif isinstance(layer, Flatten):
            acts.append(a.reshape(a.shape[0], -1))
        else:
            raise UsageError(f"unsupported layer {type(layer).__name__}")
    return acts


def stack_logit(stack, x: np.ndarray, class_index: int) -> np.ndarray:
    return stack_forward(stack, x)[-1][:, class_index]


def _rescale_multiplier(m, x_in, x_out, ref_in, ref_out, grad_mid, eps=1e-6):
    delta_in = x_in - ref_in
    delta_out = x_out - ref_out
    safe = np.abs(delta_in) > eps
    ratio = np.where(safe, delta_out / np.where(safe, delta_in, 1.0), grad_mid)
    return m * ratio


def _pool_multiplier(m_out, x_in, ref_in, eps=1e-12):
    """Route each window's output delta to one input position.

    The explained input's argmax receives the multiplier; when its delta
    against the reference vanishes the reference argmax takes over (if
    both vanish the output delta is zero and nothing needs routing).
    """
    b = ref_in.shape[0]
    xw = nn._pool_views(np.broadcast_to(x_in, ref_in.shape))   # (B,C,h,w,4)
    rw = nn._pool_views(ref_in)
    jx = np.broadcast_to(xw.argmax(axis=-1, keepdims=True), rw.shape[:-1] + (1,))
    jr = rw.argmax(axis=-1, keepdims=True)

    delta_out = np.take_along_axis(xw, jx, -1) - rw.max(axis=-1, keepdims=True)
    delta_at_jx = np.take_along_axis(xw - rw, jx, -1)
    use_ref = np.abs(delta_at_jx) <= eps
    j = np.where(use_ref, jr, jx)
    delta_in = np.take_along_axis(xw - rw, j, -1)
    safe = np.abs(delta_in) > eps
    mult = np.where(safe, delta_out / np.where(safe, delta_in, 1.0), 0.0)

    m_in = np.zeros_like(rw)
    np.put_along_axis(m_in, j, mult * m_out[..., None], -1)
    bb, c, h2, w2, _ = m_in.shape
    return (m_in.reshape(bb, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            .reshape(bb, c, h2 * 2, w2 * 2))


def deep_shap(stack, image: np.ndarray, backgrounds: np.ndarray,
              class_index: int) -> np.ndarray:
    """Mean DeepLIFT (rescale rule) attribution over background references.

    Linear layers propagate multipliers through their adjoint, elementwise
    activations use the rescale rule, and max pooling routes each window's
    delta to a single input position, so the attributions satisfy
    sum(phi) = logit(image) - mean_b logit(background).
    """
    if backgrounds.ndim == 3:
        backgrounds = backgrounds[:, None]
    if image.ndim == 2:
        image = image[None, None]
    if backgrounds.shape[0] == 0:
        raise ConfigError("deep_shap needs at least one background image")
    b = backgrounds.shape[0]

    x_acts = stack_forward(stack, image)
    r_acts = stack_forward(stack, backgrounds)

    n_out = x_acts[-1].shape[1]
    m = np.zeros((b, n_out))
    m[:, class_index] = 1.0

    for i in range(len(stack) - 1, -1, -1):
        layer = stack[i]
        x_in, x_out = x_acts[i], x_acts[i + 1]
        r_in, r_out = r_acts[i], r_acts[i + 1]
        if isinstance(layer, Linear):
            m = m @ layer.weight.data.astype(np.float64).T
        elif isinstance(layer, Conv2d):
            m = nn.conv2d_input_grad(m, layer.kernels.data.astype(np.float64),
                                     (b,) + r_in.shape[1:], layer.padding)
        elif isinstance(layer, Flatten):
            m = m.reshape((b,) + r_in.shape[1:])
        elif isinstance(layer, ActRelu):
            grad_mid = ((x_in + r_in) * 0.5 > 0).astype(np.float64)
            m = _rescale_multiplier(m, x_in, x_out, r_in, r_out, grad_mid)
        elif isinstance(layer, ActSigmoid):
            mid = 1.0 / (1.0 + np.exp(-(x_in + r_in) * 0.5))
            m = _rescale_multiplier(m, x_in, x_out, r_in, r_out, mid * (1 - mid))
        elif isinstance(layer, Pool2x2):
            m = _pool_multiplier(m, x_in, r_in)

    phi = (m * (image - backgrounds)).mean(axis=0)
    return phi[0]


# ---------------------------------------------------------------------------
# pixel rearrangement and length matching


def pixel_unshuffle(t: np.ndarray, r: int) -> np.ndarray:
    """(..., C, H, W) -> (..., C*r^2, H/r, W/r), lossless."""
    *lead, c, h, w = t.shape
    if h % r or w % r:
        raise ShapeError(f"spatial dims {h}x{w} not divisible by {r}")
    v = t.reshape(*lead, c, h // r, r, w // r, r)
    k = len(lead)
    v = v.transpose(*range(k), k, k + 2, k + 4, k + 1, k + 3)
    return v.reshape(*lead, c * r * r, h // r, w // r)


def pixel_shuffle(t: np.ndarray, r: int) -> np.ndarray:
    """(..., C*r^2, H, W) -> (..., C, H*r, W*r), inverse of pixel_unshuffle."""
    *lead, cr2, h, w = t.shape
    if cr2 % (r * r):
        raise ShapeError(f"{cr2} channels not divisible by r^2 = {r * r}")
    c = cr2 // (r * r)
    k = len(lead)
    v = t.reshape(*lead, c, r, r, h, w)
    v = v.transpose(*range(k), k, k + 3, k + 1, k + 4, k + 2)
    return v.reshape(*lead, c, h * r, w * r)


def _pool_stage_matrix(h: int, w: int) -> np.ndarray:
    """Linear map of one unshuffle(r=2)+channel-mean stage on flat pixels."""
    h2, w2 = h // 2, w // 2
    m = np.zeros((h2 * w2, h * w))
    for i in range(h2):
        for j in range(w2):
            for dy in range(2):
                for dx in range(2):
                    m[i * w2 + j, (2 * i + dy) * w + (2 * j + dx)] = 0.25
    return m


def _interval_matrix(n_out: int, length: int) -> np.ndarray:
    """Contiguous interval averages of width length/n_out.

    Boundary elements are weighted by fractional overlap so every input
    element carries total weight exactly 1 across rows; that makes the
    reduction preserve the global mean for any n_out.
    """
    g = np.zeros((n_out, length))
    width = length / n_out
    for i in range(n_out):
        lo, hi = i * width, (i + 1) * width
        j0, j1 = int(np.floor(lo)), int(np.ceil(hi))
        for j in range(j0, min(j1, length)):
            overlap = min(hi, j + 1) - max(lo, j)
            if overlap > 0:
                g[i, j] = overlap / width
    return g


def match_length_matrix(n_out: int, h: int = 28, w: int = 28) -> np.ndarray:
    """(n_out, h*w) reduction used to align Q with the feature count."""
    if not 1 <= n_out <= h * w:
        raise ConfigError(f"target length {n_out} outside [1, {h * w}]")
    m = np.eye(h * w)
    while h % 2 == 0 and w % 2 == 0 and (h // 2) * (w // 2) >= n_out:
        m = _pool_stage_matrix(h, w) @ m
        h //= 2
        w //= 2
    return _interval_matrix(n_out, h * w) @ m


def match_length(q: np.ndarray, n_out: int) -> np.ndarray:
    """Deterministic mean-preserving reduction of a 2-d map to length n_out."""
    h, w = q.shape
    return match_length_matrix(n_out, h, w) @ q.reshape(-1)


# ---------------------------------------------------------------------------
# distribution discrepancies


@dataclass(frozen=True)
class KernelSpec:
    """RBF kernel k(x,y) = exp(-|x-y|^2 / (2 h^2)).

    ``bandwidth`` None selects the median heuristic over pooled pairwise
    distances, recomputed from detached values at every call.
    """

    bandwidth: float | None = None

    def resolve(self, a: np.ndarray, b: np.ndarray) -> float:
        if self.bandwidth is not None:
            if self.bandwidth <= 0:
                raise ConfigError(f"bandwidth must be positive, got {self.bandwidth}")
            return self.bandwidth
        pooled = np.concatenate([a, b], axis=0)
        d2 = _sq_dists(pooled, pooled)
        iu = np.triu_indices(pooled.shape[0], k=1)
        if iu[0].size == 0:
            return 1.0
        med = float(np.median(np.sqrt(np.maximum(d2[iu], 0.0))))
        return med if med > 0 else 1.0


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aa = (a * a).sum(axis=1)[:, None]
    bb = (b * b).sum(axis=1)[None, :]
    return aa + bb - 2.0 * (a @ b.T)


def _sq_dists_t(a: Tensor, b: Tensor) -> Tensor:
    aa = (a * a).sum(axis=1, keepdims=True)
    bb = (b * b).sum(axis=1, keepdims=True).T
    return aa + bb - (a @ b.T) * 2.0


def mmd2(a, b, kernel: KernelSpec = KernelSpec()) -> Tensor:
    """Biased (V-statistic) squared maximum mean discrepancy.

    E[k(X,X')] + E[k(Y,Y')] - 2 E[k(X,Y)] with diagonal terms included;
    differentiable in both samples. Accepts Tensors or arrays of shape
    (rows, dim).
    """
    at = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    bt = b if isinstance(b, Tensor) else Tensor(np.asarray(b, dtype=np.float64))
    if at.ndim != 2 or bt.ndim != 2:
        raise ShapeError("mmd2 expects (rows, dim) samples")
    if at.shape[1] != bt.shape[1]:
        raise ShapeError(f"dimension mismatch: {at.shape[1]} vs {bt.shape[1]}")
    h = kernel.resolve(at.data, bt.data)
    scale = -1.0 / (2.0 * h * h)
    kxx = T.exp(_sq_dists_t(at, at) * scale).mean()
    kyy = T.exp(_sq_dists_t(bt, bt) * scale).mean()
    kxy = T.exp(_sq_dists_t(at, bt) * scale).mean()
    return kxx + kyy - kxy * 2.0


def kld(p, q) -> Tensor:
    """KL divergence after softmax normalization of both vectors.

    The inputs are signed ratio vectors, not distributions, so both are
    softmax-normalized first; the result is then always >= 0.
    """
    pt = p if isinstance(p, Tensor) else Tensor(np.asarray(p, dtype=np.float64))
    qt = q if isinstance(q, Tensor) else Tensor(np.asarray(q, dtype=np.float64))
    ps = T.softmax(pt.reshape(1, -1), axis=-1)
    qs = T.softmax(qt.reshape(1, -1), axis=-1)
    log_ratio = T.log(T.clamp_min(ps, 1e-12)) - T.log(T.clamp_min(qs, 1e-12))
    return (ps * log_ratio).sum()


# ---------------------------------------------------------------------------
# the dual-alignment fit


@dataclass
class AttributionPair:
    """Inputs to the dual fit for one explained sample."""

    phi_tab: np.ndarray            # (N,)
    phi_img: np.ndarray            # (28, 28)
    x_recon: np.ndarray            # (N,)
    i_recon: np.ndarray            # (28, 28)
    class_index: int

    def __post_init__(self):
        for name in ("phi_tab", "phi_img", "x_recon", "i_recon"):
            arr = getattr(self, name)
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} contains non-finite values")
        if self.phi_tab.shape != self.x_recon.shape:
            raise ShapeError("phi_tab and x_recon lengths disagree")
        if self.phi_img.shape != self.i_recon.shape:
            raise ShapeError("phi_img and i_recon shapes disagree")


@dataclass
class DualConfig:
    iters: int = 500
    lr: float = 1e-4
    weight_decay: float = 0.0
    warmup: int = 50
    seed: int = 0
    denom_guard: float = 1e-6
    kernel: KernelSpec = field(default_factory=KernelSpec)


@dataclass
class DualResult:
    p: np.ndarray
    q: np.ndarray
    trace: list[tuple[float, float, float]]    # (mse, kld, mmd) per iteration

    @property
    def final_mse(self) -> float:
        return self.trace[-1][0]


def _guard_denominator(d: np.ndarray, eps: float) -> np.ndarray:
    sign = np.where(d >= 0.0, 1.0, -1.0)
    return sign * np.maximum(np.abs(d), eps)


def dualshap_fit(pair: AttributionPair, config: DualConfig = DualConfig()) -> DualResult:
    """Optimize the two sampling heads until P and Q agree.

    Deterministic given (pair, config); aborts on a non-finite loss with
    the iteration index.
    """
    n = pair.phi_tab.shape[0]
    pixels = pair.phi_img.size
    rng = np.random.default_rng(config.seed)
    init_rng = np.random.default_rng((config.seed, 7))

    # 64-bit throughout: guarded denominators can make the ratio vectors
    # large enough to overflow 32-bit squared-gradient accumulators
    head1_a = Linear(2 * n, 12, init_rng)
    head1_b = Linear(12, 2 * n, init_rng)
    head2_a = Linear(2 * pixels, 128, init_rng)
    head2_b = Linear(128, 2 * pixels, init_rng)
    params = (head1_a.weight, head1_a.bias, head1_b.weight, head1_b.bias,
              head2_a.weight, head2_a.bias, head2_b.weight, head2_b.bias)
    for p in params:
        p.data = p.data.astype(np.float64)
    opt = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)

    in1 = Tensor(np.concatenate([pair.phi_tab, pair.x_recon])[None, :].astype(np.float64))
    in2 = Tensor(np.concatenate([pair.phi_img.reshape(-1),
                                 pair.i_recon.reshape(-1)])[None, :].astype(np.float64))
    tab_ratio = Tensor((pair.phi_tab
                        / _guard_denominator(pair.x_recon, config.denom_guard))[None, :])
    img_ratio = Tensor((pair.phi_img.reshape(-1)
                        / _guard_denominator(pair.i_recon.reshape(-1),
                                             config.denom_guard))[None, :])
    reduce = Tensor(match_length_matrix(n, *pair.phi_img.shape).T)

    # one reparameterization draw per fit: S and T are sampled once and
    # then reshaped by the evolving (mu, sigma) during the optimization,
    # which keeps the objective deterministic given the seed
    eps_s = Tensor(rng.standard_normal((1, n)))
    eps_t = Tensor(rng.standard_normal((1, pixels)))

    trace = []
    p_val = q_val = None
    for it in range(config.iters):
        # warmup + cosine decay keeps the late iterates from ringing, so
        # the smoothed loss trace stays non-increasing
        if it < config.warmup:
            opt.lr = config.lr * (it + 1) / config.warmup
        else:
            frac = (it - config.warmup) / max(config.iters - config.warmup, 1)
            opt.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        out1 = head1_b(T.relu(head1_a(in1)))
        mu_s, sigma_s = out1[:, :n], T.softplus(out1[:, n:])
        s = mu_s + sigma_s * eps_s
        p = s * tab_ratio

        out2 = head2_b(T.relu(head2_a(in2)))
        mu_t, sigma_t = out2[:, :pixels], T.softplus(out2[:, pixels:])
        t_sample = mu_t + sigma_t * eps_t
        q = (t_sample * img_ratio) @ reduce

        loss_mse = nn.mse(p, q)
        loss_kld = kld(p, q)
        loss_mmd = mmd2(p.reshape(n, 1), q.reshape(n, 1), config.kernel)
        loss = loss_mse + loss_kld + loss_mmd
        if not np.isfinite(loss.data):
            raise TrainingDiverged(f"non-finite dual loss at iteration {it}")

        opt.zero_grad()
        loss.backward()
        opt.step()
        trace.append((loss_mse.item(), loss_kld.item(), loss_mmd.item()))
        p_val, q_val = p.data[0].copy(), q.data[0].copy()

    return DualResult(p=p_val, q=q_val, trace=trace)


# ---------------------------------------------------------------------------
# pipeline glue: explain one sample of a trained model


@dataclass
class ExplainConfig:
    shap_background: int = 32
    n_coalitions: int = 2048
    noise_seed: int = 0
    seed: int = 0
    dual: DualConfig = field(default_factory=DualConfig)


def build_attribution_pair(model, reverse, x_row: np.ndarray,
                           background_rows: np.ndarray,
                           class_index: int | None = None,
                           config: ExplainConfig = ExplainConfig()) -> AttributionPair:
    """Collect all four attribution inputs for one tabular row.

    The noise image is frozen to config.noise_seed so the explained
    function is deterministic. Kernel SHAP explains the predicted-class
    probability of the full pipeline (configurable via class_index); the
    image side explains the matching CNN logit on the generated image.
    """
    from .model import fixed_noise

    noise = fixed_noise(config.noise_seed)
    images, probs = model.predict(x_row[None, :], noise=noise)
    c = int(np.argmax(probs[0])) if class_index is None else class_index

    def f(rows):
        return model.predict(rows, noise=noise)[1][:, c]

    rng = np.random.default_rng(config.seed)
    k = min(config.shap_background, background_rows.shape[0])
    chosen = background_rows[rng.choice(background_rows.shape[0], size=k, replace=False)]

    phi_tab = kernel_shap(f, x_row, chosen, n_coalitions=config.n_coalitions,
                          seed=config.seed)
    i_recon = images[0]
    bg_images = model.predict(chosen, noise=noise)[0]
    phi_img = deep_shap(cnn_stack(model), i_recon, bg_images, c)
    x_recon = reverse.apply(i_recon[None, :, :])[0]
    return AttributionPair(phi_tab=phi_tab, phi_img=phi_img,
                           x_recon=x_recon.astype(np.float64),
                           i_recon=i_recon.astype(np.float64), class_index=c)


def explain_sample(model, reverse, x_row: np.ndarray, background_rows: np.ndarray,
                   class_index: int | None = None,
                   config: ExplainConfig = ExplainConfig()):
    """Full per-sample attribution: pair assembly plus the dual fit."""
    pair = build_attribution_pair(model, reverse, x_row, background_rows,
                                  class_index, config)
    result = dualshap_fit(pair, config.dual)
    return pair, result


def phi_img_heatmap_bytes(phi_img: np.ndarray):
    """Map signed pixel importances to bytes, symmetric around 128.

    Returns (uint8 image, scale): byte = 128 + round(127 * phi / scale).
    """
    scale = float(np.abs(phi_img).max())
    if scale == 0.0:
        return np.full(phi_img.shape, 128, dtype=np.uint8), 0.0
    mapped = 128.0 + np.round(127.0 * phi_img / scale)
    return np.clip(mapped, 0, 255).astype(np.uint8), scale
