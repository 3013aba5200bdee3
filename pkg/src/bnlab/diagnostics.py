"""Training-dynamics instruments.

Every instrument here is read-only: it may run extra forward/backward passes
(which overwrite layer activation caches and parameter gradient buffers, both
of which training recomputes from scratch each step), but it never changes
parameter values, normalization statistics, or counters. A training run with
instruments attached therefore follows a bit-identical parameter trajectory
to one without.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, LabelError, SizeError
from .nn import Conv3x3, Network, softmax_xent
from .tensor import Array, conv2d_summand_stats

RATIO_SATURATION = 1e12


# ---------------------------------------------------------------------------
# activation moments


@dataclass(frozen=True)
class LayerMoments:
    label: str
    means: Array  # per channel
    variances: Array  # per channel

    @property
    def mean_variance(self) -> float:
        return float(self.variances.mean())

    @property
    def mean_abs_mean(self) -> float:
        return float(np.abs(self.means).mean())


@dataclass(frozen=True)
class MomentProfile:
    layers: tuple[LayerMoments, ...]

    def variance_ratio(self) -> float:
        """Last layer's mean channel variance over the first layer's."""
        first = self.layers[0].mean_variance
        last = self.layers[-1].mean_variance
        return last / first if first > 0 else np.inf


def channel_moments(acts: Array) -> tuple[Array, Array]:
    """Per-channel mean and variance of a [b, c, h, w] or [b, f] activation."""
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim == 4:
        axes = (0, 2, 3)
    elif acts.ndim == 2:
        axes = (0,)
    else:
        raise DimensionError(f"expected 2-d or 4-d activations, got {acts.shape}")
    if acts.size == 0:
        raise DimensionError("empty activation tensor")
    return acts.mean(axis=axes), acts.var(axis=axes)


def depth_moment_profile(net: Network, x: Array) -> MomentProfile:
    """Moments at the network's moment taps on one batch, in depth order.

    Each tap reads the tensor feeding a normalizer (normalized layers) or a
    ReLU (unnormalized layers), so growth with depth is visible even when a
    normalizer would wipe it out one line later. A convolution that feeds
    neither — the second convolution of an unnormalized residual block,
    which feeds the shortcut sum — has no tap of its own; the trunk it
    contributes to is read where it next meets a ReLU. Runs its own forward
    pass; no state changes.
    """
    with np.errstate(over="ignore", invalid="ignore", under="ignore"):
        net.forward(x, train=True, update_stats=False)
    rows = []
    for label, producer in net.moment_taps:
        means, variances = channel_moments(producer())
        rows.append(LayerMoments(label, means, variances))
    return MomentProfile(tuple(rows))


# ---------------------------------------------------------------------------
# loss probe along the update direction


@dataclass(frozen=True)
class LossProbeCurve:
    """Relative loss along the negative-gradient ray.

    relative[i] is loss(theta - alphas[i] * grad) / loss(theta); the entry
    for alpha = 0 is exactly 1.0 by construction. finite[i] records whether
    the probed loss evaluated to a finite number.
    """

    alphas: Array
    relative: Array
    finite: Array  # bool


def loss_step_probe(model, batch, alphas) -> LossProbeCurve:
    """Evaluate the loss along theta - alpha * grad for each alpha.

    model implements flat_params / set_flat_params / loss_on / grad_on.
    alphas must be non-negative and include 0. Parameters are restored
    bit-identically afterwards, whatever happens in between.
    """
    alphas = np.sort(np.asarray(alphas, dtype=np.float64))
    if alphas.size == 0 or alphas[0] != 0.0:
        raise ValueError("alphas must be non-negative and include 0")
    theta0 = np.array(model.flat_params(), dtype=np.float64, copy=True)
    base = float(model.loss_on(batch))
    if not np.isfinite(base) or base <= 0.0:
        raise ValueError(f"baseline loss {base} is unusable as a denominator")
    grad = np.array(model.grad_on(batch), dtype=np.float64, copy=True)
    relative = np.empty_like(alphas)
    finite = np.zeros(alphas.shape, dtype=bool)
    try:
        with np.errstate(over="ignore", invalid="ignore", under="ignore"):
            for i, a in enumerate(alphas):
                if a == 0.0:
                    relative[i] = 1.0
                    finite[i] = True
                    continue
                model.set_flat_params(theta0 - a * grad)
                val = float(model.loss_on(batch))
                relative[i] = val / base
                finite[i] = bool(np.isfinite(val))
    finally:
        model.set_flat_params(theta0)
    return LossProbeCurve(alphas=alphas, relative=relative, finite=finite)


# ---------------------------------------------------------------------------
# divergence capture


@dataclass(frozen=True)
class DivergenceEvent:
    """A parameter update that blew the minibatch loss past the threshold.

    profiles[i] holds the activation-moment profile at
    theta_pre + fractions[i] * (theta_post - theta_pre), measured on the very
    batch whose update diverged.
    """

    step: int
    pre_loss: float
    post_loss: float
    fractions: tuple[float, ...]
    profiles: tuple[MomentProfile, ...]


class DivergenceMonitor:
    """Watches post-update minibatch losses and captures the blow-up.

    Fires iff the post-update loss on the just-used minibatch exceeds the
    threshold or is non-finite. On firing, re-applies the update scaled by
    each interpolation fraction (from the saved pre-update parameters),
    records a moment profile at each, and restores the post-update state.
    """

    def __init__(self, net: Network, threshold: float = 1e3,
                 fractions=(0.0, 0.25, 0.5, 0.75, 1.0)):
        if threshold <= 0:
            raise ValueError("threshold must be positive")
        fr = tuple(float(f) for f in fractions)
        if sorted(fr) != list(fr) or fr[0] != 0.0 or fr[-1] != 1.0:
            raise ValueError("fractions must ascend from 0.0 to 1.0")
        self.net = net
        self.threshold = float(threshold)
        self.fractions = fr

    def check(self, step: int, batch, pre_params: Array, pre_loss: float,
              post_loss: float) -> DivergenceEvent | None:
        if np.isfinite(post_loss) and post_loss <= self.threshold:
            return None
        x, _ = batch
        post_params = self.net.flat_params()
        delta = post_params - pre_params
        profiles = []
        for f in self.fractions:
            self.net.set_flat_params(pre_params + f * delta)
            profiles.append(depth_moment_profile(self.net, x))
        self.net.set_flat_params(post_params)
        return DivergenceEvent(
            step=step,
            pre_loss=float(pre_loss),
            post_loss=float(post_loss),
            fractions=self.fractions,
            profiles=tuple(profiles),
        )


# ---------------------------------------------------------------------------
# gradient distribution shape


@dataclass(frozen=True)
class GradientHistogramStats:
    mean: float
    std: float
    excess_kurtosis: float  # nan when the variance underflows
    tail_ratio: float  # p99.9 of |g| over median of |g|
    max_abs: float


def gradient_histogram_stats(grads: Array) -> GradientHistogramStats:
    """Summary statistics of a gradient sample's distribution shape."""
    g = np.asarray(grads, dtype=np.float64).ravel()
    if g.size < 4:
        raise SizeError(f"need at least 4 gradient entries, got {g.size}")
    mean = float(g.mean())
    centered = g - mean
    m2 = float(np.mean(centered**2))
    if m2 < 1e-30:
        kurt = float("nan")
    else:
        kurt = float(np.mean(centered**4) / m2**2 - 3.0)
    a = np.abs(g)
    med = float(np.median(a))
    p999 = float(np.quantile(a, 0.999))
    tail = p999 / med if med > 0 else (np.inf if p999 > 0 else 1.0)
    return GradientHistogramStats(
        mean=mean,
        std=float(np.sqrt(m2)),
        excess_kurtosis=kurt,
        tail_ratio=float(tail),
        max_abs=float(a.max()),
    )


# ---------------------------------------------------------------------------
# sign coherence of kernel-gradient summands


@dataclass(frozen=True)
class CoherenceRow:
    """Cancellation profile of one convolution's kernel gradient.

    All four sums are averaged over the kernel parameters. abs_sum adds
    |summand| over batch and position; net_abs is |sum of summands| (the
    actual gradient magnitude); batch_partial first sums within each example,
    spatial_partial first sums across the batch at fixed position. ratio is
    abs_sum / net_abs, saturated at 1e12; near 1 means the summands agree in
    sign, large means they cancel.
    """

    layer: str
    abs_sum: float
    net_abs: float
    batch_partial: float
    spatial_partial: float
    ratio: float


def _saturated_ratio(a: float, b: float) -> float:
    if a == 0.0:
        return 1.0
    if b <= a / RATIO_SATURATION:
        return RATIO_SATURATION
    return min(a / b, RATIO_SATURATION)


def sign_coherence(net: Network, x: Array, labels: Array) -> list[CoherenceRow]:
    """Per-convolution summand-cancellation rows on one batch.

    Runs one forward/backward (without touching normalization state) and
    reduces each convolution's kernel-gradient summands.
    """
    net.loss_and_grad(x, labels, update_stats=False)
    rows = []
    for label, layer in net.taps:
        if not isinstance(layer, Conv3x3):
            continue
        s = conv2d_summand_stats(layer.last_upstream, layer.last_in)
        a = float(s.abs_sum.mean())
        b = float(np.abs(s.total).mean())
        rows.append(
            CoherenceRow(
                layer=label,
                abs_sum=a,
                net_abs=b,
                batch_partial=float(s.batch_partial.mean()),
                spatial_partial=float(s.spatial_partial.mean()),
                ratio=_saturated_ratio(a, b),
            )
        )
    return rows


def channel_grad_matrix(kernel_grad: Array) -> Array:
    """Channel-to-channel gradient magnitudes of one convolution.

    Entry [i, o] sums |kernel_grad[o, i, :, :]| over the 3x3 offsets: how
    strongly input channel i drives output channel o's filter update.
    """
    kernel_grad = np.asarray(kernel_grad, dtype=np.float64)
    if kernel_grad.ndim != 4:
        raise DimensionError(f"expected [c_out, c_in, kh, kw], got {kernel_grad.shape}")
    return np.abs(kernel_grad).sum(axis=(2, 3)).T


# ---------------------------------------------------------------------------
# class-resolved gradients at the logits


@dataclass(frozen=True)
class ClassGradHeatmap:
    """Per-example loss gradients at the logits.

    matrix[b, j] = d(loss of example b) / d(logit j) = softmax - onehot.
    Each row sums to zero and has exactly one negative entry, at the true
    label. dominant_fraction is the share of examples whose largest entry
    falls in the modal column: near 1 means one class's logit dominates the
    gradient for almost every example.
    """

    matrix: Array
    labels: Array
    modal_column: int
    dominant_fraction: float


def class_grad_heatmap(net: Network, x: Array, labels: Array) -> ClassGradHeatmap:
    logits = net.forward(x, train=True, update_stats=False)
    return heatmap_from_logits(logits, labels)


def heatmap_from_logits(logits: Array, labels: Array) -> ClassGradHeatmap:
    logits = np.asarray(logits, dtype=np.float64)
    b, k = logits.shape
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= k:
        raise LabelError(f"labels must lie in [0, {k})")
    z = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    matrix = p.copy()
    matrix[np.arange(b), labels] -= 1.0
    tops = np.argmax(matrix, axis=1)
    counts = np.bincount(tops, minlength=k)
    modal = int(np.argmax(counts))
    return ClassGradHeatmap(
        matrix=matrix,
        labels=labels.copy(),
        modal_column=modal,
        dominant_fraction=float(counts[modal] / b),
    )


@dataclass(frozen=True)
class ClasswiseGradient:
    """Parameter gradients with the logit gradient masked to one class."""

    class_index: int
    norms: dict  # param name -> l2 norm
    flat: Array


def classwise_gradient_mask(net: Network, x: Array, labels: Array,
                            class_index: int) -> ClasswiseGradient:
    """Backpropagate only class_index's column of the loss gradient.

    The columns over all classes sum to the full gradient (masking is linear),
    so this decomposes every parameter's gradient by which logit sourced it.
    """
    logits = net.forward(x, train=True, update_stats=False)
    k = logits.shape[1]
    if not 0 <= class_index < k:
        raise LabelError(f"class_index must lie in [0, {k})")
    _, full = softmax_xent(logits, labels)
    return _masked_backward(net, full, class_index)


def classwise_gradient_split(net: Network, x: Array, labels: Array) -> list[ClasswiseGradient]:
    """classwise_gradient_mask for every class off a single forward pass."""
    logits = net.forward(x, train=True, update_stats=False)
    _, full = softmax_xent(logits, labels)
    return [_masked_backward(net, full, j) for j in range(logits.shape[1])]


def _masked_backward(net: Network, full_grad: Array, j: int) -> ClasswiseGradient:
    masked = np.zeros_like(full_grad)
    masked[:, j] = full_grad[:, j]
    net.backward(masked)
    norms = {p.name: float(np.linalg.norm(p.grad)) for p in net.params()}
    return ClasswiseGradient(class_index=j, norms=norms, flat=net.flat_grads())


# ---------------------------------------------------------------------------
# activation level vs gradient magnitude, and channel bias gradients


@dataclass(frozen=True)
class MeanGradPair:
    layer: str
    in_channel: int
    out_channel: int
    input_mean: float  # mean pre-ReLU activation of the in-channel
    grad_mag: float  # mean |kernel gradient| over the 3x3 offsets


def mean_vs_grad_pairs(net: Network, x: Array, labels: Array) -> list[MeanGradPair]:
    """(incoming activation level, kernel gradient magnitude) per channel pair.

    The activation is read before the ReLU that feeds the convolution (for
    the first layer, the network input itself; for a convolution fed by a
    residual trunk, the unrectified block sum). Gradients come from one
    backward pass over the given sample.
    """
    net.loss_and_grad(x, labels, update_stats=False)
    pairs = []
    for label, conv, producer in net.mv_taps:
        feed = producer()
        means = feed.mean(axis=(0, 2, 3))
        mags = np.abs(conv.kernel.grad).mean(axis=(2, 3))  # [c_out, c_in]
        c_out, c_in = mags.shape
        for ci in range(c_in):
            for co in range(c_out):
                pairs.append(
                    MeanGradPair(
                        layer=label,
                        in_channel=ci,
                        out_channel=co,
                        input_mean=float(means[ci]),
                        grad_mag=float(mags[co, ci]),
                    )
                )
    return pairs


@dataclass(frozen=True)
class ChannelGradient:
    layer: str
    channel: int
    value: float  # |sum over batch and positions of the upstream gradient|


def channel_gradients(net: Network, x: Array, labels: Array) -> list[ChannelGradient]:
    """Bias-equivalent gradient magnitude per convolution output channel.

    The gradient of the loss with respect to a per-channel bias added to the
    convolution output is the upstream gradient summed over batch and
    positions; its magnitude is reported per channel.
    """
    net.loss_and_grad(x, labels, update_stats=False)
    rows = []
    for label, layer in net.taps:
        if not isinstance(layer, Conv3x3):
            continue
        sums = layer.last_upstream.sum(axis=(0, 2, 3))
        for c, v in enumerate(sums):
            rows.append(ChannelGradient(layer=label, channel=c, value=float(abs(v))))
    return rows
