"""Building blocks of the segmentation network.

All blocks that consume a temporal feature map [N, T, F, H, W] share their
weights across the T frames and are equivariant to permutations of that axis:
the convolutions act per frame, batch-norm pools statistics over batch, time
and space together, and the self-attention mixes frames symmetrically. The
temporal mean then turns the equivariant trunk into an invariant model.
"""

import numpy as np

from . import ops
from . import tensor as ts
from .errors import ConfigError, EmptyInputError, ShapeError
from .rng import as_generator
from .tensor import Parameter, Tensor


def _init_weight(rng, shape, fan_in, dtype):
    w = rng.standard_normal(shape) / np.sqrt(fan_in)
    return Tensor(w.astype(dtype))


class Module:
    """Minimal container: child modules and parameters are discovered from
    attributes in definition order, which fixes parameter naming."""

    def _attrs(self):
        for name, value in vars(self).items():
            if not name.startswith("_"):
                yield name, value

    def named_parameters(self, prefix=""):
        for name, value in self._attrs():
            full = f"{prefix}{name}" if prefix else name
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix=""):
        for name, value in self._attrs():
            full = f"{prefix}{name}" if prefix else name
            if isinstance(value, ops.BatchNormState):
                yield full + ".running_mean", value.running_mean
                yield full + ".running_var", value.running_var
                yield full + ".batches", value.batches
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")

    def _submodules(self):
        for _, value in self._attrs():
            if isinstance(value, Module):
                yield value

    def train(self):
        self._set_mode(True)
        return self

    def eval(self):
        self._set_mode(False)
        return self

    def _set_mode(self, training):
        self._training = training
        for m in self._submodules():
            m._set_mode(training)

    @property
    def training(self):
        return getattr(self, "_training", True)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules):
        self._items = list(modules)
        for i, m in enumerate(self._items):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]


class Conv2d(Module):
    def __init__(self, cin, cout, k, stride=1, pad=0, rng=None, dtype=np.float32):
        rng = as_generator(rng if rng is not None else 0)
        self.weight = Parameter(_init_weight(rng, (cout, cin, k, k), cin * k * k, dtype))
        self.bias = Parameter(Tensor(np.zeros(cout, dtype=dtype)))
        self._stride = stride
        self._pad = pad

    def forward(self, x):
        return ops.conv2d(x, self.weight.tensor, self.bias.tensor, self._stride, self._pad)


class Linear(Module):
    def __init__(self, fin, fout, rng=None, dtype=np.float32, bias=True):
        rng = as_generator(rng if rng is not None else 0)
        self.weight = Parameter(_init_weight(rng, (fin, fout), fin, dtype))
        if bias:
            self.bias = Parameter(Tensor(np.zeros(fout, dtype=dtype)))
        self._has_bias = bias

    def forward(self, x):
        y = ts.matmul(x, self.weight.tensor)
        if self._has_bias:
            y = ts.add(y, self.bias.tensor)
        return y


class BatchNorm(Module):
    """Batch normalization over [N,C,H,W] or (temporally shared) [N,T,C,H,W]."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = Parameter(Tensor(np.ones(channels, dtype=dtype)))
        self.beta = Parameter(Tensor(np.zeros(channels, dtype=dtype)))
        self.stats = ops.BatchNormState(channels, dtype=dtype)
        self._momentum = momentum
        self._eps = eps

    def forward(self, x):
        mode = "train" if self.training else "eval"
        return ops.batch_norm(x, self.gamma.tensor, self.beta.tensor, self.stats, mode, self._momentum, self._eps)


def _check_feature_map(x, channels):
    if x.ndim != 5:
        raise ShapeError(f"expected [N,T,F,H,W], got {x.shape}")
    if x.shape[1] < 1:
        raise EmptyInputError("temporal feature map with zero frames")
    if x.shape[2] != channels:
        raise ShapeError(f"feature channels {x.shape[2]} do not match block width {channels}")


def _merge_time(x):
    n, t, c, h, w = x.shape
    return ts.reshape(x, (n * t, c, h, w))


def _split_time(x, n, t):
    _, c, h, w = x.shape
    return ts.reshape(x, (n, t, c, h, w))


def _to_sites(x):
    """[N,T,F,H,W] -> [N*H*W, T, F] so attention runs per spatial location."""
    n, t, f, h, w = x.shape
    return ts.reshape(ts.transpose(x, (0, 3, 4, 1, 2)), (n * h * w, t, f))


def _from_sites(x, n, t, f, h, w):
    return ts.transpose(ts.reshape(x, (n, h, w, t, f)), (0, 3, 4, 1, 2))


class TemporalSelfAttention(Module):
    """Single-head scaled dot-product attention across frames, per pixel."""

    def __init__(self, channels, rng=None, dtype=np.float32):
        rng = as_generator(rng if rng is not None else 0)
        self.wq = Linear(channels, channels, rng=rng, dtype=dtype, bias=False)
        self.wk = Linear(channels, channels, rng=rng, dtype=dtype, bias=False)
        self.wv = Linear(channels, channels, rng=rng, dtype=dtype, bias=False)

    def forward(self, x):
        n, t, f, h, w = x.shape
        sites = _to_sites(x)
        att = ops.temporal_attention(self.wq(sites), self.wk(sites), self.wv(sites))
        return _from_sites(ts.add(sites, att), n, t, f, h, w)


class TemporalConvUnit(Module):
    """Temporally shared conv + batch-norm + leaky ReLU + residual temporal
    self-attention: the elementary equivariant feature extractor."""

    def __init__(self, channels, leaky_slope=0.2, rng=None, dtype=np.float32):
        rng = as_generator(rng if rng is not None else 0)
        self.conv = Conv2d(channels, channels, 3, pad=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm(channels, dtype=dtype)
        self.attn = TemporalSelfAttention(channels, rng=rng, dtype=dtype)
        self._channels = channels
        self._slope = leaky_slope

    def forward(self, x):
        _check_feature_map(x, self._channels)
        n, t = x.shape[:2]
        h = _split_time(self.conv(_merge_time(x)), n, t)
        h = ts.leaky_relu(self.bn(h), self._slope)
        return self.attn(h)


class FeatureAttentionBlock(Module):
    """Two conv units followed by a channel-attention gate (global spatial
    pool, shared bottleneck, sigmoid) and an outer residual connection."""

    def __init__(self, channels, bottleneck, leaky_slope=0.2, rng=None, dtype=np.float32):
        if bottleneck >= channels:
            raise ConfigError(f"attention bottleneck {bottleneck} must be smaller than width {channels}")
        rng = as_generator(rng if rng is not None else 0)
        self.unit1 = TemporalConvUnit(channels, leaky_slope, rng=rng, dtype=dtype)
        self.unit2 = TemporalConvUnit(channels, leaky_slope, rng=rng, dtype=dtype)
        self.squeeze = Linear(channels, bottleneck, rng=rng, dtype=dtype)
        self.excite = Linear(bottleneck, channels, rng=rng, dtype=dtype)
        self._channels = channels

    def gate(self, h):
        pooled = ts.spatial_mean(h)  # [N,T,F]
        return ts.sigmoid(self.excite(ts.relu(self.squeeze(pooled))))

    def forward(self, x):
        _check_feature_map(x, self._channels)
        h = self.unit2(self.unit1(x))
        g = self.gate(h)
        n, t, f = g.shape
        gated = ts.mul(h, ts.reshape(g, (n, t, f, 1, 1)))
        return ts.add(x, gated)


class RegistrationBlock(Module):
    """Predicts one K x K interpolation-like filter per frame (softmax over the
    taps) and applies it depthwise, compensating sub-pixel misregistration."""

    def __init__(self, channels, kernel=3, bottleneck=6, rng=None, dtype=np.float32):
        if kernel % 2 == 0:
            raise ConfigError(f"registration kernel must be odd, got {kernel}")
        rng = as_generator(rng if rng is not None else 0)
        self.squeeze = Linear(channels, bottleneck, rng=rng, dtype=dtype)
        self.taps = Linear(bottleneck, kernel * kernel, rng=rng, dtype=dtype)
        self._channels = channels
        self._kernel = kernel

    def filters(self, x):
        """The per-frame filters, shape [N,T,K,K]; non-negative, rows sum to 1."""
        _check_feature_map(x, self._channels)
        pooled = ts.spatial_mean(x)  # [N,T,F]
        logits = self.taps(ts.relu(self.squeeze(pooled)))
        probs = ts.softmax(logits, axis=-1)
        n, t = x.shape[:2]
        return ts.reshape(probs, (n, t, self._kernel, self._kernel))

    def forward(self, x):
        return ops.frame_depthwise_filter(x, self.filters(x))


def temporal_mean(x: Tensor) -> Tensor:
    """Mean over the frame axis of [N,T,F,H,W]; the equivariant-to-invariant hinge."""
    if x.ndim != 5:
        raise ShapeError(f"temporal_mean expects [N,T,F,H,W], got {x.shape}")
    if x.shape[1] < 1:
        raise EmptyInputError("temporal_mean over zero frames")
    return ts.mean(x, axis=1)


class UpsampleHead(Module):
    """3x3 conv expanding F -> F*r^2 followed by pixel shuffle."""

    def __init__(self, channels, upscale=4, rng=None, dtype=np.float32):
        if upscale < 1:
            raise ConfigError(f"upscale must be >= 1, got {upscale}")
        rng = as_generator(rng if rng is not None else 0)
        self.conv = Conv2d(channels, channels * upscale * upscale, 3, pad=1, rng=rng, dtype=dtype)
        self._r = upscale

    def forward(self, x):
        return ops.pixel_shuffle(self.conv(x), self._r)


_SCALE_STRIDES = (1, 2, 4, 8)


class MultiResolutionFusion(Module):
    """Segmentation head fusing four dyadic scales.

    Stage 1 branches the input with strided convs (1, 1/2, 1/4, 1/8); stage 2
    resamples every branch to every scale (strided conv down, bilinear + 1x1
    conv up); stage 3 concatenates the four versions per scale and fuses back
    to F channels; stage 4 upsamples the lower scales, concatenates everything
    and projects to one logit channel.
    """

    def __init__(self, channels, leaky_slope=0.2, rng=None, dtype=np.float32):
        rng = as_generator(rng if rng is not None else 0)
        f = channels
        self.branch = ModuleList([Conv2d(f, f, 3, stride=s, pad=1, rng=rng, dtype=dtype) for s in _SCALE_STRIDES])
        cross = []
        index = {}
        for src in range(4):
            for dst in range(4):
                if src == dst:
                    continue
                if src < dst:  # downsample path
                    stride = 2 ** (dst - src)
                    index[(src, dst)] = len(cross)
                    cross.append(Conv2d(f, f, 3, stride=stride, pad=1, rng=rng, dtype=dtype))
                else:  # upsample path: bilinear + pointwise conv
                    index[(src, dst)] = len(cross)
                    cross.append(Conv2d(f, f, 1, rng=rng, dtype=dtype))
        self.cross = ModuleList(cross)
        self.fuse = ModuleList([Conv2d(4 * f, f, 3, pad=1, rng=rng, dtype=dtype) for _ in range(4)])
        self.project = Conv2d(4 * f, 1, 1, rng=rng, dtype=dtype)
        self._index = index
        self._channels = f
        self._slope = leaky_slope

    def _resample(self, feat, src, dst, sizes):
        if src == dst:
            return feat
        conv = self.cross[self._index[(src, dst)]]
        if src < dst:
            return conv(feat)
        return conv(ops.bilinear_resample(feat, sizes[dst][0], sizes[dst][1]))

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"fusion head expects [N,F,H,W], got {x.shape}")
        if x.shape[1] != self._channels:
            raise ShapeError(f"fusion head width {self._channels} got {x.shape[1]} channels")
        h, w = x.shape[2], x.shape[3]
        if h % 8 or w % 8:
            raise ShapeError(f"fusion head needs spatial dims divisible by 8 (no padding), got {h}x{w}")
        branches = [ts.leaky_relu(b(x), self._slope) for b in self.branch]
        sizes = [(b.shape[2], b.shape[3]) for b in branches]
        fused = []
        for dst in range(4):
            versions = [self._resample(branches[src], src, dst, sizes) for src in range(4)]
            merged = self.fuse[dst](ts.concat(versions, axis=1))
            fused.append(ts.leaky_relu(merged, self._slope))
        full = [fused[0]] + [ops.bilinear_resample(f, sizes[0][0], sizes[0][1]) for f in fused[1:]]
        return self.project(ts.concat(full, axis=1))


def fusion_param_count(channels: int) -> int:
    """Closed-form parameter count of MultiResolutionFusion at a given width."""
    f = channels
    stage1 = 4 * (9 * f * f + f)
    downs = 6 * (9 * f * f + f)
    ups = 6 * (f * f + f)
    fuse = 4 * (36 * f * f + f)
    project = 4 * f + 1
    return stage1 + downs + ups + fuse + project


def plain_head_width(channels: int) -> int:
    """Hidden width that gives the plain conv head a comparable weight count."""
    return max(1, round((fusion_param_count(channels) - 1) / (9 * channels + 12)))


class PlainConvHead(Module):
    """Fusion ablation: two 3x3 convs with batch-norm and ReLU between, at full
    resolution, sized to a comparable number of weights."""

    def __init__(self, channels, rng=None, dtype=np.float32, width=None):
        rng = as_generator(rng if rng is not None else 0)
        mid = width if width is not None else plain_head_width(channels)
        self.conv1 = Conv2d(channels, mid, 3, pad=1, rng=rng, dtype=dtype)
        self.bn = BatchNorm(mid, dtype=dtype)
        self.conv2 = Conv2d(mid, 1, 3, pad=1, rng=rng, dtype=dtype)
        self._channels = channels

    def forward(self, x):
        if x.ndim != 4:
            raise ShapeError(f"plain head expects [N,F,H,W], got {x.shape}")
        if x.shape[1] != self._channels:
            raise ShapeError(f"plain head width {self._channels} got {x.shape[1]} channels")
        return self.conv2(ts.relu(self.bn(self.conv1(x))))


def count_parameters(module: Module) -> int:
    return sum(p.size for _, p in module.named_parameters())
