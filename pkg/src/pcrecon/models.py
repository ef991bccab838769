"""The three networks: point-cloud encoder, point-cloud decoder, image encoder.

The point-cloud encoder is a per-point shared MLP (equivalent to 1x1
convolutions) pooled by a column-wise max, so its output is invariant to
point order; `encode_points` additionally sorts input rows into a canonical
order, which makes that invariance bit-exact. The image encoder is a strided
conv stack over 128x128 depth renders with either a deterministic latent
head (width k) or a probabilistic head (width 2k split into mu and a
softplus-rectified sigma).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .geometry import VIEW_RESOLUTION, PointCloud, RenderedView

LATENT_DIM = 512
DECODER_POINTS = 2048
ENCODER_WIDTHS = (64, 128, 128, 256, 512)
DECODER_HIDDEN = (256, 256)
IMAGE_CHANNELS = (32, 32, 64, 64, 64, 128, 128, 128, 256, 256, 256, 512)
IMAGE_STRIDES = (2, 1, 2, 1, 1, 2, 1, 1, 2, 1, 1, 2)
IMAGE_KERNELS = (3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 3, 5)
_IMAGE_FLAT = 4 * 4 * IMAGE_CHANNELS[-1]


@dataclass(eq=False)
class LatentCode:
    vector: np.ndarray

    def __post_init__(self):
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.ndim != 1:
            raise ValueError(f"LatentCode: expected 1-d vector, got {self.vector.shape}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("LatentCode: non-finite entries")


@dataclass(eq=False)
class GaussianLatent:
    """Per-dimension mean and (non-negative) standard deviation."""
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape or self.mu.ndim != 1:
            raise ValueError("GaussianLatent: mu and sigma must be equal-length vectors")
        if np.any(self.sigma < 0):
            raise ValueError("GaussianLatent: sigma must be non-negative")


def _training(mode: str) -> bool:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    return mode == "train"


def _he(rng, fan_in, shape):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


@dataclass(eq=False)
class DenseLayer:
    weight: ad.Tensor
    bias: ad.Tensor

    @classmethod
    def init(cls, rng, fan_in, fan_out):
        return cls(ad.Tensor(_he(rng, fan_in, (fan_in, fan_out)), requires_grad=True),
                   ad.Tensor(np.zeros(fan_out), requires_grad=True))

    def tensors(self):
        return [self.weight, self.bias]


@dataclass(eq=False)
class ConvLayer:
    kernel: ad.Tensor
    bias: ad.Tensor

    @classmethod
    def init(cls, rng, k, cin, cout):
        return cls(ad.Tensor(_he(rng, k * k * cin, (k, k, cin, cout)), requires_grad=True),
                   ad.Tensor(np.zeros(cout), requires_grad=True))

    def tensors(self):
        return [self.kernel, self.bias]


@dataclass(eq=False)
class NormLayer:
    gamma: ad.Tensor
    beta: ad.Tensor
    state: ad.BatchNormState

    @classmethod
    def init(cls, dim):
        return cls(ad.Tensor(np.ones(dim), requires_grad=True),
                   ad.Tensor(np.zeros(dim), requires_grad=True),
                   ad.BatchNormState.for_dim(dim))

    def tensors(self):
        return [self.gamma, self.beta]

    def apply(self, graph, rows, training):
        return ad.batch_norm(graph, rows, self.gamma, self.beta, self.state, training)


def _named(prefix, dense_or_conv, norm):
    out = []
    if isinstance(dense_or_conv, ConvLayer):
        out.append((f"{prefix}.kernel", dense_or_conv.kernel.data))
    else:
        out.append((f"{prefix}.weight", dense_or_conv.weight.data))
    out.append((f"{prefix}.bias", dense_or_conv.bias.data))
    if norm is not None:
        out += [(f"{prefix}.gamma", norm.gamma.data),
                (f"{prefix}.beta", norm.beta.data),
                (f"{prefix}.running_mean", norm.state.running_mean),
                (f"{prefix}.running_var", norm.state.running_var)]
    return out


# ---------------------------------------------------------------------------
# point-cloud encoder

@dataclass(eq=False)
class PointCloudEncoderParams:
    layers: list  # (DenseLayer, NormLayer) pairs, applied per point

    @classmethod
    def init(cls, seed, widths=ENCODER_WIDTHS, in_dim=3):
        rng = np.random.default_rng(seed)
        layers = []
        prev = in_dim
        for w in widths:
            layers.append((DenseLayer.init(rng, prev, w), NormLayer.init(w)))
            prev = w
        return cls(layers)

    @property
    def latent_dim(self):
        return self.layers[-1][0].weight.data.shape[1]

    def tensors(self):
        return [t for dense, norm in self.layers for t in dense.tensors() + norm.tensors()]

    def named_arrays(self):
        out = []
        for i, (dense, norm) in enumerate(self.layers):
            out += _named(f"pe.l{i}", dense, norm)
        return out

    def layer_param_counts(self):
        """Trainable parameters per layer (weight + bias + gamma + beta)."""
        return [sum(t.data.size for t in dense.tensors() + norm.tensors())
                for dense, norm in self.layers]


def _layer_indices(blocks: dict, pattern: str) -> list[int]:
    idx = []
    for name in blocks:
        if name.startswith(pattern):
            rest = name[len(pattern):]
            idx.append(int(rest.split(".")[0]))
    if not idx:
        raise ValueError(f"no parameter blocks matching {pattern!r}*")
    return sorted(set(idx))


def _dense_from(blocks, prefix):
    return DenseLayer(ad.Tensor(blocks[f"{prefix}.weight"], requires_grad=True),
                      ad.Tensor(blocks[f"{prefix}.bias"], requires_grad=True))


def _norm_from(blocks, prefix):
    state = ad.BatchNormState(np.array(blocks[f"{prefix}.running_mean"], dtype=np.float64),
                              np.array(blocks[f"{prefix}.running_var"], dtype=np.float64))
    return NormLayer(ad.Tensor(blocks[f"{prefix}.gamma"], requires_grad=True),
                     ad.Tensor(blocks[f"{prefix}.beta"], requires_grad=True), state)


def encoder_from_arrays(blocks: dict) -> PointCloudEncoderParams:
    layers = [( _dense_from(blocks, f"pe.l{i}"), _norm_from(blocks, f"pe.l{i}"))
              for i in _layer_indices(blocks, "pe.l")]
    return PointCloudEncoderParams(layers)


def decoder_from_arrays(blocks: dict) -> DecoderParams:
    hidden = [(_dense_from(blocks, f"dec.l{i}"), _norm_from(blocks, f"dec.l{i}"))
              for i in _layer_indices(blocks, "dec.l")]
    output = _dense_from(blocks, "dec.out")
    return DecoderParams(hidden, output, output.bias.data.size // 3)


def image_encoder_from_arrays(blocks: dict) -> ImageEncoderParams:
    use_bn = "img.c0.gamma" in blocks
    convs = []
    for i in _layer_indices(blocks, "img.c"):
        conv = ConvLayer(ad.Tensor(blocks[f"img.c{i}.kernel"], requires_grad=True),
                         ad.Tensor(blocks[f"img.c{i}.bias"], requires_grad=True))
        convs.append((conv, _norm_from(blocks, f"img.c{i}") if use_bn else None))
    channels = tuple(conv.kernel.data.shape[3] for conv, _n in convs)
    if channels != IMAGE_CHANNELS:
        raise ValueError(f"image encoder blocks have channels {channels}, "
                         f"expected {IMAGE_CHANNELS}")
    head = _dense_from(blocks, "img.head")
    probabilistic = head.weight.data.shape[1] == 2 * LATENT_DIM
    return ImageEncoderParams(convs, head, probabilistic, use_bn)


def point_features(graph, params: PointCloudEncoderParams, rows: ad.Tensor,
                   training: bool) -> ad.Tensor:
    """Shared per-point MLP over an (R,3) row tensor -> (R,k) features."""
    x = rows
    for dense, norm in params.layers:
        x = ad.linear(graph, x, dense.weight, dense.bias)
        x = norm.apply(graph, x, training)
        x = ad.relu(graph, x)
    return x


def encode_points_t(graph, params, rows: ad.Tensor, points_per_cloud: int,
                    training: bool) -> ad.Tensor:
    """Batched encoder on stacked rows [B*N,3] -> latent codes [B,k]."""
    feats = point_features(graph, params, rows, training)
    return ad.maxpool_rows(graph, feats, points_per_cloud)


def encode_points(params: PointCloudEncoderParams, cloud: PointCloud,
                  mode: str = "eval") -> LatentCode:
    """Encode one cloud to its latent code.

    Rows are lexicographically sorted first; the encoder is order-free, and
    the canonical order makes permutation invariance exact to the bit.
    """
    training = _training(mode)
    pts = cloud.points
    if training and len(pts) < 2:
        raise ValueError("encode_points: train mode needs at least 2 points")
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    rows = ad.Tensor(pts[order])
    feats = point_features(None, params, rows, training)
    z = ad.maxpool_over_points(None, feats)
    return LatentCode(z.data)


# ---------------------------------------------------------------------------
# point-cloud decoder

@dataclass(eq=False)
class DecoderParams:
    hidden: list            # (DenseLayer, NormLayer) pairs
    output: DenseLayer
    n_points: int

    @classmethod
    def init(cls, seed, latent_dim=LATENT_DIM, hidden=DECODER_HIDDEN,
             n_points=DECODER_POINTS):
        rng = np.random.default_rng(seed)
        layers = []
        prev = latent_dim
        for w in hidden:
            layers.append((DenseLayer.init(rng, prev, w), NormLayer.init(w)))
            prev = w
        return cls(layers, DenseLayer.init(rng, prev, n_points * 3), n_points)

    def tensors(self):
        out = [t for dense, norm in self.hidden for t in dense.tensors() + norm.tensors()]
        return out + self.output.tensors()

    def named_arrays(self):
        out = []
        for i, (dense, norm) in enumerate(self.hidden):
            out += _named(f"dec.l{i}", dense, norm)
        return out + _named("dec.out", self.output, None)


def decode_t(graph, params: DecoderParams, z: ad.Tensor, training: bool) -> ad.Tensor:
    """Latent codes [B,k] -> flat clouds [B, n_points*3]."""
    x = z
    for dense, norm in params.hidden:
        x = ad.linear(graph, x, dense.weight, dense.bias)
        x = norm.apply(graph, x, training)
        x = ad.relu(graph, x)
    return ad.linear(graph, x, params.output.weight, params.output.bias)


def decode(params: DecoderParams, z: LatentCode, mode: str = "eval") -> PointCloud:
    training = _training(mode)
    if training:
        raise ValueError("decode: single-code decoding runs in eval mode only "
                         "(train-mode batch norm needs a batch)")
    zt = ad.Tensor(z.vector[None, :])
    flat = decode_t(None, params, zt, training=False)
    return PointCloud(flat.data.reshape(params.n_points, 3))


# ---------------------------------------------------------------------------
# image encoder

@dataclass(eq=False)
class ImageEncoderParams:
    convs: list              # (ConvLayer, NormLayer | None) pairs
    head: DenseLayer
    probabilistic: bool
    use_batch_norm: bool

    @classmethod
    def init(cls, seed, probabilistic=False, use_batch_norm=True,
             latent_dim=LATENT_DIM):
        rng = np.random.default_rng(seed)
        convs = []
        prev = 1
        for k, c in zip(IMAGE_KERNELS, IMAGE_CHANNELS):
            conv = ConvLayer.init(rng, k, prev, c)
            convs.append((conv, NormLayer.init(c) if use_batch_norm else None))
            prev = c
        head_out = 2 * latent_dim if probabilistic else latent_dim
        return cls(convs, DenseLayer.init(rng, _IMAGE_FLAT, head_out),
                   probabilistic, use_batch_norm)

    @property
    def latent_dim(self):
        out = self.head.weight.data.shape[1]
        return out // 2 if self.probabilistic else out

    def tensors(self):
        out = []
        for conv, norm in self.convs:
            out += conv.tensors()
            if norm is not None:
                out += norm.tensors()
        return out + self.head.tensors()

    def named_arrays(self):
        out = []
        for i, (conv, norm) in enumerate(self.convs):
            out += _named(f"img.c{i}", conv, norm)
        return out + _named("img.head", self.head, None)


def image_head_t(graph, params: ImageEncoderParams, images: ad.Tensor,
                 training: bool) -> ad.Tensor:
    """Conv trunk plus linear head on [B,128,128,1] -> [B, k or 2k]."""
    if images.data.ndim != 4 or images.data.shape[1:] != (VIEW_RESOLUTION, VIEW_RESOLUTION, 1):
        raise ValueError(f"image_head_t: expected [B,{VIEW_RESOLUTION},{VIEW_RESOLUTION},1], "
                         f"got {images.shape}")
    x = images
    for (conv, norm), stride in zip(params.convs, IMAGE_STRIDES):
        x = ad.conv2d(graph, x, conv.kernel, stride=stride)
        b, h, w, c = x.data.shape
        rows = ad.reshape(graph, x, (b * h * w, c))
        rows = ad.add_row_bias(graph, rows, conv.bias)
        if norm is not None:
            rows = norm.apply(graph, rows, training)
        rows = ad.relu(graph, rows)
        x = ad.reshape(graph, rows, (b, h, w, c))
    flat = ad.reshape(graph, x, (x.data.shape[0], _IMAGE_FLAT))
    return ad.linear(graph, flat, params.head.weight, params.head.bias)


def split_gaussian_t(graph, head_out: ad.Tensor, latent_dim: int):
    """Split a [B,2k] head into (mu [B,k], sigma [B,k]) with softplus sigma."""
    mu = ad.slice_cols(graph, head_out, 0, latent_dim)
    sigma = ad.softplus(graph, ad.slice_cols(graph, head_out, latent_dim, 2 * latent_dim))
    return mu, sigma


def _image_tensor(image: RenderedView) -> ad.Tensor:
    return ad.Tensor(image.pixels[None, :, :, None])


def encode_image_deterministic(params: ImageEncoderParams, image: RenderedView,
                               mode: str = "eval") -> LatentCode:
    if params.probabilistic:
        raise ValueError("encode_image_deterministic: params carry a probabilistic head")
    out = image_head_t(None, params, _image_tensor(image), _training(mode))
    return LatentCode(out.data[0])


def encode_image_probabilistic(params: ImageEncoderParams, image: RenderedView,
                               mode: str = "eval") -> GaussianLatent:
    if not params.probabilistic:
        raise ValueError("encode_image_probabilistic: params carry a deterministic head")
    out = image_head_t(None, params, _image_tensor(image), _training(mode))
    mu, sigma = split_gaussian_t(None, out, params.latent_dim)
    return GaussianLatent(mu.data[0], sigma.data[0])


def reparameterize(g: GaussianLatent, epsilon: np.ndarray) -> LatentCode:
    """z = mu + epsilon * sigma, elementwise; epsilon is treated as constant."""
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != g.mu.shape:
        raise ValueError(f"reparameterize: epsilon shape {epsilon.shape} != mu {g.mu.shape}")
    return LatentCode(g.mu + epsilon * g.sigma)


def reparameterize_t(graph, mu: ad.Tensor, sigma: ad.Tensor,
                     epsilon: np.ndarray) -> ad.Tensor:
    epsilon = np.asarray(epsilon, dtype=np.float64)
    if epsilon.shape != mu.data.shape:
        raise ValueError(f"reparameterize_t: epsilon shape {epsilon.shape} != mu {mu.shape}")
    return ad.add(graph, mu, ad.mul(graph, ad.Tensor(epsilon), sigma))
