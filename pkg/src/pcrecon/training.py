"""Two-stage training: auto-encoder, then latent matching onto its codes.

Stage I fits the point-cloud auto-encoder with Chamfer reconstruction loss.
Stage II trains an image encoder against the frozen Stage I networks, with
three interchangeable objectives (Chamfer through the frozen decoder, L2 or
L1 in latent space), or probabilistically with the view-dependent diversity
target on sigma. Frozen networks run in eval mode, so Stage II never touches
Stage I parameters or running statistics. Whole trajectories are
reproducible bit-for-bit from the config seed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import models
from .geometry import PointCloud, RenderedView
from .metrics import chamfer_sum_t
from .models import (DecoderParams, ImageEncoderParams, LatentCode,
                     PointCloudEncoderParams, decode_t, encode_points,
                     encode_points_t, image_head_t, reparameterize_t,
                     split_gaussian_t)

STAGES = ("AE", "LM", "PROB")
LM_VARIANTS = ("chamfer", "l2", "l1")


@dataclass
class TrainConfig:
    stage: str = "AE"
    lm_variant: str = "l1"
    learning_rate: float = 5e-5
    batch_size: int = 32
    epochs: int = 1
    seed: int = 0
    lambda_div: float = 1.0
    eta: float = 1.0
    phi_o_deg: float = 180.0
    delta_deg: float = 20.0
    wrap_azimuth: bool = True     # wrap phi_i - phi_o into [-180, 180]
    shared_epsilon: bool = False  # one scalar epsilon per sample instead of per-dim

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.lm_variant not in LM_VARIANTS:
            raise ValueError(f"lm_variant must be one of {LM_VARIANTS}, got {self.lm_variant!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.delta_deg <= 0:
            raise ValueError("delta_deg must be positive")
        if self.eta < 0 or self.lambda_div < 0:
            raise ValueError("eta and lambda_div must be non-negative")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    loss_lm: float = 0.0
    loss_div: float = 0.0
    grad_norm: float = 0.0
    wall_clock: float = field(default=0.0, compare=False)


@dataclass
class TrainLog:
    stage: str
    records: list = field(default_factory=list)

    def add(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError("TrainLog: epoch indices must increase")
        if not all(np.isfinite([rec.loss, rec.loss_lm, rec.loss_div, rec.grad_norm])):
            raise ValueError("TrainLog: non-finite record values")
        self.records.append(rec)

    @property
    def final_loss(self):
        return self.records[-1].loss if self.records else float("nan")


# ---------------------------------------------------------------------------
# losses

def latent_loss(z_pred: LatentCode, z_target: LatentCode, variant: str) -> float:
    """L2 (sum of squares) or L1 (sum of absolutes) latent matching error."""
    if variant not in ("l1", "l2"):
        raise ValueError(f"latent_loss: variant must be l1 or l2, got {variant!r}")
    if z_pred.vector.shape != z_target.vector.shape:
        raise ValueError(f"latent_loss: length mismatch {z_pred.vector.shape} "
                         f"vs {z_target.vector.shape}")
    d = z_pred.vector - z_target.vector
    return float((d * d).sum()) if variant == "l2" else float(np.abs(d).sum())


def latent_loss_t(graph, z_pred: ad.Tensor, z_target: ad.Tensor, variant: str) -> ad.Tensor:
    """Differentiable latent loss on [B,k] tensors, averaged over the batch."""
    if variant not in ("l1", "l2"):
        raise ValueError(f"latent_loss_t: variant must be l1 or l2, got {variant!r}")
    if z_pred.shape != z_target.shape:
        raise ValueError(f"latent_loss_t: shape mismatch {z_pred.shape} vs {z_target.shape}")
    diff = ad.sub(graph, z_pred, z_target)
    if variant == "l2":
        per = ad.sum_all(graph, ad.mul(graph, diff, diff))
    else:
        per = ad.sum_all(graph, ad.absolute(graph, diff))
    return ad.scale(graph, per, 1.0 / z_pred.shape[0])


def azimuth_gap_deg(phi_i_deg: float, phi_o_deg: float, wrap: bool = True) -> float:
    d = phi_i_deg - phi_o_deg
    if wrap:
        d = (d + 180.0) % 360.0 - 180.0
    return d


def sigma_target(phi_i_deg: float, cfg: TrainConfig) -> float:
    """View-dependent sigma target: eta at the occluded azimuth, decaying fast."""
    gap = azimuth_gap_deg(phi_i_deg, cfg.phi_o_deg, cfg.wrap_azimuth)
    return cfg.eta * np.exp(-(gap * gap) / (cfg.delta_deg * cfg.delta_deg))


def diversity_loss(sigma: np.ndarray, phi_i_deg: float, cfg: TrainConfig) -> float:
    """Mean per-dimension squared deviation of sigma from its view target."""
    sigma = np.asarray(sigma, dtype=np.float64)
    t = sigma_target(phi_i_deg, cfg)
    return float(((sigma - t) ** 2).mean())


def diversity_loss_t(graph, sigma: ad.Tensor, phi_i_deg: np.ndarray,
                     cfg: TrainConfig) -> ad.Tensor:
    """Batched diversity loss: sigma [B,k] against per-row view targets."""
    targets = np.array([sigma_target(p, cfg) for p in np.atleast_1d(phi_i_deg)])
    t = ad.Tensor(np.broadcast_to(targets[:, None], sigma.shape).copy())
    diff = ad.sub(graph, sigma, t)
    return ad.mean_all(graph, ad.mul(graph, diff, diff))


def joint_loss(l_lm: float, l_div: float, lambda_div: float) -> float:
    return l_lm + lambda_div * l_div


# ---------------------------------------------------------------------------
# batching helpers

def _epoch_batches(rng, n, batch_size):
    order = rng.permutation(n)
    if n == 1:
        # single-sample memorization runs: batch the sample twice
        return [np.array([0, 0])]
    if n < batch_size:
        return [order]
    return [order[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def _grad_norm(tensors):
    total = 0.0
    for t in tensors:
        g = t.grad.reshape(-1)
        total += float(g @ g)
    return float(np.sqrt(total))


def _cloud_array(dataset, n_points):
    clouds = [c.points if isinstance(c, PointCloud) else np.asarray(c) for c in dataset]
    arr = np.stack(clouds).astype(np.float64)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected clouds of shape (N,3), got stacked {arr.shape}")
    if arr.shape[1] != n_points:
        raise ValueError(f"clouds must have {n_points} points, got {arr.shape[1]}")
    return arr


def _batch_chamfer(graph, flat_pred: ad.Tensor, gt: np.ndarray) -> ad.Tensor:
    """Mean over the batch of chamfer_sum(pred_i, gt_i) / N."""
    b, n3 = flat_pred.shape
    n = n3 // 3
    terms = []
    for i in range(b):
        pred = ad.reshape(graph, ad.slice_rows(graph, flat_pred, i, i + 1), (n, 3))
        terms.append(chamfer_sum_t(graph, pred, ad.Tensor(gt[i])))
    return ad.scale(graph, ad.add_n(graph, terms), 1.0 / (b * n))


def _check_loss_finite(loss, stage, epoch, batch):
    if not np.isfinite(loss.data):
        raise FloatingPointError(
            f"{stage}: non-finite loss at epoch {epoch}, batch {batch}")


# ---------------------------------------------------------------------------
# stage I

def train_autoencoder(dataset, cfg: TrainConfig,
                      n_points: int = models.DECODER_POINTS,
                      encoder: PointCloudEncoderParams | None = None,
                      decoder: DecoderParams | None = None):
    """Fit the point-cloud auto-encoder with per-batch mean Chamfer/N loss.

    Returns (encoder params, decoder params, TrainLog). Deterministic per
    cfg.seed. Custom width encoder/decoder pairs may be passed for small
    experiments; by default the full architecture is built from the seed.
    """
    clouds = _cloud_array(dataset, n_points)
    n = len(clouds)
    enc = encoder or PointCloudEncoderParams.init(cfg.seed * 7 + 1)
    dec = decoder or DecoderParams.init(cfg.seed * 7 + 2, latent_dim=enc.latent_dim,
                                        n_points=n_points)
    opt = ad.Adam(enc.tensors() + dec.tensors(), learning_rate=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(cfg.seed * 7 + 3)
    log = TrainLog("AE")

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, gnorms = [], []
        for bi, batch in enumerate(_epoch_batches(shuffle_rng, n, cfg.batch_size)):
            g = ad.Graph()
            rows = ad.Tensor(clouds[batch].reshape(-1, 3))
            z = encode_points_t(g, enc, rows, n_points, training=True)
            flat = decode_t(g, dec, z, training=True)
            loss = _batch_chamfer(g, flat, clouds[batch])
            _check_loss_finite(loss, "train_autoencoder", epoch, bi)
            opt.zero_grad()
            ad.backward(g, loss)
            gnorms.append(_grad_norm(opt.tensors))
            opt.step()
            losses.append(loss.item())
        log.add(EpochRecord(epoch, float(np.mean(losses)),
                            grad_norm=float(np.mean(gnorms)),
                            wall_clock=time.perf_counter() - t0))
    return enc, dec, log


# ---------------------------------------------------------------------------
# stage II

def _lm_targets(samples, enc):
    """Frozen-encoder latent codes, one per distinct ground-truth cloud."""
    cache: dict[int, np.ndarray] = {}
    targets = np.empty((len(samples), enc.latent_dim))
    for i, (_view, cloud) in enumerate(samples):
        key = id(cloud)
        if key not in cache:
            cache[key] = encode_points(enc, cloud, "eval").vector
        targets[i] = cache[key]
    return targets


def _stack_views(samples, batch):
    pix = np.stack([samples[i][0].pixels for i in batch])
    return ad.Tensor(pix[:, :, :, None])


def train_latent_matching(samples, encoder: PointCloudEncoderParams,
                          decoder: DecoderParams, cfg: TrainConfig,
                          image_params: ImageEncoderParams | None = None):
    """Train the image encoder against frozen Stage I networks.

    samples: sequence of (RenderedView, PointCloud) pairs. Variant l1/l2
    matches latent codes; variant chamfer matches reconstructions through the
    frozen decoder (gradients flow through it, its parameters never update).
    Returns (image encoder params, TrainLog).
    """
    samples = list(samples)
    n = len(samples)
    img = image_params or ImageEncoderParams.init(cfg.seed * 7 + 4, probabilistic=False)
    opt = ad.Adam(img.tensors(), learning_rate=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(cfg.seed * 7 + 5)
    log = TrainLog("LM")
    if cfg.lm_variant in ("l1", "l2"):
        targets = _lm_targets(samples, encoder)
    else:
        gt = _cloud_array([c for _v, c in samples], decoder.n_points)

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, gnorms = [], []
        for bi, batch in enumerate(_epoch_batches(shuffle_rng, n, cfg.batch_size)):
            g = ad.Graph()
            z_i = image_head_t(g, img, _stack_views(samples, batch), training=True)
            if cfg.lm_variant == "chamfer":
                flat = decode_t(g, decoder, z_i, training=False)
                loss = _batch_chamfer(g, flat, gt[batch])
            else:
                loss = latent_loss_t(g, z_i, ad.Tensor(targets[batch]), cfg.lm_variant)
            _check_loss_finite(loss, "train_latent_matching", epoch, bi)
            opt.zero_grad()
            ad.backward(g, loss)
            gnorms.append(_grad_norm(opt.tensors))
            opt.step()
            losses.append(loss.item())
        log.add(EpochRecord(epoch, float(np.mean(losses)),
                            loss_lm=float(np.mean(losses)),
                            grad_norm=float(np.mean(gnorms)),
                            wall_clock=time.perf_counter() - t0))
    return img, log


def train_probabilistic(samples, encoder: PointCloudEncoderParams,
                        decoder: DecoderParams, cfg: TrainConfig,
                        image_params: ImageEncoderParams | None = None):
    """Probabilistic Stage II: reparameterized latent draw plus diversity loss.

    samples: sequence of (RenderedView, PointCloud) pairs whose views carry
    their azimuth. Per step: (mu, sigma) from the image encoder, one seeded
    epsilon draw, z = mu + eps*sigma, L1 latent loss against the frozen
    encoder's code, plus lambda_div times the diversity loss on sigma.
    """
    if cfg.lm_variant == "chamfer":
        raise ValueError("train_probabilistic: latent loss must be l1 or l2")
    samples = list(samples)
    n = len(samples)
    img = image_params or ImageEncoderParams.init(cfg.seed * 7 + 6, probabilistic=True)
    if not img.probabilistic:
        raise ValueError("train_probabilistic: image params must be probabilistic")
    k = img.latent_dim
    opt = ad.Adam(img.tensors(), learning_rate=cfg.learning_rate)
    shuffle_rng = np.random.default_rng(cfg.seed * 7 + 7)
    eps_rng = np.random.default_rng(cfg.seed * 7 + 8)
    log = TrainLog("PROB")
    targets = _lm_targets(samples, encoder)
    azimuths = np.array([v.azimuth_deg for v, _c in samples])

    for epoch in range(cfg.epochs):
        t0 = time.perf_counter()
        losses, lm_losses, div_losses, gnorms = [], [], [], []
        for bi, batch in enumerate(_epoch_batches(shuffle_rng, n, cfg.batch_size)):
            g = ad.Graph()
            head = image_head_t(g, img, _stack_views(samples, batch), training=True)
            mu, sigma = split_gaussian_t(g, head, k)
            if cfg.shared_epsilon:
                eps = np.repeat(eps_rng.standard_normal((len(batch), 1)), k, axis=1)
            else:
                eps = eps_rng.standard_normal((len(batch), k))
            z = reparameterize_t(g, mu, sigma, eps)
            l_lm = latent_loss_t(g, z, ad.Tensor(targets[batch]), cfg.lm_variant)
            l_div = diversity_loss_t(g, sigma, azimuths[batch], cfg)
            loss = ad.add(g, l_lm, ad.scale(g, l_div, cfg.lambda_div))
            _check_loss_finite(loss, "train_probabilistic", epoch, bi)
            opt.zero_grad()
            ad.backward(g, loss)
            gnorms.append(_grad_norm(opt.tensors))
            opt.step()
            losses.append(loss.item())
            lm_losses.append(l_lm.item())
            div_losses.append(l_div.item())
        log.add(EpochRecord(epoch, float(np.mean(losses)),
                            loss_lm=float(np.mean(lm_losses)),
                            loss_div=float(np.mean(div_losses)),
                            grad_norm=float(np.mean(gnorms)),
                            wall_clock=time.perf_counter() - t0))
    return img, log
