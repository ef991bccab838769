"""Benchmark harness: variant tables, ordering verdicts, diversity sweeps.

Evaluation is a pure function of (parameters, test set, seed). Each model
variant produces a per-category table of protocol metrics; compare_variants
checks the expected orderings (the auto-encoder bounds latent matching from
below, direct latent losses beat Chamfer-through-decoder) and the agreement
between latent-error and reconstruction-error rankings.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import PointCloud, RenderedView
from .metrics import chamfer_mean, evaluate_pair
from .models import (DecoderParams, ImageEncoderParams, LatentCode,
                     PointCloudEncoderParams, decode, encode_image_deterministic,
                     encode_image_probabilistic, encode_points, reparameterize)

VARIANT_AE = "AE"
VARIANT_LM = {"chamfer": "lm-chamfer", "l2": "lm-l2", "l1": "lm-l1"}
VARIANT_PROB = "prob"


@dataclass
class EvalSample:
    gt: PointCloud
    category: str
    shape_id: str
    view: RenderedView | None = None

    @property
    def key(self):
        az = None if self.view is None else self.view.azimuth_deg
        return (self.shape_id, az)


@dataclass
class BenchmarkRow:
    variant: str
    category: str
    chamfer_scaled: float
    emd_scaled: float
    latent_l1: float
    latent_l2: float
    count: int

    def __post_init__(self):
        for name in ("chamfer_scaled", "emd_scaled", "latent_l1", "latent_l2"):
            if getattr(self, name) < 0:
                raise ValueError(f"BenchmarkRow: negative {name}")


@dataclass
class BenchmarkTable:
    variant: str
    rows: list = field(default_factory=list)
    fingerprint: tuple = ()

    def row(self, category: str) -> BenchmarkRow:
        for r in self.rows:
            if r.category == category:
                return r
        raise KeyError(f"no row for category {category!r} in {self.variant} table")

    @property
    def overall(self) -> BenchmarkRow:
        return self.row("overall")


class AutoencoderReconstructor:
    """Reconstruction from the ground-truth cloud's own code (the upper bound)."""
    name = VARIANT_AE

    def __init__(self, encoder: PointCloudEncoderParams, decoder: DecoderParams):
        self.encoder = encoder
        self.decoder = decoder

    def reconstruct(self, sample: EvalSample):
        z = encode_points(self.encoder, sample.gt, "eval")
        return decode(self.decoder, z), z.vector


class ImageReconstructor:
    """Single-view reconstruction through the frozen decoder.

    Probabilistic heads predict with z = mu (the distribution mean) unless an
    epsilon vector is supplied.
    """

    def __init__(self, image_params: ImageEncoderParams,
                 encoder: PointCloudEncoderParams, decoder: DecoderParams,
                 name: str | None = None, epsilon: np.ndarray | None = None):
        self.image_params = image_params
        self.encoder = encoder
        self.decoder = decoder
        self.epsilon = epsilon
        self.name = name or (VARIANT_PROB if image_params.probabilistic else "lm")

    def latent(self, view: RenderedView) -> LatentCode:
        if self.image_params.probabilistic:
            g = encode_image_probabilistic(self.image_params, view, "eval")
            eps = np.zeros_like(g.mu) if self.epsilon is None else self.epsilon
            return reparameterize(g, eps)
        return encode_image_deterministic(self.image_params, view, "eval")

    def reconstruct(self, sample: EvalSample):
        if sample.view is None:
            raise ValueError("ImageReconstructor: sample carries no view")
        z = self.latent(sample.view)
        return decode(self.decoder, z), z.vector


def _sample_seed(seed: int, index: int) -> int:
    return (seed * 1_000_003 + 97 * index + 13) % (2**63)


def evaluate_model(model, samples, seed: int, apply_icp: bool = True) -> BenchmarkTable:
    """Protocol metrics for one model over a test set, per category plus overall."""
    samples = list(samples)
    if not samples:
        raise ValueError("evaluate_model: empty test set")
    z_cache: dict[str, np.ndarray] = {}
    per_cat: dict[str, list] = {}
    all_rows = []
    for i, sample in enumerate(samples):
        pred, z_img = model.reconstruct(sample)
        report = evaluate_pair(pred, sample.gt, apply_icp, _sample_seed(seed, i))
        if sample.shape_id not in z_cache:
            z_cache[sample.shape_id] = encode_points(model.encoder, sample.gt, "eval").vector
        zp = z_cache[sample.shape_id]
        d = z_img - zp
        rec = (report.chamfer_scaled, report.emd_scaled,
               float(np.abs(d).sum()), float((d * d).sum()))
        per_cat.setdefault(sample.category, []).append(rec)
        all_rows.append(rec)

    def mean_row(category, recs):
        arr = np.array(recs)
        return BenchmarkRow(model.name, category, *(float(v) for v in arr.mean(axis=0)),
                            count=len(recs))

    rows = [mean_row(cat, recs) for cat, recs in sorted(per_cat.items())]
    rows.append(mean_row("overall", all_rows))
    fingerprint = (seed, apply_icp, tuple(s.key for s in samples))
    return BenchmarkTable(model.name, rows, fingerprint)


@dataclass
class OrderingCheck:
    description: str
    lower_variant: str
    higher_variant: str
    lower_value: float
    higher_value: float
    rel_margin: float
    passed: bool


@dataclass
class VariantComparison:
    checks: list
    rank_by_latent: tuple
    rank_by_chamfer: tuple
    rank_agreement: bool
    indistinguishable: bool

    @property
    def passed(self):
        return self.indistinguishable or (all(c.passed for c in self.checks)
                                          and self.rank_agreement)


_EXPECTED_ORDERINGS = (
    ("AE bounds lm-l1", VARIANT_AE, VARIANT_LM["l1"]),
    ("AE bounds lm-l2", VARIANT_AE, VARIANT_LM["l2"]),
    ("latent l1 beats chamfer-through-decoder", VARIANT_LM["l1"], VARIANT_LM["chamfer"]),
)


def compare_variants(tables: dict, required_margin: float = 0.0) -> VariantComparison:
    """Ordering verdicts over variant tables evaluated on one test set.

    All tables must share the evaluation fingerprint (same samples, same
    seed). A check passes when the expected-higher variant exceeds the
    expected-lower one by at least required_margin (relative).
    """
    prints = {t.fingerprint for t in tables.values()}
    if len(prints) != 1:
        raise ValueError("compare_variants: tables evaluated on different test sets/seeds")
    needed = {VARIANT_AE, *VARIANT_LM.values()}
    missing = needed - set(tables)
    if missing:
        raise ValueError(f"compare_variants: missing variants {sorted(missing)}")

    chamfer = {v: tables[v].overall.chamfer_scaled for v in needed}
    latent = {v: tables[v].overall.latent_l1 for v in VARIANT_LM.values()}

    values = list(chamfer.values())
    indistinguishable = max(values) - min(values) < 1e-12

    checks = []
    for desc, lo, hi in _EXPECTED_ORDERINGS:
        lo_v, hi_v = chamfer[lo], chamfer[hi]
        margin = (hi_v - lo_v) / max(lo_v, 1e-300)
        checks.append(OrderingCheck(desc, lo, hi, lo_v, hi_v, margin,
                                    margin >= required_margin))

    lm = list(VARIANT_LM.values())
    rank_latent = tuple(sorted(lm, key=lambda v: latent[v]))
    rank_chamfer = tuple(sorted(lm, key=lambda v: chamfer[v]))
    return VariantComparison(checks, rank_latent, rank_chamfer,
                             rank_latent == rank_chamfer, indistinguishable)


# ---------------------------------------------------------------------------
# diversity

@dataclass
class DiversityRecord:
    azimuth_deg: float
    shape_id: str
    spread: float          # mean pairwise chamfer over epsilon reconstructions
    mean_sigma: float


@dataclass
class DiversityReport:
    records: list = field(default_factory=list)

    def mean_spread(self, azimuth_deg: float) -> float:
        vals = [r.spread for r in self.records if r.azimuth_deg == azimuth_deg]
        if not vals:
            raise ValueError(f"no diversity records at azimuth {azimuth_deg}")
        return float(np.mean(vals))

    def mean_sigma(self, azimuth_deg: float) -> float:
        vals = [r.mean_sigma for r in self.records if r.azimuth_deg == azimuth_deg]
        if not vals:
            raise ValueError(f"no diversity records at azimuth {azimuth_deg}")
        return float(np.mean(vals))


def diversity_sweep(image_params: ImageEncoderParams, decoder: DecoderParams,
                    views, epsilons, shape_ids=None) -> DiversityReport:
    """Decode each view under every epsilon; record reconstruction spread.

    Spread is the mean pairwise chamfer_mean among the reconstructions of one
    view (symmetric, unordered pairs); mean_sigma is the average predicted
    sigma. Epsilon vectors are applied identically to every view.
    """
    if not image_params.probabilistic:
        raise ValueError("diversity_sweep: needs a probabilistic image encoder")
    epsilons = [np.asarray(e, dtype=np.float64) for e in epsilons]
    shape_ids = shape_ids or [f"view{i}" for i in range(len(views))]
    report = DiversityReport()
    for view, sid in zip(views, shape_ids):
        g = encode_image_probabilistic(image_params, view, "eval")
        clouds = [decode(decoder, reparameterize(g, eps)) for eps in epsilons]
        pair_vals = [chamfer_mean(clouds[i], clouds[j])
                     for i in range(len(clouds)) for j in range(i + 1, len(clouds))]
        spread = float(np.mean(pair_vals)) if pair_vals else 0.0
        report.records.append(DiversityRecord(view.azimuth_deg, sid, spread,
                                              float(g.sigma.mean())))
    return report
