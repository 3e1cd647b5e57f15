"""Evaluation metrics for stylized view sequences.

Embedding and feature networks are pluggable. Defaults load pretrained
CLIP / VGG19 / Inception weights; when they are unavailable the affected
metric is reported as ``None`` with a note instead of failing the run.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import scipy.linalg
import torch
import torch.nn.functional as F

from .cameras import CameraView
from .geometry import compute_grid, compute_visibility, warp_features

log = logging.getLogger(__name__)

# (N, H, W, 3) images in [0, 1] -> (N, D) embeddings
Embedder = Callable[[torch.Tensor], torch.Tensor]
# (N, 3, H, W) in [0, 1] -> list of (N, C_l, H_l, W_l) feature maps
FeatureExtractor = Callable[[torch.Tensor], List[torch.Tensor]]

TABLE_COLUMNS = {
    "clip_s": "CLIP-S",
    "clip_c": "CLIP-C",
    "clip_cons": "CLIP-CONS",
    "clip_f": "CLIP-F",
    "s_vgg": "S_vgg",
    "fid": "FID",
    "lpips_short": "Short-range LPIPS",
    "rmse_short": "Short-range RMSE",
    "lpips_long": "Long-range LPIPS",
    "rmse_long": "Long-range RMSE",
}
CLIP_CONS_LABEL = "CLIP-CONS (harness definition)"
VGG_STYLE_LAYERS = (1, 6, 11, 20, 29)  # conv1_1 ... conv5_1 (post-ReLU indices in vgg19.features)


class MetricUnavailable(RuntimeError):
    """A pretrained network needed for a metric could not be loaded."""


def cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    return F.cosine_similarity(a.double(), b.double(), dim=-1)


@dataclass
class ClipScores:
    clip_s: Optional[float]
    clip_c: Optional[float]
    clip_cons: Optional[float]
    clip_f: Optional[float]


def clip_scores_from_embeddings(
    stylized: torch.Tensor, content: torch.Tensor, style: torch.Tensor | None
) -> ClipScores:
    """CLIP-family scores from precomputed embeddings.

    Args:
        stylized: (T, D) embeddings of stylized frames.
        content: (T, D) embeddings of the matching content frames.
        style: (D,) embedding of the style image, or ``None``.

    Temporal scores need at least two frames and are ``None`` otherwise.
    """
    if stylized.shape != content.shape:
        raise ValueError("stylized and content sequences differ in shape")
    clip_s = float(cosine(stylized, style[None]).mean()) if style is not None else None
    clip_c = float(cosine(stylized, content).mean())
    if stylized.shape[0] < 2:
        warnings.warn("temporal CLIP metrics need at least two frames", stacklevel=2)
        return ClipScores(clip_s, clip_c, None, None)
    cos_f = cosine(stylized[:-1], stylized[1:])
    cos_c = cosine(content[:-1], content[1:])
    clip_cons = float((cos_f - cos_c).mean())
    clip_f = float(cos_f.mean() / cos_c.mean())
    return ClipScores(clip_s, clip_c, clip_cons, clip_f)


def clip_scores(
    stylized_frames: torch.Tensor,
    content_frames: torch.Tensor,
    style_image: torch.Tensor | None,
    embedder: Embedder,
) -> ClipScores:
    """Embed frames (T, H, W, 3) and the style image, then score them."""
    with torch.no_grad():
        f = embedder(stylized_frames)
        c = embedder(content_frames)
        s = embedder(style_image[None])[0] if style_image is not None else None
    return clip_scores_from_embeddings(f, c, s)


def gram_matrix(features: torch.Tensor) -> torch.Tensor:
    """(..., C, H, W) -> (..., C, C) normalized by the number of positions."""
    c = features.shape[-3]
    flat = features.reshape(*features.shape[:-3], c, -1)
    return flat @ flat.transpose(-1, -2) / flat.shape[-1]


def vgg_style_distance(
    stylized_frames: torch.Tensor, style_image: torch.Tensor, extractor: FeatureExtractor
) -> float:
    """Mean over frames of the layer-averaged Gram Frobenius distance, x100."""
    with torch.no_grad():
        frame_feats = extractor(stylized_frames.permute(0, 3, 1, 2))
        style_feats = extractor(style_image[None].permute(0, 3, 1, 2))
        per_layer = []
        for ff, sf in zip(frame_feats, style_feats):
            diff = gram_matrix(ff.double()) - gram_matrix(sf.double())
            per_layer.append(torch.linalg.matrix_norm(diff, ord="fro"))
        return float(torch.stack(per_layer).mean(dim=0).mean() * 100.0)


class VGGFeatures:
    """VGG19 activations at conv1_1 ... conv5_1 (post-ReLU), ImageNet-normalized."""

    def __init__(self, layers=VGG_STYLE_LAYERS, device="cpu"):
        try:
            from torchvision.models import VGG19_Weights, vgg19

            net = vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features
        except Exception as exc:  # download or import failure
            raise MetricUnavailable(f"VGG19 weights unavailable: {exc}") from exc
        self.net = net[: max(layers) + 1].eval().requires_grad_(False).to(device)
        self.layers = set(layers)
        self.mean = torch.tensor([0.485, 0.456, 0.406], device=device).view(1, 3, 1, 1)
        self.std = torch.tensor([0.229, 0.224, 0.225], device=device).view(1, 3, 1, 1)

    def __call__(self, x: torch.Tensor) -> List[torch.Tensor]:
        h = (x.float() - self.mean) / self.std
        out = []
        for i, layer in enumerate(self.net):
            h = layer(h)
            if i in self.layers:
                out.append(h)
        return out


class PerceptualDistance:
    """LPIPS-style distance: unit-normalized channel features, squared
    difference, spatial mean, summed over layers.

    Uses the ``lpips`` package when installed; otherwise uncalibrated
    (unit-weight) VGG features, or any injected ``extractor``.
    """

    def __init__(self, extractor: FeatureExtractor | None = None):
        self._lpips = None
        if extractor is None:
            try:
                import lpips  # type: ignore

                self._lpips = lpips.LPIPS(net="vgg", verbose=False).eval()
            except Exception:
                extractor = VGGFeatures(layers=(3, 8, 17, 26, 35 - 1))
        self.extractor = extractor

    def __call__(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        """Distances between (N, H, W, 3) batches in [0, 1]; returns (N,)."""
        x, y = a.permute(0, 3, 1, 2), b.permute(0, 3, 1, 2)
        with torch.no_grad():
            if self._lpips is not None:
                return self._lpips(x * 2 - 1, y * 2 - 1).flatten()
            total = torch.zeros(x.shape[0], dtype=torch.float64)
            for fx, fy in zip(self.extractor(x), self.extractor(y)):
                nx = fx.double() / (fx.double().norm(dim=1, keepdim=True) + 1e-10)
                ny = fy.double() / (fy.double().norm(dim=1, keepdim=True) + 1e-10)
                total += ((nx - ny) ** 2).sum(dim=1).mean(dim=(1, 2))
            return total


@dataclass
class ConsistencyResult:
    lpips: Optional[float]
    rmse: float
    pairs: int


def warp_frame(frame_j, cam_i, cam_j, depth_i, alpha_i=None, alpha_threshold=0.5):
    """Warp frame ``j`` into view ``i``; returns the warped image and mask."""
    depth = depth_i
    if alpha_i is not None:
        depth = torch.where(alpha_i >= alpha_threshold, depth_i, torch.zeros_like(depth_i))
    grid, raw = compute_grid(cam_i, cam_j, depth)
    vis = compute_visibility(grid, raw)
    warped = warp_features(frame_j.to(torch.float64), grid)
    return warped, vis


def masked_rmse(a: torch.Tensor, b: torch.Tensor, mask: torch.Tensor) -> float:
    """RMSE over color channels of the pixels where ``mask`` is set."""
    m = mask.to(torch.float64)[..., None]
    count = m.sum() * a.shape[-1]
    if count == 0:
        return float("nan")
    return float(torch.sqrt(((a.double() - b.double()) ** 2 * m).sum() / count))


def consistency(
    frames: torch.Tensor,
    depths: torch.Tensor,
    cameras: Sequence[CameraView],
    delta: int,
    perceptual: Optional[Callable] = None,
    alphas: torch.Tensor | None = None,
) -> ConsistencyResult:
    """Warped-frame consistency between views ``i`` and ``i + delta``.

    Frame ``i + delta`` is warped into view ``i`` with view ``i``'s depth;
    RMSE and the perceptual distance are computed on visible pixels only
    (invisible pixels are zeroed in both images before the perceptual
    network). Pairs without any visible pixel are skipped.
    """
    n = frames.shape[0]
    if n < delta + 1:
        raise ValueError(f"path of {n} frames is shorter than delta + 1 = {delta + 1}")
    rmses, dists = [], []
    for i in range(n - delta):
        j = i + delta
        warped, vis = warp_frame(
            frames[j], cameras[i], cameras[j], depths[i], None if alphas is None else alphas[i]
        )
        if not bool(vis.any()):
            continue
        ref = frames[i].double()
        rmses.append(masked_rmse(ref, warped, vis))
        if perceptual is not None:
            m = vis.to(torch.float64)[..., None]
            dists.append(float(perceptual((ref * m)[None], (warped * m)[None])[0]))
    if not rmses:
        return ConsistencyResult(None, float("nan"), 0)
    return ConsistencyResult(
        float(np.mean(dists)) if perceptual is not None else None, float(np.mean(rmses)), len(rmses)
    )


@dataclass
class FIDResult:
    value: float
    ridge: bool
    samples: int


def _fit_gaussian(x: np.ndarray):
    mu = x.mean(axis=0)
    if x.shape[0] < 2:
        raise ValueError("FID needs at least two samples per set")
    return mu, np.atleast_2d(np.cov(x, rowvar=False))


def frechet_distance(mu1, sigma1, mu2, sigma2, ridge: float = 1e-6):
    """Frechet distance between two Gaussians; returns (value, ridge_used)."""
    diff = mu1 - mu2
    with np.errstate(invalid="ignore", divide="ignore"):  # singular inputs are handled below
        covmean, _ = scipy.linalg.sqrtm(sigma1 @ sigma2, disp=False)
    used_ridge = False
    if not np.isfinite(covmean).all() or np.linalg.matrix_rank(sigma1) < sigma1.shape[0] or np.linalg.matrix_rank(
        sigma2
    ) < sigma2.shape[0]:
        offset = np.eye(sigma1.shape[0]) * ridge
        covmean, _ = scipy.linalg.sqrtm((sigma1 + offset) @ (sigma2 + offset), disp=False)
        sigma1, sigma2 = sigma1 + offset, sigma2 + offset
        used_ridge = True
    covmean = np.real(covmean)
    value = float(diff @ diff + np.trace(sigma1) + np.trace(sigma2) - 2.0 * np.trace(covmean))
    return max(value, 0.0), used_ridge


def fid_from_embeddings(a: np.ndarray, b: np.ndarray) -> FIDResult:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu1, s1 = _fit_gaussian(a)
    mu2, s2 = _fit_gaussian(b)
    value, ridge = frechet_distance(mu1, s1, mu2, s2)
    if min(len(a), len(b)) < a.shape[1]:
        log.warning("FID on %d/%d samples in %d dims is statistically unreliable", len(a), len(b), a.shape[1])
    return FIDResult(value, ridge, min(len(a), len(b)))


def fid(stylized: torch.Tensor, reference: torch.Tensor, embedder: Embedder) -> FIDResult:
    """FID between two image sets (N, H, W, 3) under ``embedder``."""
    with torch.no_grad():
        ea = embedder(stylized).double().cpu().numpy()
        eb = embedder(reference).double().cpu().numpy()
    return fid_from_embeddings(ea, eb)


class ClipImageEmbedder:
    """CLIP image embeddings via ``transformers`` (pretrained weights required)."""

    def __init__(self, model_id: str = "openai/clip-vit-base-patch32", device: str = "cpu"):
        try:
            from transformers import CLIPModel

            self.model = CLIPModel.from_pretrained(model_id).eval().to(device)
        except Exception as exc:
            raise MetricUnavailable(f"CLIP model '{model_id}' unavailable: {exc}") from exc
        self.device = device
        self.mean = torch.tensor([0.48145466, 0.4578275, 0.40821073], device=device).view(1, 3, 1, 1)
        self.std = torch.tensor([0.26862954, 0.26130258, 0.27577711], device=device).view(1, 3, 1, 1)

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        x = images.permute(0, 3, 1, 2).float().to(self.device)
        x = F.interpolate(x, size=(224, 224), mode="bicubic", align_corners=False).clamp(0, 1)
        with torch.no_grad():
            return self.model.get_image_features(pixel_values=(x - self.mean) / self.std).cpu()


class InceptionEmbedder:
    """Pool3 features of torchvision's Inception-v3 (pretrained weights required)."""

    def __init__(self, device: str = "cpu"):
        try:
            from torchvision.models import Inception_V3_Weights, inception_v3

            net = inception_v3(weights=Inception_V3_Weights.IMAGENET1K_V1, aux_logits=True)
        except Exception as exc:
            raise MetricUnavailable(f"Inception-v3 weights unavailable: {exc}") from exc
        net.fc = torch.nn.Identity()
        self.net = net.eval().to(device)
        self.device = device

    def __call__(self, images: torch.Tensor) -> torch.Tensor:
        x = images.permute(0, 3, 1, 2).float().to(self.device)
        x = F.interpolate(x, size=(299, 299), mode="bilinear", align_corners=False)
        mean = torch.tensor([0.485, 0.456, 0.406], device=self.device).view(1, 3, 1, 1)
        std = torch.tensor([0.229, 0.224, 0.225], device=self.device).view(1, 3, 1, 1)
        with torch.no_grad():
            return self.net((x - mean) / std).cpu()


@dataclass
class MetricReport:
    clip_s: Optional[float] = None
    clip_c: Optional[float] = None
    clip_cons: Optional[float] = None
    clip_f: Optional[float] = None
    s_vgg: Optional[float] = None
    fid: Optional[float] = None
    lpips_short: Optional[float] = None
    rmse_short: Optional[float] = None
    lpips_long: Optional[float] = None
    rmse_long: Optional[float] = None
    notes: List[str] = field(default_factory=list)

    def values(self) -> Dict[str, Optional[float]]:
        return {k: getattr(self, k) for k in TABLE_COLUMNS}

    def table_row(self) -> Dict[str, Optional[float]]:
        return {TABLE_COLUMNS[k]: v for k, v in self.values().items()}

    def to_json(self, path, extra: Optional[dict] = None) -> None:
        payload = {"metrics": self.table_row(), "notes": self.notes, "clip_cons_definition": CLIP_CONS_LABEL}
        if extra:
            payload.update(extra)
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=2, default=_json_default)

    def to_csv(self, path, label: str = "stylized") -> None:
        write_table([(label, self)], path)


def _json_default(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    raise TypeError(type(obj))


def write_table(rows, path) -> None:
    """Write ``[(label, MetricReport), ...]`` as a CSV with the table headers."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["Method", *TABLE_COLUMNS.values()])
        for label, report in rows:
            writer.writerow([label, *("" if v is None else f"{v:.6g}" for v in report.values().values())])


def aggregate_reports(reports: Sequence[MetricReport]) -> MetricReport:
    """Mean of each metric over the reports that define it."""
    out = MetricReport()
    for key in TABLE_COLUMNS:
        vals = [getattr(r, key) for r in reports if getattr(r, key) is not None and not math.isnan(getattr(r, key))]
        setattr(out, key, float(np.mean(vals)) if vals else None)
    for r in reports:
        out.notes.extend(n for n in r.notes if n not in out.notes)
    return out


def evaluate_sequence(
    stylized: torch.Tensor,
    content: torch.Tensor,
    style_image: Optional[torch.Tensor],
    depths: Optional[torch.Tensor] = None,
    cameras: Optional[Sequence[CameraView]] = None,
    alphas: Optional[torch.Tensor] = None,
    clip_embedder: Optional[Embedder] = None,
    vgg_extractor: Optional[FeatureExtractor] = None,
    fid_embedder: Optional[Embedder] = None,
    perceptual: Optional[Callable] = None,
    short_range: int = 1,
    long_range: int = 7,
) -> MetricReport:
    """All table metrics for one rendered sequence; missing networks yield ``None``."""
    report = MetricReport()
    report.notes.append(f"CLIP-CONS column uses the {CLIP_CONS_LABEL}")
    if clip_embedder is not None:
        if stylized.shape[0] < 2:
            report.notes.append("single frame: temporal CLIP metrics not computed")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            scores = clip_scores(stylized, content, style_image, clip_embedder)
        report.clip_s, report.clip_c = scores.clip_s, scores.clip_c
        report.clip_cons, report.clip_f = scores.clip_cons, scores.clip_f
    else:
        report.notes.append("CLIP embedder unavailable: CLIP metrics skipped")
    if vgg_extractor is not None and style_image is not None:
        report.s_vgg = vgg_style_distance(stylized, style_image, vgg_extractor)
    else:
        report.notes.append("VGG19 extractor unavailable: S_vgg skipped")
    if fid_embedder is not None:
        if stylized.shape[0] >= 2 and content.shape[0] >= 2:
            res = fid(stylized, content, fid_embedder)
            report.fid = res.value
            if res.ridge:
                report.notes.append("FID: singular covariance, ridge 1e-6 added")
            report.notes.append(f"FID on {res.samples} samples per set (desk scale, statistically weak)")
        else:
            report.notes.append("FID needs at least two frames per set")
    else:
        report.notes.append("Inception embedder unavailable: FID skipped")
    if depths is not None and cameras is not None:
        for delta, prefix in ((short_range, "short"), (long_range, "long")):
            if stylized.shape[0] < delta + 1:
                report.notes.append(f"{prefix}-range consistency needs more than {delta} frames")
                continue
            res = consistency(stylized, depths, cameras, delta, perceptual, alphas)
            setattr(report, f"rmse_{prefix}", res.rmse)
            setattr(report, f"lpips_{prefix}", res.lpips)
        if perceptual is None:
            report.notes.append("perceptual network unavailable: LPIPS skipped")
    return report
