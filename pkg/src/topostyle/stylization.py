"""Image composition over random backgrounds, replayable augmentation, and
pluggable style backends that score a batch and return per-pixel gradients."""

import base64
from dataclasses import dataclass, field as dc_field

import numpy as np
import requests
from scipy.ndimage import gaussian_filter

PROTOCOL_VERSION = 1
BACKEND_INPUT_SIZE = 224  # native input side of the image-text model
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])  # ITU-R 601


class BackendUnavailableError(RuntimeError):
    """The style backend cannot be reached right now; callers may retry."""


# ---------------------------------------------------------------- composing

def compose_image(structure: np.ndarray, background: np.ndarray, alpha_p: float,
                  grayscale_only: bool = False) -> np.ndarray:
    """Blend the structure over the background: I = Y * rho^p + Z * (1 - rho^p).

    structure is (h, w, 4) with channels (rho, r, g, b). In grayscale-only mode
    the color channels are replaced by their luminance, which focuses the style
    signal on geometry rather than palette.
    """
    structure = np.asarray(structure, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    if structure.ndim != 3 or structure.shape[2] != 4:
        raise ValueError(f"structure must be (h, w, 4), got {structure.shape}")
    if background.shape != structure.shape[:2] + (3,):
        raise ValueError(
            f"background shape {background.shape} does not match structure {structure.shape}")
    if alpha_p < 1.0:
        raise ValueError(f"alpha penalty exponent must be >= 1, got {alpha_p}")
    rho = structure[:, :, 0]
    color = structure[:, :, 1:4]
    if grayscale_only:
        luma = color @ LUMA_WEIGHTS
        color = np.repeat(luma[:, :, None], 3, axis=2)
    alpha = rho[:, :, None] ** alpha_p
    return color * alpha + background * (1.0 - alpha)


def compose_backward(structure: np.ndarray, background: np.ndarray, alpha_p: float,
                     d_image: np.ndarray, grayscale_only: bool = False):
    """Gradients of compose_image: returns (d_rho, d_color).

    dI/drho = p * rho^(p-1) * (Y - Z) per channel; dI/dY = rho^p.
    """
    structure = np.asarray(structure, dtype=np.float64)
    background = np.asarray(background, dtype=np.float64)
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != background.shape:
        raise ValueError(f"gradient shape {d_image.shape} != image shape {background.shape}")
    rho = structure[:, :, 0]
    color = structure[:, :, 1:4]
    if grayscale_only:
        luma = color @ LUMA_WEIGHTS
        used = np.repeat(luma[:, :, None], 3, axis=2)
    else:
        used = color
    alpha = rho[:, :, None] ** alpha_p
    d_alpha = np.sum(d_image * (used - background), axis=2)
    d_rho = d_alpha * alpha_p * rho ** (alpha_p - 1.0)
    d_used = d_image * alpha
    if grayscale_only:
        d_color = np.sum(d_used, axis=2, keepdims=True) * LUMA_WEIGHTS
    else:
        d_color = d_used
    return d_rho, d_color


def sample_background(h: int, w: int, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Gaussian-blurred uniform color noise in [0,1]^3, edge-clamped.

    Constant with respect to the design: no gradient flows into it.
    """
    if sigma <= 0:
        raise ValueError(f"blur sigma must be positive, got {sigma}")
    noise = rng.uniform(0.0, 1.0, size=(h, w, 3))
    return gaussian_filter(noise, sigma=(sigma, sigma, 0.0), mode="nearest")


# -------------------------------------------------------------- augmenting

@dataclass(frozen=True)
class AugmentSpec:
    """Ranges for the augmentation pipeline plus the seed that fixes the draws."""

    batch: int = 16
    grayscale_prob: float = 0.1
    crop_area_range: tuple = (0.1, 1.0)
    rotation_deg: float = 10.0
    translate_frac: float = 0.1
    scale_range: tuple = (0.9, 1.1)
    blur_sigma: float = 8.0
    rng_seed: int = 0
    out_size: int = BACKEND_INPUT_SIZE

    def __post_init__(self):
        lo, hi = self.crop_area_range
        s0, s1 = self.scale_range
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if not 0.0 <= self.grayscale_prob <= 1.0:
            raise ValueError(f"grayscale_prob must be in [0, 1], got {self.grayscale_prob}")
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"crop_area_range must be within (0, 1], got {self.crop_area_range}")
        if self.rotation_deg < 0 or self.translate_frac < 0:
            raise ValueError("rotation_deg and translate_frac must be non-negative")
        if not (0.0 < s0 <= s1):
            raise ValueError(f"scale_range must be positive, got {self.scale_range}")
        if self.blur_sigma <= 0:
            raise ValueError(f"blur_sigma must be positive, got {self.blur_sigma}")
        if self.out_size < 1:
            raise ValueError(f"out_size must be >= 1, got {self.out_size}")


class _AugmentItem:
    """One recorded transform: a single combined affine warp plus a grayscale flag.

    Affine, crop and resize compose into one output-to-source pixel map, so the
    image is resampled exactly once and the adjoint is the exact transpose of
    that resampling.
    """

    def __init__(self, src_shape, out_size, matrix, offset, grayscale):
        self.src_shape = src_shape
        self.out_size = out_size
        self.matrix = matrix  # (2, 2), output (x, y) -> source, pixel centers
        self.offset = offset  # (2,)
        self.grayscale = grayscale
        h, w = src_shape
        centers = np.arange(out_size, dtype=np.float64) + 0.5
        ox, oy = np.meshgrid(centers, centers)
        out_xy = np.stack([ox.ravel(), oy.ravel()], axis=1)
        src = out_xy @ matrix.T + offset
        sx = np.clip(src[:, 0], 0.5, w - 0.5) - 0.5
        sy = np.clip(src[:, 1], 0.5, h - 0.5) - 0.5
        x0 = np.minimum(np.floor(sx).astype(np.int64), w - 2)
        y0 = np.minimum(np.floor(sy).astype(np.int64), h - 2)
        fx = sx - x0
        fy = sy - y0
        n = out_size * out_size
        self.gather_idx = np.empty((n, 4), dtype=np.int64)
        self.gather_wts = np.empty((n, 4), dtype=np.float64)
        corner = 0
        for dy in (0, 1):
            for dx in (0, 1):
                self.gather_idx[:, corner] = (y0 + dy) * w + (x0 + dx)
                self.gather_wts[:, corner] = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
                corner += 1

    def apply(self, image: np.ndarray) -> np.ndarray:
        flat = image.reshape(-1, 3)
        out = np.einsum("nc,ncf->nf", self.gather_wts, flat[self.gather_idx])
        if self.grayscale:
            out = np.repeat((out @ LUMA_WEIGHTS)[:, None], 3, axis=1)
        return out.reshape(self.out_size, self.out_size, 3)

    def transpose(self, d_item: np.ndarray) -> np.ndarray:
        h, w = self.src_shape
        d_flat = d_item.reshape(-1, 3)
        if self.grayscale:
            d_flat = d_flat.sum(axis=1)[:, None] * LUMA_WEIGHTS
        d_image = np.empty((h * w, 3))
        idx = self.gather_idx.ravel()
        for ch in range(3):
            contrib = (self.gather_wts * d_flat[:, ch:ch + 1]).ravel()
            d_image[:, ch] = np.bincount(idx, weights=contrib, minlength=h * w)
        return d_image.reshape(h, w, 3)


@dataclass
class AugmentedBatch:
    """A batch of augmented views plus everything needed to replay them exactly."""

    images: np.ndarray  # (B, out, out, 3)
    items: list
    src_shape: tuple

    def apply(self, image: np.ndarray) -> np.ndarray:
        """Replay the recorded transforms on a new image of the same shape."""
        if image.shape != self.src_shape + (3,):
            raise ValueError(f"image shape {image.shape} != recorded {self.src_shape}")
        return np.stack([item.apply(np.asarray(image, dtype=np.float64))
                         for item in self.items])

    def transpose(self, d_batch: np.ndarray) -> np.ndarray:
        """Exact adjoint: push per-view pixel gradients back to the source image."""
        if d_batch.shape != self.images.shape:
            raise ValueError(f"gradient shape {d_batch.shape} != batch {self.images.shape}")
        total = np.zeros(self.src_shape + (3,))
        for item, d_item in zip(self.items, np.asarray(d_batch, dtype=np.float64)):
            total += item.transpose(d_item)
        return total


def augment(image: np.ndarray, spec: AugmentSpec) -> AugmentedBatch:
    """Sample the recorded pipeline (affine, then square crop, then grayscale)
    and apply it: B independently transformed out_size x out_size views."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"image must be (h, w, 3), got {image.shape}")
    h, w = image.shape[:2]
    if h < 2 or w < 2:
        raise ValueError(f"image too small to resample: {h}x{w}")
    rng = np.random.default_rng(spec.rng_seed)
    items = []
    for _ in range(spec.batch):
        theta = np.deg2rad(rng.uniform(-spec.rotation_deg, spec.rotation_deg))
        tx = rng.uniform(-spec.translate_frac, spec.translate_frac) * w
        ty = rng.uniform(-spec.translate_frac, spec.translate_frac) * h
        scale = rng.uniform(*spec.scale_range)
        side = 0.0
        for _ in range(100):
            area = rng.uniform(*spec.crop_area_range)
            side = min(np.sqrt(area * h * w), float(min(h, w)))
            if side >= 1.0:
                break
        if side < 1.0:
            side = float(min(h, w))  # degenerate draws exhausted: full crop
        left = rng.uniform(0.0, w - side)
        top = rng.uniform(0.0, h - side)
        grayscale = rng.uniform() < spec.grayscale_prob

        # output pixel -> crop window -> inverse affine about the image center
        cos_t, sin_t = np.cos(-theta), np.sin(-theta)
        rot = np.array([[cos_t, -sin_t], [sin_t, cos_t]]) / scale
        step = side / spec.out_size
        matrix = rot @ np.diag([step, step])
        center = np.array([w / 2.0, h / 2.0])
        offset = rot @ (np.array([left, top]) - center - np.array([tx, ty])) + center
        items.append(_AugmentItem((h, w), spec.out_size, matrix, offset, grayscale))

    images = np.stack([item.apply(image) for item in items])
    return AugmentedBatch(images=images, items=items, src_shape=(h, w))


# ---------------------------------------------------------------- backends

@dataclass
class StyleEval:
    loss: float
    grads: np.ndarray  # (B, out, out, 3)


def negative_mean_cosine(image_latents: np.ndarray, text_latent: np.ndarray) -> float:
    """Semantic loss used by cosine backends: -mean_b cos(img_b, txt)."""
    img = image_latents / np.linalg.norm(image_latents, axis=1, keepdims=True)
    txt = text_latent / np.linalg.norm(text_latent)
    return float(-np.mean(img @ txt))


class AnalyticStub:
    """Offline backend with a closed-form optimum: quadratic pull toward a color.

    loss = mean((I - c)^2) - 1, so the range matches a cosine backend and the
    gradient 2 (I - c) / N exercises the whole gradient path without a model.
    """

    def __init__(self, target_color=(0.8, 0.7, 0.2)):
        self.target = np.asarray(target_color, dtype=np.float64)
        if self.target.shape != (3,):
            raise ValueError("target color must have 3 components")

    def evaluate(self, images: np.ndarray, prompt: str) -> StyleEval:
        images = np.asarray(images, dtype=np.float64)
        diff = images - self.target
        loss = float(np.mean(diff ** 2) - 1.0)
        grads = 2.0 * diff / diff.size
        return StyleEval(loss=loss, grads=grads)


def encode_array(arr: np.ndarray) -> dict:
    """Wire form of a float array: raw 32-bit little-endian bytes in base64."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    return {
        "dtype": "float32",
        "shape": list(arr.shape),
        "data": base64.b64encode(arr.tobytes()).decode("ascii"),
    }


def decode_array(doc: dict) -> np.ndarray:
    """Inverse of encode_array; validates length against the declared shape."""
    if doc.get("dtype") != "float32":
        raise ValueError(f"unsupported wire dtype {doc.get('dtype')!r}")
    shape = tuple(int(s) for s in doc["shape"])
    raw = base64.b64decode(doc["data"])
    expected = int(np.prod(shape)) * 4
    if len(raw) != expected:
        raise ValueError(f"wire payload holds {len(raw)} bytes, expected {expected}")
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float64)


def _response_detail(resp) -> str:
    """Best-effort reason from an error response: the JSON 'detail' if present."""
    try:
        doc = resp.json()
    except ValueError:
        doc = None
    detail = doc.get("detail") if isinstance(doc, dict) else None
    return str(detail) if detail else resp.text.strip()[:200]


class RemoteClip:
    """Client for a style-scoring service speaking the JSON/base64 wire protocol."""

    def __init__(self, base_url: str, timeout: float = 120.0, session=None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.session = session or requests.Session()

    def health(self) -> dict:
        try:
            resp = self.session.get(f"{self.base_url}/health", timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendUnavailableError(f"health check failed: {exc}") from exc
        if resp.status_code != 200:
            raise ValueError(
                f"health check failed ({resp.status_code}): {_response_detail(resp)}")
        return resp.json()

    def evaluate(self, images: np.ndarray, prompt: str) -> StyleEval:
        images = np.asarray(images, dtype=np.float64)
        payload = {
            "protocol": PROTOCOL_VERSION,
            "prompt": prompt,
            "images": encode_array(images),
        }
        try:
            resp = self.session.post(f"{self.base_url}/style_grad", json=payload,
                                     timeout=self.timeout)
        except requests.RequestException as exc:
            raise BackendUnavailableError(f"style backend unreachable: {exc}") from exc
        if resp.status_code != 200:
            # a rejection is not an outage: surface the service's reason
            raise ValueError(
                f"style backend rejected the request ({resp.status_code}): "
                f"{_response_detail(resp)}")
        doc = resp.json()
        grads = decode_array(doc["grads"])
        if grads.shape != images.shape:
            raise ValueError(
                f"backend returned grads of shape {grads.shape}, expected {images.shape}")
        loss = float(doc["loss"])
        if not np.isfinite(loss) or not np.isfinite(grads).all():
            raise ValueError("backend returned non-finite loss or gradients")
        return StyleEval(loss=loss, grads=grads)


def semantic_loss(batch: AugmentedBatch, prompt: str, backend):
    """Score the augmented batch and pull gradients back to full resolution.

    Returns (loss, d_image) where d_image is the sum over views of the
    transposed recorded transform applied to the backend's per-pixel grads.
    """
    result = backend.evaluate(batch.images, prompt)
    grads = np.asarray(result.grads, dtype=np.float64)
    if grads.shape != batch.images.shape:
        raise ValueError(
            f"backend grads shape {grads.shape} does not match batch {batch.images.shape}")
    if not np.isfinite(grads).all():
        raise ValueError("backend returned non-finite gradients")
    return float(result.loss), batch.transpose(grads)
