"""Multi-resolution hash-encoded neural field mapping 2D coordinates to (density, r, g, b).

Features live in per-level hash tables, are bilinearly interpolated at query
points, concatenated across levels and decoded by a tiny two-layer network.
All gradients are hand-rolled reverse mode so they can be checked term by term.
"""

import struct
from dataclasses import dataclass, field as dc_field

import numpy as np
from scipy.special import expit

HASH_PRIMES = (1, 2654435761)
HIDDEN_WIDTH = 64
OUT_CHANNELS = 4  # (rho, r, g, b)

_CHECKPOINT_MAGIC = b"TSHFIELD"
_CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class GridConfig:
    """Geometry of the multi-resolution hashed grids."""

    levels: int = 16
    table_size: int = 2 ** 19
    features: int = 2
    n_min: int = 8
    n_max: int = 256

    def __post_init__(self):
        if self.levels < 2:
            raise ValueError(f"levels must be >= 2, got {self.levels}")
        if self.table_size <= 0 or self.table_size & (self.table_size - 1):
            raise ValueError(f"table_size must be a power of two, got {self.table_size}")
        if self.n_min < 1:
            raise ValueError(f"n_min must be >= 1, got {self.n_min}")
        if self.n_max < self.n_min:
            raise ValueError(f"n_max ({self.n_max}) must be >= n_min ({self.n_min})")
        if self.features < 1:
            raise ValueError(f"features must be >= 1, got {self.features}")

    @property
    def growth(self) -> float:
        """Per-level geometric growth factor between n_min and n_max."""
        return float(np.exp((np.log(self.n_max) - np.log(self.n_min)) / (self.levels - 1)))

    @property
    def feature_dim(self) -> int:
        return self.levels * self.features


def level_resolutions(cfg: GridConfig) -> list[int]:
    """Grid resolution of each level, coarsest first."""
    b = cfg.growth
    # 1e-9 guards against FP undershoot at levels where the exact product is an integer
    # (e.g. growth an exact root of 2); the true fractional parts are never that close to 1.
    return [int(np.floor(cfg.n_min * b ** l + 1e-9)) for l in range(cfg.levels)]


def hash_index(vertex, table_size: int) -> int:
    """Spatial hash of an integer grid vertex into [0, table_size).

    Arbitrary-precision integer arithmetic, so no overflow before the modulus.
    """
    vx, vy = int(vertex[0]), int(vertex[1])
    if vx < 0 or vy < 0:
        raise ValueError(f"vertex components must be non-negative, got ({vx}, {vy})")
    return ((vx * HASH_PRIMES[0]) ^ (vy * HASH_PRIMES[1])) % table_size


def _hash_grid(ix: np.ndarray, iy: np.ndarray, table_size: int) -> np.ndarray:
    """Vectorized hash_index for arrays of vertex components (agrees exactly)."""
    h = ix.astype(np.uint64) * np.uint64(HASH_PRIMES[0])
    h ^= iy.astype(np.uint64) * np.uint64(HASH_PRIMES[1])
    return (h % np.uint64(table_size)).astype(np.int64)


@dataclass
class HashField:
    """Trainable representation: per-level hash tables plus a small decoder.

    The decoder is two 1x1 convolutions (dense per sample): feature_dim -> 64
    (rectifier) -> 4 (logistic squash), so every output channel lies in (0, 1).
    """

    cfg: GridConfig
    tables: list  # levels arrays of (table_size, features)
    w1: np.ndarray  # (HIDDEN_WIDTH, feature_dim)
    b1: np.ndarray  # (HIDDEN_WIDTH,)
    w2: np.ndarray  # (OUT_CHANNELS, HIDDEN_WIDTH)
    b2: np.ndarray  # (OUT_CHANNELS,)
    rng_seed: int = 0
    _plan_cache: dict = dc_field(default_factory=dict, repr=False)

    def params(self) -> dict:
        """Named trainable arrays, in a fixed order."""
        out = {f"table_{l}": t for l, t in enumerate(self.tables)}
        out.update(w1=self.w1, b1=self.b1, w2=self.w2, b2=self.b2)
        return out

    def parameter_count(self) -> int:
        return sum(a.size for a in self.params().values())

    @property
    def dtype(self):
        return self.w1.dtype


@dataclass
class FieldGradients:
    """Gradients shaped exactly like the field's trainable arrays."""

    d_tables: list
    d_w1: np.ndarray
    d_b1: np.ndarray
    d_w2: np.ndarray
    d_b2: np.ndarray

    def as_dict(self) -> dict:
        out = {f"table_{l}": t for l, t in enumerate(self.d_tables)}
        out.update(w1=self.d_w1, b1=self.d_b1, w2=self.d_w2, b2=self.d_b2)
        return out


class _SamplingPlan:
    """Per-level hash indices and bilinear weights for a fixed set of coordinates.

    Pure geometry: depends only on the grid config and the query points, so it
    is reused across iterations while the tables train.
    """

    def __init__(self, cfg: GridConfig, coords: np.ndarray):
        coords = np.clip(np.asarray(coords, dtype=np.float64), 0.0, 1.0)
        self.n_points = coords.shape[0]
        self.level_idx = []  # each (n, 4) int32
        self.level_wts = []  # each (n, 4) float64
        for n_l in level_resolutions(cfg):
            pos = coords * n_l
            i0 = np.floor(pos).astype(np.int64)
            f = pos - i0
            fx, fy = f[:, 0], f[:, 1]
            idx = np.empty((self.n_points, 4), dtype=np.int32)
            wts = np.empty((self.n_points, 4), dtype=np.float64)
            corner = 0
            for dy in (0, 1):
                for dx in (0, 1):
                    idx[:, corner] = _hash_grid(i0[:, 0] + dx, i0[:, 1] + dy, cfg.table_size)
                    wx = fx if dx else 1.0 - fx
                    wy = fy if dy else 1.0 - fy
                    wts[:, corner] = wx * wy
                    corner += 1
            self.level_idx.append(idx)
            self.level_wts.append(wts)


@dataclass
class FieldTrace:
    """Forward-pass intermediates needed by the exact backward pass."""

    plan: _SamplingPlan
    features: np.ndarray  # (n, feature_dim)
    hidden: np.ndarray  # (n, HIDDEN_WIDTH), post-rectifier
    out: np.ndarray  # (n, 4), post-squash


def _grid_coords(h: int, w: int) -> np.ndarray:
    """Cell-center coordinates of an h x w grid, row-major; x = column axis."""
    ys = (np.arange(h, dtype=np.float64) + 0.5) / h
    xs = (np.arange(w, dtype=np.float64) + 0.5) / w
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _plan_for(field: HashField, key, coords: np.ndarray) -> _SamplingPlan:
    plan = field._plan_cache.get(key)
    if plan is None:
        plan = _SamplingPlan(field.cfg, coords)
        if len(field._plan_cache) >= 2:  # keep at most train + export resolution
            field._plan_cache.pop(next(iter(field._plan_cache)))
        field._plan_cache[key] = plan
    return plan


def _encode_planned(field: HashField, plan: _SamplingPlan) -> np.ndarray:
    cfg = field.cfg
    feats = np.empty((plan.n_points, cfg.feature_dim), dtype=field.dtype)
    for l in range(cfg.levels):
        corner_feats = field.tables[l][plan.level_idx[l]]  # (n, 4, F)
        wts = plan.level_wts[l].astype(field.dtype, copy=False)
        feats[:, l * cfg.features:(l + 1) * cfg.features] = np.einsum(
            "nc,ncf->nf", wts, corner_feats)
    return feats


def _decode_batch(field: HashField, feats: np.ndarray):
    hidden = feats @ field.w1.T + field.b1
    np.maximum(hidden, 0.0, out=hidden)
    out = expit(hidden @ field.w2.T + field.b2)
    return out, hidden


def encode(x, field: HashField) -> np.ndarray:
    """Encode one coordinate in [0,1]^2 to the concatenated per-level features."""
    coords = np.asarray(x, dtype=np.float64).reshape(1, 2)
    plan = _SamplingPlan(field.cfg, coords)
    return _encode_planned(field, plan)[0]


def decode(features, field: HashField) -> np.ndarray:
    """Decode a feature vector to (rho, r, g, b), each in (0, 1)."""
    feats = np.asarray(features, dtype=field.dtype).reshape(1, -1)
    if feats.shape[1] != field.cfg.feature_dim:
        raise ValueError(
            f"feature length {feats.shape[1]} != levels*features {field.cfg.feature_dim}")
    out, _ = _decode_batch(field, feats)
    return out[0]


def sample_structure(field: HashField, h: int, w: int, return_trace: bool = False):
    """Evaluate the field at the h x w cell centers.

    Returns an (h, w, 4) array with channels (rho, r, g, b); optionally also the
    forward trace consumed by :func:`backward`.
    """
    if h < 1 or w < 1:
        raise ValueError(f"resolution must be >= 1, got {h}x{w}")
    plan = _plan_for(field, (h, w), _grid_coords(h, w))
    feats = _encode_planned(field, plan)
    out, hidden = _decode_batch(field, feats)
    structure = out.reshape(h, w, OUT_CHANNELS)
    if return_trace:
        return structure, FieldTrace(plan=plan, features=feats, hidden=hidden, out=out)
    return structure


def backward(field: HashField, h: int, w: int, d_structure: np.ndarray,
             trace: FieldTrace | None = None) -> FieldGradients:
    """Exact reverse-mode gradients of sample_structure w.r.t. all field parameters.

    Colliding hash entries accumulate by summation, in fixed row-major cell
    order, so repeated runs produce bitwise-identical gradients.
    """
    d_out = np.asarray(d_structure, dtype=np.float64).reshape(-1, OUT_CHANNELS)
    if not np.isfinite(d_out).all():
        raise FloatingPointError("non-finite incoming gradient dL/dS")
    if trace is None:
        _, trace = sample_structure(field, h, w, return_trace=True)
    if d_out.shape[0] != trace.plan.n_points:
        raise ValueError(f"gradient shape {d_structure.shape} does not match {h}x{w} sample")

    cfg = field.cfg
    out, hidden, feats = trace.out, trace.hidden, trace.features
    d_z2 = d_out * out * (1.0 - out)  # logistic squash derivative
    d_w2 = d_z2.T @ hidden
    d_b2 = d_z2.sum(axis=0)
    d_hidden = d_z2 @ field.w2
    d_z1 = d_hidden * (hidden > 0.0)  # rectifier mask
    d_w1 = d_z1.T @ feats
    d_b1 = d_z1.sum(axis=0)
    d_feats = d_z1 @ field.w1

    d_tables = []
    for l in range(cfg.levels):
        d_level = d_feats[:, l * cfg.features:(l + 1) * cfg.features]  # (n, F)
        idx_flat = trace.plan.level_idx[l].ravel()
        wts = trace.plan.level_wts[l]
        d_table = np.empty((cfg.table_size, cfg.features), dtype=np.float64)
        for f in range(cfg.features):
            contrib = (wts * d_level[:, f:f + 1]).ravel()
            # bincount sums in input order: deterministic scatter-accumulation
            d_table[:, f] = np.bincount(idx_flat, weights=contrib, minlength=cfg.table_size)
        d_tables.append(d_table.astype(field.dtype, copy=False))

    return FieldGradients(
        d_tables=d_tables,
        d_w1=d_w1.astype(field.dtype, copy=False),
        d_b1=d_b1.astype(field.dtype, copy=False),
        d_w2=d_w2.astype(field.dtype, copy=False),
        d_b2=d_b2.astype(field.dtype, copy=False),
    )


def save_checkpoint(field: HashField, path) -> None:
    """Write the field as a versioned little-endian binary blob."""
    cfg = field.cfg
    header = _CHECKPOINT_MAGIC + struct.pack(
        "<IIQIIIIq", _CHECKPOINT_VERSION, cfg.levels, cfg.table_size, cfg.features,
        cfg.n_min, cfg.n_max, HIDDEN_WIDTH, field.rng_seed)
    with open(path, "wb") as fh:
        fh.write(header)
        for arr in list(field.tables) + [field.w1, field.b1, field.w2, field.b2]:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> HashField:
    """Load a field checkpoint written by :func:`save_checkpoint`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(_CHECKPOINT_MAGIC))
        if magic != _CHECKPOINT_MAGIC:
            raise ValueError(f"not a field checkpoint: {path}")
        version, levels, table_size, features, n_min, n_max, hidden, seed = struct.unpack(
            "<IIQIIIIq", fh.read(struct.calcsize("<IIQIIIIq")))
        if version != _CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        if hidden != HIDDEN_WIDTH:
            raise ValueError(f"unsupported decoder width {hidden}")
        cfg = GridConfig(levels=levels, table_size=table_size, features=features,
                         n_min=n_min, n_max=n_max)

        def read(shape):
            n = int(np.prod(shape))
            buf = fh.read(n * 8)
            if len(buf) != n * 8:
                raise ValueError(f"truncated checkpoint: {path}")
            return np.frombuffer(buf, dtype="<f8").reshape(shape).copy()

        tables = [read((table_size, features)) for _ in range(levels)]
        w1 = read((HIDDEN_WIDTH, cfg.feature_dim))
        b1 = read((HIDDEN_WIDTH,))
        w2 = read((OUT_CHANNELS, HIDDEN_WIDTH))
        b2 = read((OUT_CHANNELS,))
    return HashField(cfg=cfg, tables=tables, w1=w1, b1=b1, w2=w2, b2=b2, rng_seed=seed)
