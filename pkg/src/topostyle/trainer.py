"""The optimization loop: assemble the combined loss, hand-rolled gradient
accumulation into the field, Adam with a decaying learning rate, metrics."""

import json
import time
from dataclasses import asdict, dataclass, field as dc_field, replace

import numpy as np

from . import connectivity as conn_mod
from . import field as field_mod
from . import mechanics as mech_mod
from . import stylization as style_mod

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
TABLE_INIT_SCALE = 1e-4


@dataclass
class TrainConfig:
    """Hyperparameters of one optimization run (defaults follow the reference setup)."""

    alpha: float = 9e3  # semantic weight
    beta: float = 1.0  # connectivity weight
    gamma: float = 3e3  # volume penalty weight (copied onto the problem)
    iterations: int = 500
    lr_initial: float = 1e-2
    lr_final: float = 1e-3
    pool_factor: int = 4
    fea_resolution: int = 64
    style_resolution: int = 256
    prompt: str = ""
    backend: str = "stub"  # stub | remote | none
    seed: int | None = None
    alpha_penalty_p: float = 2.0
    grayscale_only: bool = False
    ccl_threshold: float = 0.1
    ccl_max_iters: int = 2000
    uniform_init: bool = False
    reproducible: bool = False
    grid: field_mod.GridConfig = dc_field(default_factory=field_mod.GridConfig)
    augment: style_mod.AugmentSpec = dc_field(default_factory=style_mod.AugmentSpec)

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise ValueError("loss weights alpha, beta, gamma must be non-negative")
        if self.iterations < 1:
            raise ValueError(f"iterations must be >= 1, got {self.iterations}")
        if self.lr_initial <= 0 or self.lr_final <= 0:
            raise ValueError("learning rates must be positive")
        if self.pool_factor < 1 or self.fea_resolution < 1:
            raise ValueError("pool_factor and fea_resolution must be >= 1")
        if self.style_resolution != self.fea_resolution * self.pool_factor:
            raise ValueError(
                f"style resolution {self.style_resolution} must equal "
                f"fea_resolution*pool_factor = {self.fea_resolution * self.pool_factor}")
        if self.alpha_penalty_p < 1:
            raise ValueError(f"alpha penalty exponent must be >= 1, got {self.alpha_penalty_p}")
        if not 0.0 < self.ccl_threshold < 1.0:
            raise ValueError(f"ccl_threshold must be in (0, 1), got {self.ccl_threshold}")
        if self.ccl_max_iters < 1:
            raise ValueError("ccl_max_iters must be >= 1")
        if self.backend not in ("stub", "remote", "none"):
            raise ValueError(f"backend must be stub, remote or none, got {self.backend!r}")


@dataclass
class IterationMetrics:
    iteration: int
    compliance: float
    volume_fraction: float
    loss_mech: float
    loss_sem: float
    loss_conn: float
    loss_total: float
    learning_rate: float
    ms_sample: float = 0.0
    ms_mech: float = 0.0
    ms_style: float = 0.0
    ms_conn: float = 0.0
    ms_update: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    """Exponential decay from lr_initial to exactly lr_final on the last iteration."""
    if cfg.iterations == 1:
        return cfg.lr_initial
    frac = iteration / (cfg.iterations - 1)
    return float(cfg.lr_initial * (cfg.lr_final / cfg.lr_initial) ** frac)


def initialize(cfg: TrainConfig) -> field_mod.HashField:
    """Fresh field: tiny uniform table features (or exact zeros), seeded decoder.

    Biases start at zero, so an all-zero feature vector decodes to 0.5 per
    channel; a fixed seed reproduces the same field bitwise.
    """
    seed = cfg.seed
    if seed is None:
        seed = int(np.random.SeedSequence().entropy % (2 ** 62))
    rng = np.random.default_rng(seed)
    g = cfg.grid
    if cfg.uniform_init:
        tables = [np.zeros((g.table_size, g.features)) for _ in range(g.levels)]
        rng.uniform(-TABLE_INIT_SCALE, TABLE_INIT_SCALE,
                    size=(g.levels, g.table_size, g.features))  # keep the stream aligned
    else:
        tables = [rng.uniform(-TABLE_INIT_SCALE, TABLE_INIT_SCALE,
                              size=(g.table_size, g.features))
                  for _ in range(g.levels)]
    lf = g.feature_dim
    w1 = rng.normal(0.0, np.sqrt(2.0 / lf), size=(field_mod.HIDDEN_WIDTH, lf))
    w2 = rng.normal(0.0, np.sqrt(2.0 / field_mod.HIDDEN_WIDTH),
                    size=(field_mod.OUT_CHANNELS, field_mod.HIDDEN_WIDTH))
    return field_mod.HashField(
        cfg=g, tables=tables, w1=w1, b1=np.zeros(field_mod.HIDDEN_WIDTH),
        w2=w2, b2=np.zeros(field_mod.OUT_CHANNELS), rng_seed=seed)


class Adam:
    """Standard Adam with bias correction, state keyed by parameter name."""

    def __init__(self, beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
                 eps: float = ADAM_EPS):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for name, p in params.items():
            g = grads[name]
            if g.shape != p.shape:
                raise ValueError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"non-finite gradient for parameter {name}")
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def _check_term(name: str, loss: float, grad: np.ndarray) -> None:
    if not np.isfinite(loss) or not np.isfinite(grad).all():
        raise FloatingPointError(f"non-finite value in the {name} loss term")


def _full_active_mask(problem: mech_mod.FemProblem, pool: int) -> np.ndarray | None:
    if problem.active is None:
        return None
    return np.kron(problem.active.astype(np.float64), np.ones((pool, pool)))


def evaluate_semantic(fld: field_mod.HashField, cfg: TrainConfig, backend,
                      eval_seed: int = 0) -> float:
    """Semantic loss of the current field under a fixed evaluation draw.

    Uses its own seeded background and augmentation so different runs can be
    compared on identical footing.
    """
    n = cfg.style_resolution
    structure = field_mod.sample_structure(fld, n, n)
    bg = style_mod.sample_background(n, n, cfg.augment.blur_sigma,
                                    np.random.default_rng(eval_seed))
    image = style_mod.compose_image(structure, bg, cfg.alpha_penalty_p, cfg.grayscale_only)
    batch = style_mod.augment(image, replace(cfg.augment, rng_seed=eval_seed + 1))
    loss, _ = style_mod.semantic_loss(batch, cfg.prompt, backend)
    return loss


def train(problem: mech_mod.FemProblem, cfg: TrainConfig, backend=None,
          metrics_path=None, checkpoint_path=None):
    """Run the optimization; returns (field, metrics list).

    Per iteration: sample the structure once, accumulate the weighted gradients
    of the mechanical, semantic and connectivity terms into a single adjoint of
    the sampled grid, run one field backward pass and one Adam step. Metrics
    stream to metrics_path (JSON lines) as they are produced, so an aborted run
    keeps its partial log.
    """
    if cfg.alpha > 0 and backend is None:
        raise ValueError("semantic weight alpha > 0 requires a style backend")
    if problem.nelx != cfg.fea_resolution or problem.nely != cfg.fea_resolution:
        raise ValueError(
            f"problem mesh {problem.nelx}x{problem.nely} does not match "
            f"fea_resolution {cfg.fea_resolution}")
    problem.volume_weight = cfg.gamma

    fld = initialize(cfg)
    adam = Adam()
    n = cfg.style_resolution
    mask_full = _full_active_mask(problem, cfg.pool_factor)
    bg_seq, aug_seq = np.random.SeedSequence(fld.rng_seed).spawn(2)
    bg_rng = np.random.default_rng(bg_seq)
    aug_rng = np.random.default_rng(aug_seq)

    metrics: list[IterationMetrics] = []
    prev_u = None
    sink = open(metrics_path, "w") if metrics_path else None
    clock = (lambda: 0.0) if cfg.reproducible else time.perf_counter

    def ms(t0, t1):
        return 0.0 if cfg.reproducible else (t1 - t0) * 1e3

    try:
        for it in range(cfg.iterations):
            t0 = clock()
            structure, trace = field_mod.sample_structure(fld, n, n, return_trace=True)
            rho = structure[:, :, 0]
            t1 = clock()

            mech = mech_mod.mech_objective(problem, rho, cfg.pool_factor, warm_start=prev_u)
            _check_term("mechanical", mech.loss, mech.grad_full)
            prev_u = mech.fem.u
            t2 = clock()

            rho_eff = rho if mask_full is None else rho * mask_full
            d_struct = np.zeros((n, n, 4))
            d_struct[:, :, 0] += mech.grad_full

            loss_sem = 0.0
            if cfg.alpha > 0:
                # tie each iteration's draws to the run seed, not to wall time
                bg = style_mod.sample_background(n, n, cfg.augment.blur_sigma, bg_rng)
                s_eff = structure if mask_full is None else \
                    np.concatenate([rho_eff[:, :, None], structure[:, :, 1:4]], axis=2)
                image = style_mod.compose_image(s_eff, bg, cfg.alpha_penalty_p,
                                                cfg.grayscale_only)
                aug_spec = replace(cfg.augment, rng_seed=int(aug_rng.integers(2 ** 62)))
                batch = style_mod.augment(image, aug_spec)
                loss_sem, d_image = style_mod.semantic_loss(batch, cfg.prompt, backend)
                d_rho_s, d_color_s = style_mod.compose_backward(
                    s_eff, bg, cfg.alpha_penalty_p, d_image, cfg.grayscale_only)
                if mask_full is not None:
                    d_rho_s = d_rho_s * mask_full
                _check_term("semantic", loss_sem, d_rho_s)
                _check_term("semantic", loss_sem, d_color_s)
                d_struct[:, :, 0] += cfg.alpha * d_rho_s
                d_struct[:, :, 1:4] += cfg.alpha * d_color_s
            t3 = clock()

            loss_conn = 0.0
            if cfg.beta > 0:
                # labeling runs on the pooled element densities, the same grid the
                # FEM sees; sub-element specks then cannot register as components
                labels = conn_mod.ccl_labels(
                    conn_mod.binarize(mech.pooled, cfg.ccl_threshold), cfg.ccl_max_iters)
                loss_conn, d_pooled = conn_mod.conn_loss(mech.pooled, labels,
                                                         problem.target_fraction)
                _check_term("connectivity", loss_conn, d_pooled)
                d_conn = mech_mod.unpool_gradient(d_pooled, cfg.pool_factor)
                if mask_full is not None:
                    d_conn = d_conn * mask_full
                d_struct[:, :, 0] += cfg.beta * d_conn
            t4 = clock()

            total = mech.loss + cfg.alpha * loss_sem + cfg.beta * loss_conn
            grads = field_mod.backward(fld, n, n, d_struct, trace=trace)
            lr = learning_rate(cfg, it)
            adam.step(fld.params(), grads.as_dict(), lr)
            t5 = clock()

            record = IterationMetrics(
                iteration=it, compliance=mech.fem.compliance,
                volume_fraction=mech.fem.volume_fraction, loss_mech=mech.loss,
                loss_sem=loss_sem, loss_conn=loss_conn, loss_total=total,
                learning_rate=lr, ms_sample=ms(t0, t1), ms_mech=ms(t1, t2),
                ms_style=ms(t2, t3), ms_conn=ms(t3, t4), ms_update=ms(t4, t5))
            metrics.append(record)
            if sink is not None:
                sink.write(record.to_json() + "\n")
                sink.flush()
    finally:
        if sink is not None:
            sink.close()

    if checkpoint_path is not None:
        field_mod.save_checkpoint(fld, checkpoint_path)
    return fld, metrics


def read_metrics(path) -> list[IterationMetrics]:
    """Load a JSON-lines metrics log written by train."""
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(IterationMetrics(**json.loads(line)))
    return out
