"""Feature extractors, the trainable adapter, and representation diagnostics.

Two extractor surrogates share one deterministic scene rasterizer:

* ``ConstantEyeExtractor`` returns the rasterization unchanged, so its output
  depends on scene geometry alone and is bitwise identical across styles.
* ``BrittleExtractor`` applies a style-keyed corruption (channel gains and
  offsets, a partial channel permutation, a smooth multiplicative field, and
  a global bias on channel 0).  The origin style maps to the identity.

Both are frozen: their constants derive from seeds fixed at construction and
are never exposed to any optimizer.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from . import nn
from ._accel import sat_pairs
from .errors import DimMismatch, TooFewStyles
from .geom import normalize_angle
from .nn import ParamSet, Tensor, tensor
from .scenario import GeneratorConfig, Scenario, StyleId, generate_scenario

N_BASE_CHANNELS = 16


@dataclass
class PerceptionConfig:
    grid_h: int = 16
    grid_w: int = 16
    channels: int = 32  # base raster + fixed nonlinear mixing
    x_range: tuple[float, float] = (-8.0, 56.0)
    y_range: tuple[float, float] = (-32.0, 32.0)
    mixing_seed: int = 777
    corruption_seed: int = 999
    n_styles: int = 11
    gain_range: tuple[float, float] = (0.55, 1.7)
    offset_range: tuple[float, float] = (-0.35, 0.35)
    n_channel_swaps: int = 4
    field_amplitude: float = 0.25
    style_bias_delta: float = 0.25  # guaranteed per-style gap on channel 0


@dataclass
class FeatureGrid:
    grid: np.ndarray  # (H, W, C)
    extractor_id: str
    style_id: int


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (N, d), N = H * W row-major
    grid_hw: tuple[int, int]


# ---------------------------------------------------------------------------
# shared geometric rasterization
# ---------------------------------------------------------------------------

def _cell_centers(cfg: PerceptionConfig) -> np.ndarray:
    xs = np.linspace(cfg.x_range[0], cfg.x_range[1], cfg.grid_h + 1)
    ys = np.linspace(cfg.y_range[0], cfg.y_range[1], cfg.grid_w + 1)
    cx = 0.5 * (xs[:-1] + xs[1:])
    cy = 0.5 * (ys[:-1] + ys[1:])
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)  # (H*W, 2) in ego frame


def _mixing_tables(cfg: PerceptionConfig):
    rng = np.random.default_rng(np.random.SeedSequence([0x31F0, cfg.mixing_seed]))
    n_mix = cfg.channels - N_BASE_CHANNELS
    m = rng.normal(size=(N_BASE_CHANNELS, n_mix)) / math.sqrt(N_BASE_CHANNELS)
    c = rng.uniform(-0.3, 0.3, size=n_mix)
    return m, c


def rasterize_scene(s: Scenario, cfg: PerceptionConfig) -> np.ndarray:
    """Deterministic (H, W, C) grid from geometry fields only.

    Base channels: drivable mask, centerline distance and tangent fields,
    agent occupancy and velocity, stop-line proximity by phase, goal one-hot,
    ego speed and accel.  The remaining channels are a fixed seeded tanh
    mixing of the base block (never trained).
    """
    h, w = cfg.grid_h, cfg.grid_w
    pose = s.current_pose
    local = _cell_centers(cfg)
    c0, s0 = math.cos(pose.heading), math.sin(pose.heading)
    world = np.empty_like(local)
    world[:, 0] = pose.x + c0 * local[:, 0] - s0 * local[:, 1]
    world[:, 1] = pose.y + s0 * local[:, 0] + c0 * local[:, 1]

    base = np.zeros((h * w, N_BASE_CHANNELS))

    drivable = np.zeros(h * w, dtype=bool)
    for poly in s.drivable:
        drivable |= poly.contains(world)
    base[:, 0] = drivable

    best_lat = np.full(h * w, np.inf)
    best_tan = np.zeros(h * w)
    for line in s.centerlines:
        rows = line.project(world)
        closer = np.abs(rows[:, 1]) < np.abs(best_lat)
        best_lat = np.where(closer, rows[:, 1], best_lat)
        best_tan = np.where(closer, rows[:, 2], best_tan)
    base[:, 1] = np.clip(np.abs(best_lat), 0.0, 6.0) / 6.0
    rel_tan = normalize_angle(best_tan - pose.heading)
    base[:, 2] = np.cos(rel_tan)
    base[:, 3] = np.sin(rel_tan)

    cell_half_x = (cfg.x_range[1] - cfg.x_range[0]) / (2.0 * h)
    cell_half_y = (cfg.y_range[1] - cfg.y_range[0]) / (2.0 * w)
    cell_rows = np.zeros((h * w, 5))
    cell_rows[:, 0] = local[:, 0]
    cell_rows[:, 1] = local[:, 1]
    cell_rows[:, 3] = cell_half_x
    cell_rows[:, 4] = cell_half_y
    for agent in s.agents:
        wp = agent.trajectory.waypoints
        ax, ay, ah = wp[0]
        vel_world = (wp[1, :2] - wp[0, :2]) / s.dt
        vx = (c0 * vel_world[0] + s0 * vel_world[1]) / 15.0
        vy = (-s0 * vel_world[0] + c0 * vel_world[1]) / 15.0
        # agent box in ego frame; cell occupied iff the boxes intersect
        dx, dy = ax - pose.x, ay - pose.y
        agent_row = np.array(
            [
                c0 * dx + s0 * dy,
                -s0 * dx + c0 * dy,
                normalize_angle(ah - pose.heading),
                agent.half_length,
                agent.half_width,
            ]
        )
        inside = sat_pairs(cell_rows, np.broadcast_to(agent_row, (h * w, 5)))
        if agent.kind == "vehicle":
            base[inside, 4] = 1.0
            base[inside, 5] = vx
            base[inside, 6] = vy
        else:
            base[inside, 7] = 1.0

    for light in s.lights:
        verts = light.stop_line.vertices
        mid = verts.mean(axis=0)
        d = np.hypot(world[:, 0] - mid[0], world[:, 1] - mid[1])
        prox = np.exp(-(d * d) / (2.0 * 4.0 * 4.0))
        if light.is_red(0):
            base[:, 8] = np.maximum(base[:, 8], prox)
        else:
            base[:, 9] = np.maximum(base[:, 9], prox)

    goal_idx = {"left": 10, "straight": 11, "right": 12}[s.goal_command]
    base[:, goal_idx] = 1.0

    hist = s.ego_history.xy
    v_now = np.hypot(*(hist[-1] - hist[-2])) / s.dt
    v_prev = np.hypot(*(hist[-2] - hist[-3])) / s.dt
    base[:, 13] = v_now / 15.0
    base[:, 14] = (v_now - v_prev) / s.dt / 3.0

    rows = s.route.project(world)
    base[:, 15] = np.clip(rows[:, 1], -6.0, 6.0) / 6.0

    m, c = _mixing_tables(cfg)
    mixed = np.tanh(base @ m + c)
    return np.concatenate([base, mixed], axis=1).reshape(h, w, cfg.channels)


# ---------------------------------------------------------------------------
# extractors
# ---------------------------------------------------------------------------

class ConstantEyeExtractor:
    """Frozen appearance-invariant interface: geometry in, same grid out."""

    extractor_id = "constant_eye"

    def __init__(self, cfg: PerceptionConfig | None = None):
        self.cfg = cfg or PerceptionConfig()

    def __call__(self, s: Scenario) -> FeatureGrid:
        grid = rasterize_scene(s, self.cfg)
        return FeatureGrid(grid=grid, extractor_id=self.extractor_id, style_id=s.style.id)

    def checksum(self) -> str:
        m, c = _mixing_tables(self.cfg)
        h = hashlib.sha256()
        h.update(repr(self.cfg).encode())
        h.update(m.tobytes())
        h.update(c.tobytes())
        return h.hexdigest()


@dataclass
class StyleCorruption:
    gain: np.ndarray  # (C,)
    offset: np.ndarray  # (C,)
    perm: np.ndarray  # (C,) channel source indices
    smooth_field: np.ndarray  # (H, W)
    channel0_bias: float


class BrittleExtractor:
    """Style-sensitive surrogate: shared rasterization, style-keyed corruption."""

    extractor_id = "brittle"

    def __init__(self, cfg: PerceptionConfig | None = None):
        self.cfg = cfg or PerceptionConfig()
        self._tables = [self._build_table(i) for i in range(self.cfg.n_styles)]

    def _build_table(self, style_id: int) -> StyleCorruption:
        cfg = self.cfg
        c = cfg.channels
        if style_id == 0:
            return StyleCorruption(
                gain=np.ones(c),
                offset=np.zeros(c),
                perm=np.arange(c),
                smooth_field=np.ones((cfg.grid_h, cfg.grid_w)),
                channel0_bias=0.0,
            )
        rng = np.random.default_rng(
            np.random.SeedSequence([0xC0FF, cfg.corruption_seed, style_id])
        )
        gain = rng.uniform(*cfg.gain_range, size=c)
        offset = rng.uniform(*cfg.offset_range, size=c)
        perm = np.arange(c)
        for _ in range(cfg.n_channel_swaps):
            i, j = rng.integers(1, c, size=2)  # channel 0 is never permuted
            perm[i], perm[j] = perm[j], perm[i]
        coarse = rng.uniform(-1.0, 1.0, size=(4, 4))
        fine = np.repeat(np.repeat(coarse, cfg.grid_h // 4, axis=0), cfg.grid_w // 4, axis=1)
        smooth_field = 1.0 + cfg.field_amplitude * fine
        return StyleCorruption(
            gain=gain,
            offset=offset,
            perm=perm,
            smooth_field=smooth_field,
            channel0_bias=cfg.style_bias_delta * style_id,
        )

    def corruption_table(self, style_id: int) -> StyleCorruption:
        return self._tables[style_id]

    def __call__(self, s: Scenario) -> FeatureGrid:
        grid = rasterize_scene(s, self.cfg).copy()
        t = self._tables[s.style.id]
        out = grid[:, :, t.perm] * t.gain + t.offset
        out[:, :, 1:] *= t.smooth_field[:, :, None]
        # channel 0 passes through untouched apart from the style bias, which
        # guarantees a minimum gap between any two distinct styles
        out[:, :, 0] = grid[:, :, 0] + t.channel0_bias
        return FeatureGrid(grid=out, extractor_id=self.extractor_id, style_id=s.style.id)

    def checksum(self) -> str:
        h = hashlib.sha256()
        h.update(repr(self.cfg).encode())
        m, c = _mixing_tables(self.cfg)
        h.update(m.tobytes())
        h.update(c.tobytes())
        for t in self._tables:
            for arr in (t.gain, t.offset, t.perm, t.smooth_field):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def make_extractor(name: str, cfg: PerceptionConfig | None = None):
    if name == "constant_eye":
        return ConstantEyeExtractor(cfg)
    if name == "brittle":
        return BrittleExtractor(cfg)
    raise ValueError(f"unknown extractor {name!r}")


# ---------------------------------------------------------------------------
# adapter
# ---------------------------------------------------------------------------

@dataclass
class AdapterConfig:
    in_channels: int = 32
    dim: int = 16
    depth: int = 4
    with_aggregator: bool = True

    def __post_init__(self):
        if self.dim >= self.in_channels and self.depth > 1:
            # compression contract: d < C for real configs; equality is only
            # allowed for the depth-1 identity adapter used in tests
            raise DimMismatch("adapter output dim must be smaller than input channels")


def init_adapter(ps: ParamSet, prefix: str, cfg: AdapterConfig):
    """Create adapter parameters (MLP stack + up/down aggregator kernels)."""
    d_in = cfg.in_channels
    for i in range(cfg.depth):
        d_out = cfg.dim
        ps.add(f"{prefix}mlp{i}.w", (d_in, d_out))
        ps.add(f"{prefix}mlp{i}.b", (d_out,), init="zeros")
        d_in = d_out
    if cfg.with_aggregator:
        ps.add(f"{prefix}up.k", (3, 3, cfg.dim, cfg.dim))
        ps.add(f"{prefix}down.k", (3, 3, cfg.dim, cfg.dim))


def adapt_op(ps: ParamSet, prefix: str, cfg: AdapterConfig, grids: np.ndarray) -> Tensor:
    """Differentiable adapter: (B, H, W, C) grids -> (B, N, d) token tensor."""
    if grids.ndim != 4 or grids.shape[3] != cfg.in_channels:
        raise DimMismatch(f"adapter expects (B, H, W, {cfg.in_channels}), got {grids.shape}")
    b, h, w, c = grids.shape
    x = nn.reshape(tensor(grids), (b * h * w, c))
    for i in range(cfg.depth):
        x = nn.affine(x, ps[f"{prefix}mlp{i}.w"], ps[f"{prefix}mlp{i}.b"])
        if i < cfg.depth - 1:
            x = nn.relu(x)
    x = nn.reshape(x, (b, h, w, cfg.dim))
    if cfg.with_aggregator:
        x = nn.conv3x3(nn.upsample2(x), ps[f"{prefix}up.k"])
        x = nn.downsample2(nn.conv3x3(x, ps[f"{prefix}down.k"]))
    return nn.reshape(x, (b, h * w, cfg.dim))


@dataclass
class AdapterParams:
    """Adapter configuration plus the parameter set that owns its tensors."""

    cfg: AdapterConfig
    ps: ParamSet
    prefix: str = "adapter."

    @classmethod
    def create(cls, cfg: AdapterConfig, seed: int = 0) -> "AdapterParams":
        ps = ParamSet(seed=seed)
        init_adapter(ps, "adapter.", cfg)
        return cls(cfg=cfg, ps=ps)

    @classmethod
    def identity(cls, channels: int) -> "AdapterParams":
        """Depth-1 identity MLP with identity aggregator kernels."""
        cfg = AdapterConfig(in_channels=channels, dim=channels, depth=1, with_aggregator=True)
        ps = ParamSet(seed=0)
        init_adapter(ps, "adapter.", cfg)
        ps.set("adapter.mlp0.w", np.eye(channels))
        ps.set("adapter.mlp0.b", np.zeros(channels))
        ps.set("adapter.up.k", nn.identity_kernel(channels))
        ps.set("adapter.down.k", nn.identity_kernel(channels))
        return cls(cfg=cfg, ps=ps)


def adapt(f: FeatureGrid, params: AdapterParams) -> TokenSequence:
    """Project a feature grid to the flattened token sequence (inference)."""
    h, w, _ = f.grid.shape
    out = adapt_op(params.ps, params.prefix, params.cfg, f.grid[None, ...])
    return TokenSequence(tokens=out.data[0], grid_hw=(h, w))


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------

def dispersion_ratio(token_sets: list[np.ndarray]) -> float:
    """Cross-style token variance over spatial variance of the style means."""
    if len(token_sets) < 2:
        raise TooFewStyles("dispersion needs at least two styles")
    stack = np.stack(token_sets)  # (S, N, d)
    # deviations from the first style keep identical sets exactly at zero
    devs = stack - stack[0]
    mean_dev = devs.mean(axis=0)
    num = float(np.mean(np.sum((devs - mean_dev) ** 2, axis=2)))
    style_mean = stack[0] + mean_dev  # (N, d)
    spatial_mean = style_mean.mean(axis=0)
    den = float(np.mean(np.sum((style_mean - spatial_mean) ** 2, axis=1)))
    if num == 0.0:
        return 0.0
    return num / den


def token_dispersion(
    seed: int,
    styles: list[StyleId],
    extractor,
    adapter: AdapterParams,
    gen_config: GeneratorConfig | None = None,
) -> float:
    """Dispersion of adapted tokens for one geometry seed across styles.

    0 means tokens at each grid location are identical across styles; larger
    values mean the latent space moves under appearance shifts.
    """
    if len(styles) < 2:
        raise TooFewStyles("dispersion needs at least two styles")
    gen_config = gen_config or GeneratorConfig()
    token_sets = []
    for style in styles:
        s = generate_scenario(seed, style, gen_config)
        token_sets.append(adapt(extractor(s), adapter).tokens)
    return dispersion_ratio(token_sets)


def pca_maps(f: FeatureGrid, k: int = 3) -> np.ndarray:
    """Top-k principal-component projections as an (H, W, k) image.

    Sign convention: the largest-magnitude loading of each component is
    positive, so maps are deterministic.
    """
    h, w, c = f.grid.shape
    if k > c:
        raise DimMismatch(f"k={k} exceeds channel count {c}")
    x = f.grid.reshape(-1, c)
    xc = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(xc, full_matrices=False)
    comps = vt[:k].copy()
    for i in range(k):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]
    proj = xc @ comps.T
    return proj.reshape(h, w, k)


def pca_variance_ratios(f: FeatureGrid, k: int = 3) -> np.ndarray:
    """Fraction of total variance captured by each of the top-k components."""
    h, w, c = f.grid.shape
    x = f.grid.reshape(-1, c)
    xc = x - x.mean(axis=0)
    _, sv, _ = np.linalg.svd(xc, full_matrices=False)
    total = float(np.sum(sv**2))
    if total == 0.0:
        return np.zeros(k)
    return (sv[:k] ** 2) / total
