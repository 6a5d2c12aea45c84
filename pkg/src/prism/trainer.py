"""Data-parallel mixed-precision training loop with optional fault injection.

One process simulates N ranks: each rank runs forward/backward on its own
micro-batch, the scaled gradients are averaged in fixed rank order, and a
single wide master copy of the weights takes the Adam update.  A fault
site, when present, attaches its interceptor to exactly one rank.

Numerical-safety machinery mirrors standard mixed-precision practice:
dynamic loss scaling applied at the logits gradient, a NaN check that
skips the optimizer step and halves the scale when the mean loss or any
averaged gradient goes non-finite, global-norm gradient clipping after
unscaling, and linear-warmup/cosine-decay learning rates.  The skip path
is a bitwise no-op on weights, moments and step count.

Every run is a pure function of its config: data order, fault activity
and initialization come from three independent seeded streams.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .faultengine import CorruptionRecord, FaultEngine, FaultSiteTuple
from .model import ModelConfig, backward, forward, init_params, param_shapes
from .softfp import FormatSpec, get_format
from .tensorops import dp_average, jit_scale, quantize
from .textdata import BatchSampler, load_tokens, train_val_split, val_windows

__all__ = [
    "TrainConfig",
    "StepRecord",
    "TrainResult",
    "resolve_loss_scale",
    "make_quant",
    "lr_at",
    "flat_weights",
    "save_weights",
    "load_weights",
    "eval_ppl",
    "train_run",
]

TRAIN_FORMATS = ("fp16", "bf16", "fp8_e4m3", "fp8_e5m2", "wide")

# losses must stay nonfinite this many consecutive steps before an
# unchecked run is declared dead and cut short
_UNCHECKED_LOSS_PATIENCE = 25


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(
            n_layers=2, n_heads=4, d_model=128, d_ff=512, seq_len=128, vocab_size=256
        )
    )
    total_steps: int = 3000
    # decay horizon for the lr schedule; None follows total_steps.  Letting
    # runs of different lengths share one horizon keeps their early steps
    # bitwise comparable.
    schedule_total: int | None = None
    warmup_steps: int = 100
    peak_lr: float = 6e-4
    min_lr: float = 6e-5
    batch_per_rank: int = 8
    n_ranks: int = 4
    train_format: str = "fp16"
    nan_check: bool = True
    loss_scale_init: float | None = None  # None: 2**16 scaled formats, 1 otherwise
    loss_scale_growth_interval: int = 2000
    grad_clip: float = 1.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    adam_eps: float = 1e-8
    seed: int = 0
    divergence_interval: int = 50
    eval_max_windows: int | None = None  # None: the whole validation split
    data_path: str | None = None
    record_snapshots: bool = True

    def __post_init__(self):
        if self.train_format not in TRAIN_FORMATS:
            raise ValueError(f"train_format must be one of {TRAIN_FORMATS}")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        horizon = self.schedule_total if self.schedule_total is not None else self.total_steps
        if not 0 <= self.warmup_steps < horizon:
            raise ValueError("warmup_steps must lie inside the schedule")
        if self.n_ranks < 1 or self.batch_per_rank < 1:
            raise ValueError("n_ranks and batch_per_rank must be positive")
        if self.divergence_interval < 1:
            raise ValueError("divergence_interval must be positive")
        if self.eval_max_windows is not None and self.eval_max_windows < 1:
            raise ValueError("eval_max_windows must be None or positive")


def resolve_loss_scale(cfg: TrainConfig) -> float:
    if cfg.loss_scale_init is not None:
        return float(cfg.loss_scale_init)
    return 65536.0 if cfg.train_format in ("fp16", "fp8_e4m3", "fp8_e5m2") else 1.0


def make_quant(train_format: str) -> tuple[Callable[[np.ndarray], np.ndarray] | None, FormatSpec | None]:
    """Boundary quantizer for a training format, plus its FormatSpec."""
    if train_format == "wide":
        return None, None
    spec = get_format(train_format)
    if spec.width == 8:
        return (lambda x: quantize(x, spec, jit_scale(x, spec))), spec
    return (lambda x: quantize(x, spec)), spec


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak, cosine decay to the minimum.

    lr(0) = 0, lr(warmup_steps) = peak, lr(horizon - 1) = min, exactly,
    where the horizon is schedule_total when set and total_steps otherwise.
    """
    if step < cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    horizon = cfg.schedule_total if cfg.schedule_total is not None else cfg.total_steps
    last = horizon - 1
    if step >= last:
        return cfg.min_lr
    frac = (step - cfg.warmup_steps) / (last - cfg.warmup_steps)
    return cfg.min_lr + 0.5 * (cfg.peak_lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class StepRecord:
    step: int
    loss: float
    lr: float
    loss_scale: float
    grad_norm: float | None
    skipped: bool
    fault_active: bool
    n_corrupted: int
    nan_in_loss: bool
    nan_in_activations: bool
    nan_in_weights: bool


@dataclass
class TrainResult:
    config: TrainConfig
    steps: list[StepRecord]
    params: dict[str, np.ndarray]
    moments_m: dict[str, np.ndarray]
    moments_v: dict[str, np.ndarray]
    loss_scale: float
    adam_t: int
    snapshots: list[tuple[int, np.ndarray]]
    divergence: list[tuple[int, float]]
    corruption_records: list[CorruptionRecord]
    early_stop_step: int | None
    early_stop_reason: str | None
    initial_ppl: float | None
    final_ppl: float | None

    @property
    def n_steps_run(self) -> int:
        return len(self.steps)


def flat_weights(params: dict[str, np.ndarray], cfg: ModelConfig) -> np.ndarray:
    """All parameters as one wide vector, in canonical order."""
    return np.concatenate([params[name].ravel() for name in param_shapes(cfg)])


# On-disk weight container: 8-byte magic, uint32 little-endian header
# length, UTF-8 JSON header {"names": [...], "shapes": [[...], ...],
# "dtype": "<f4"|"<f8"}, then the raw tensors concatenated in header
# order as little-endian wide values.
_WEIGHTS_MAGIC = b"PRSMWT01"


def save_weights(path, params: dict[str, np.ndarray]) -> None:
    """Persist a parameter dict in the flat binary container."""
    import json

    names = list(params)
    arrs = [np.ascontiguousarray(params[n]) for n in names]
    dtype = np.result_type(*[a.dtype for a in arrs])
    if dtype not in (np.float32, np.float64):
        raise ValueError("weights must be wide floats")
    le = np.dtype(dtype).newbyteorder("<")
    header = json.dumps(
        {"names": names, "shapes": [list(a.shape) for a in arrs], "dtype": le.str}
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_WEIGHTS_MAGIC)
        fh.write(np.uint32(len(header)).astype("<u4").tobytes())
        fh.write(header)
        for a in arrs:
            fh.write(a.astype(le, copy=False).tobytes())


def load_weights(path) -> dict[str, np.ndarray]:
    """Read a parameter dict written by save_weights."""
    import json

    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _WEIGHTS_MAGIC:
            raise ValueError(f"{path}: not a weight container")
        (hlen,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        dtype = np.dtype(header["dtype"])
        out = {}
        for name, shape in zip(header["names"], header["shapes"]):
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(n * dtype.itemsize)
            arr = np.frombuffer(buf, dtype=dtype, count=n).reshape(shape)
            out[name] = arr.astype(dtype.newbyteorder("="))
        return out


def eval_ppl(
    params: dict[str, np.ndarray],
    cfg: ModelConfig,
    val_tokens: np.ndarray,
    batch: int = 8,
    max_windows: int | None = None,
) -> float | None:
    """Validation perplexity, computed wide and fault free.

    exp of the mean per-token negative log-likelihood over non-overlapping
    windows; None when the model produces non-finite loss.
    """
    x, y = val_windows(val_tokens, cfg.seq_len)
    if max_windows is not None and len(x) > max_windows:
        x, y = x[:max_windows], y[:max_windows]
    if len(x) == 0:
        raise ValueError("validation split yields no windows")
    total, count = 0.0, 0
    for i in range(0, len(x), batch):
        cache = forward(params, x[i : i + batch], y[i : i + batch], cfg)
        n = x[i : i + batch].size
        total += cache.loss * n
        count += n
    mean_nll = total / count
    if not math.isfinite(mean_nll):
        return None
    return math.exp(mean_nll)


def _grads_nonfinite(grads: dict[str, np.ndarray]) -> bool:
    return any(not np.all(np.isfinite(g)) for g in grads.values())


def _weights_nonfinite(params: dict[str, np.ndarray]) -> bool:
    return any(not np.all(np.isfinite(p)) for p in params.values())


def train_run(
    cfg: TrainConfig,
    site: FaultSiteTuple | None = None,
    baseline_loader: Callable[[int], np.ndarray] | None = None,
) -> TrainResult:
    """Run one training job, optionally with a fault site on one rank.

    ``baseline_loader`` maps a snapshot index (0 for the initial weights,
    1 for the weights after ``divergence_interval`` steps, ...) to the
    fault-free run's flat weight vector; when given, the weight divergence
    series is computed on the fly instead of keeping snapshots in memory.
    """
    mcfg = cfg.model
    params = init_params(mcfg)
    quant, spec = make_quant(cfg.train_format)

    data_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    fault_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 2]))

    tokens = load_tokens(cfg.data_path)
    train_tokens, val_tokens = train_val_split(tokens)
    sampler = BatchSampler(train_tokens, mcfg.seq_len, data_rng)

    if site is not None and spec is None:
        raise ValueError("fault injection requires a quantized train_format")
    if site is not None and site.rank >= cfg.n_ranks:
        raise ValueError("fault site rank exceeds n_ranks")
    engine = FaultEngine(site, mcfg.n_layers, fault_rng) if site is not None else None

    m = {k: np.zeros_like(p) for k, p in params.items()}
    v = {k: np.zeros_like(p) for k, p in params.items()}
    adam_t = 0
    loss_scale = scale_cap = resolve_loss_scale(cfg)
    growth_streak = 0

    initial_ppl = eval_ppl(params, mcfg, val_tokens, max_windows=cfg.eval_max_windows)

    snapshots: list[tuple[int, np.ndarray]] = []
    divergence: list[tuple[int, float]] = []
    last_snap_step = -1

    def take_snapshot(after_steps: int) -> None:
        # divergence is only defined on the shared snapshot grid, so an
        # off-grid final snapshot (early stop) records weights only
        nonlocal last_snap_step
        vec = flat_weights(params, mcfg)
        if baseline_loader is not None and after_steps % cfg.divergence_interval == 0:
            base = baseline_loader(after_steps // cfg.divergence_interval)
            divergence.append((after_steps, float(np.linalg.norm(vec - base))))
        if cfg.record_snapshots:
            snapshots.append((after_steps, vec))
        last_snap_step = after_steps

    take_snapshot(0)

    steps: list[StepRecord] = []
    early_stop_step: int | None = None
    early_stop_reason: str | None = None
    nonfinite_loss_streak = 0
    weights_bad = False

    for step in range(cfg.total_steps):
        armed = engine.arm(step) if engine is not None else None
        ln_slot = armed.ln_slot if armed is not None else 0
        weight_slot = armed.weight_slot if armed is not None else 0
        n_corrupted_before = len(engine.records) if engine is not None else 0

        rank_losses: list[float] = []
        rank_grads: list[dict[str, np.ndarray]] = []
        nan_in_activations = False
        for rank in range(cfg.n_ranks):
            x, y = sampler.batch(step, rank, cfg.n_ranks, cfg.batch_per_rank)
            interceptor = None
            if armed is not None and rank == site.rank:
                interceptor = engine.interceptor(armed, step, spec)
            cache = forward(
                params, x, y, mcfg, quant=quant, interceptor=interceptor, ln_slot=ln_slot
            )
            grads = backward(
                params, cache, mcfg, quant=quant, interceptor=interceptor,
                ln_slot=ln_slot, weight_slot=weight_slot, loss_scale=loss_scale,
            )
            rank_losses.append(cache.loss)
            rank_grads.append(grads)
            nan_in_activations |= cache.hooked_nonfinite

        mean_loss = float(np.mean(rank_losses))
        nan_in_loss = not math.isfinite(mean_loss)
        avg = dp_average(rank_grads)

        skip = cfg.nan_check and (nan_in_loss or _grads_nonfinite(avg))
        lr = lr_at(step, cfg)
        grad_norm: float | None = None

        if skip:
            loss_scale = max(loss_scale / 2.0, 1.0)
            growth_streak = 0
        else:
            inv_scale = 1.0 / loss_scale
            sq = 0.0
            for k in avg:
                g = avg[k]
                if loss_scale != 1.0:
                    g = g * inv_scale
                    avg[k] = g
                sq += float(np.vdot(g, g))
            grad_norm = math.sqrt(sq)
            if math.isfinite(grad_norm) and grad_norm > cfg.grad_clip:
                coef = cfg.grad_clip / grad_norm
                for k in avg:
                    avg[k] = avg[k] * coef
            adam_t += 1
            b1, b2 = cfg.adam_beta1, cfg.adam_beta2
            bc1 = 1.0 - b1**adam_t
            bc2 = 1.0 - b2**adam_t
            for k in params:
                g = avg[k]
                m[k] = b1 * m[k] + (1.0 - b1) * g
                v[k] = b2 * v[k] + (1.0 - b2) * (g * g)
                mhat = m[k] / bc1
                vhat = v[k] / bc2
                params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
            growth_streak += 1
            if growth_streak >= cfg.loss_scale_growth_interval and loss_scale < scale_cap:
                loss_scale = min(loss_scale * 2.0, scale_cap)
                growth_streak = 0
            weights_bad = _weights_nonfinite(params)

        n_corrupted = 0
        if engine is not None:
            n_corrupted = sum(r.n_changed for r in engine.records[n_corrupted_before:])
        steps.append(StepRecord(
            step=step,
            loss=mean_loss,
            lr=lr,
            loss_scale=loss_scale,
            grad_norm=grad_norm,
            skipped=skip,
            fault_active=armed is not None,
            n_corrupted=n_corrupted,
            nan_in_loss=nan_in_loss,
            nan_in_activations=nan_in_activations,
            nan_in_weights=weights_bad,
        ))

        nonfinite_loss_streak = nonfinite_loss_streak + 1 if nan_in_loss else 0

        if (step + 1) % cfg.divergence_interval == 0:
            take_snapshot(step + 1)

        if weights_bad:
            early_stop_step, early_stop_reason = step, "weights_nonfinite"
            break
        if not cfg.nan_check and nonfinite_loss_streak >= _UNCHECKED_LOSS_PATIENCE:
            early_stop_step, early_stop_reason = step, "unrecoverable_loss"
            break

    completed = steps[-1].step + 1 if steps else 0
    if last_snap_step != completed:
        take_snapshot(completed)

    final_ppl = eval_ppl(params, mcfg, val_tokens, max_windows=cfg.eval_max_windows)

    return TrainResult(
        config=cfg,
        steps=steps,
        params=params,
        moments_m=m,
        moments_v=v,
        loss_scale=loss_scale,
        adam_t=adam_t,
        snapshots=snapshots,
        divergence=divergence,
        corruption_records=engine.records if engine is not None else [],
        early_stop_step=early_stop_step,
        early_stop_reason=early_stop_reason,
        initial_ppl=initial_ppl,
        final_ppl=final_ppl,
    )
