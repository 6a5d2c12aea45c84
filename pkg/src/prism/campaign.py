"""Campaign orchestration: config files, baselines, sweeps, reports.

A campaign is a Cartesian grid of cells (format, rate, onset fraction,
density, NaN-check variant) crossed with a block of seeds.  Each cell
seed runs the trainer with one fault site against a fault-free baseline
trained from the identical config and seed, and is reduced to a
RunRecord appended to a line-delimited JSON results store.  The store is
append-only and keyed by run id, so an interrupted sweep resumes by
skipping ids already present.

Reports aggregate the store per (format, rate): outcome and mode
fractions, non-finite-event fractions per monitored dimension with the
sub-fraction that also changed PPL, and nearest-rank PPL percentiles of
the non-crashed runs.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, NamedTuple, Sequence

import numpy as np

from .analysis import Mode, Outcome, RunRecord, build_run_record
from .faultengine import FaultSiteTuple
from .signatures import ErrorSignature, load_signatures, synth_archetype
from .trainer import TRAIN_FORMATS, TrainConfig, flat_weights, train_run

__all__ = [
    "CampaignError",
    "DEFAULT_RATES",
    "DEFAULT_CHECKPOINT_FRACS",
    "RATE_PDF_MEDIAN",
    "RATE_PDF_SIGMA",
    "CampaignConfig",
    "parse_config_text",
    "parse_config_file",
    "config_from_mapping",
    "run_id",
    "baseline_id",
    "Cell",
    "sweep_cells",
    "resolve_rates",
    "sample_rate",
    "ResultsStore",
    "BaselineArtifact",
    "ensure_baseline",
    "run_baseline",
    "execute_cell",
    "run_one",
    "run_sweep",
    "crashed_record",
    "write_trace_csv",
    "trace_path",
    "percentile_nearest_rank",
    "Report",
    "build_report",
    "REPORT_COLUMNS",
]


class CampaignError(Exception):
    """Configuration or usage error; maps to CLI exit code 1."""


DEFAULT_RATES = (0.001, 0.005, 0.01, 0.05, 0.1, 1.0)
DEFAULT_CHECKPOINT_FRACS = (1 / 3, 2 / 3)
DEFAULT_ARCHETYPES = ("patch3x3", "fma_sporadic", "cacheline_row")

# activation-rate sampler: log-normal, truncated to (0, 1].  The sigma
# puts about 5% of the mass above 0.3 when the median is 0.01.
RATE_PDF_MEDIAN = 0.01
_Z95 = 1.6448536269514722  # standard normal 95th percentile
RATE_PDF_SIGMA = (math.log(0.3) - math.log(RATE_PDF_MEDIAN)) / _Z95

_QUANT_FORMATS = tuple(f for f in TRAIN_FORMATS if f != "wide")


@dataclass(frozen=True)
class CampaignConfig:
    """Grid axes plus the shared training template.

    The template's seed, format and nan_check are placeholders; each cell
    replaces them.
    """

    train: TrainConfig = field(default_factory=TrainConfig)
    formats: tuple[str, ...] = ("fp16", "bf16", "fp8_e4m3")
    rates: tuple[float, ...] | str = DEFAULT_RATES  # or the string "sampled"
    checkpoint_fracs: tuple[float, ...] = DEFAULT_CHECKPOINT_FRACS
    densities: tuple[float, ...] = (1.0,)
    nan_check_variants: tuple[bool, ...] = (True,)
    seeds_per_cell: int = 10
    seed_base: int = 0
    rank: int = 0
    tile: int = 16
    signatures_path: str | None = None
    archetypes: tuple[str, ...] = DEFAULT_ARCHETYPES
    workers: int = 1
    out_dir: str = "campaign_out"
    sampled_rates_count: int = 6
    rate_pdf_median: float = RATE_PDF_MEDIAN
    rate_pdf_sigma: float = RATE_PDF_SIGMA

    def __post_init__(self):
        if not self.formats:
            raise CampaignError("formats must be non-empty")
        for fmt in self.formats:
            if fmt not in _QUANT_FORMATS:
                raise CampaignError(
                    f"format {fmt!r} not injectable; choose from {_QUANT_FORMATS}"
                )
        if isinstance(self.rates, str):
            if self.rates != "sampled":
                raise CampaignError("rates must be a list or the string 'sampled'")
        else:
            if not self.rates:
                raise CampaignError("rates must be non-empty")
            for r in self.rates:
                if not 0.0 < r <= 1.0:
                    raise CampaignError(f"rate {r} outside (0, 1]")
        if not self.checkpoint_fracs:
            raise CampaignError("checkpoint_fracs must be non-empty")
        for f in self.checkpoint_fracs:
            if not 0.0 <= f < 1.0:
                raise CampaignError(f"checkpoint fraction {f} outside [0, 1)")
        if not self.densities:
            raise CampaignError("densities must be non-empty")
        for d in self.densities:
            if not 0.0 < d <= 1.0:
                raise CampaignError(f"density {d} outside (0, 1]")
        if not self.nan_check_variants:
            raise CampaignError("nan_check_variants must be non-empty")
        if self.seeds_per_cell < 1:
            raise CampaignError("seeds_per_cell must be positive")
        if not 0 <= self.rank < self.train.n_ranks:
            raise CampaignError("rank must name one of the simulated ranks")
        if self.tile < 1:
            raise CampaignError("tile must be positive")
        if self.workers < 1:
            raise CampaignError("workers must be positive")
        if self.sampled_rates_count < 1:
            raise CampaignError("sampled_rates_count must be positive")
        if not 0.0 < self.rate_pdf_median < 1.0:
            raise CampaignError("rate_pdf_median must be in (0, 1)")
        if self.rate_pdf_sigma <= 0.0:
            raise CampaignError("rate_pdf_sigma must be positive")

    def train_config(
        self,
        fmt: str,
        seed: int,
        nan_check: bool = True,
        record_snapshots: bool = False,
    ) -> TrainConfig:
        # snapshots stay in memory only where needed: baselines persist
        # them, faulty runs compute divergence on the fly instead
        return dataclasses.replace(
            self.train,
            train_format=fmt,
            seed=seed,
            nan_check=nan_check,
            record_snapshots=record_snapshots,
        )

    def load_signatures(self) -> tuple[ErrorSignature, ...]:
        if self.signatures_path is not None:
            return tuple(load_signatures(self.signatures_path))
        if not self.archetypes:
            raise CampaignError("no signature source: set signatures or archetypes")
        try:
            return tuple(synth_archetype(name) for name in self.archetypes)
        except ValueError as exc:
            raise CampaignError(str(exc)) from exc

    def seeds(self) -> tuple[int, ...]:
        return tuple(range(self.seed_base, self.seed_base + self.seeds_per_cell))


# ── config files ─────────────────────────────────────────────────────
#
# Flat UTF-8 `key = value` documents.  Blank lines and lines starting
# with '#' are ignored.  Unknown or duplicate keys are errors.


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise CampaignError(f"{source}:{lineno}: expected 'key = value'")
        if key in out:
            raise CampaignError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = val
    return out


def parse_config_file(path) -> dict[str, str]:
    text = Path(path).read_text(encoding="utf-8")
    return parse_config_text(text, source=str(path))


_BOOL_WORDS = {
    "1": True,
    "0": False,
    "true": True,
    "false": False,
    "on": True,
    "off": False,
    "yes": True,
    "no": False,
}


def _bool(s: str) -> bool:
    try:
        return _BOOL_WORDS[s.lower()]
    except KeyError:
        raise ValueError(f"not a boolean: {s!r}")


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(p) for p in s.split(",") if p.strip() != "")


def _strs(s: str) -> tuple[str, ...]:
    return tuple(p.strip() for p in s.split(",") if p.strip() != "")


def _bools(s: str) -> tuple[bool, ...]:
    return tuple(_bool(p.strip()) for p in s.split(",") if p.strip() != "")


def _opt_int(s: str) -> int | None:
    return None if s.lower() == "none" else int(s)


def _opt_float(s: str) -> float | None:
    return None if s.lower() == "none" else float(s)


def _opt_str(s: str) -> str | None:
    return None if s.lower() == "none" else s


def _rates(s: str):
    return "sampled" if s.strip().lower() == "sampled" else _floats(s)


# key -> (section, field, parser)
_CONFIG_SCHEMA: dict[str, tuple[str, str, Callable]] = {
    # model
    "n_layers": ("model", "n_layers", int),
    "n_heads": ("model", "n_heads", int),
    "d_model": ("model", "d_model", int),
    "d_ff": ("model", "d_ff", int),
    "seq_len": ("model", "seq_len", int),
    "vocab_size": ("model", "vocab_size", int),
    "init_seed": ("model", "init_seed", int),
    "ln_eps": ("model", "ln_eps", float),
    "wide_dtype": ("model", "wide_dtype", str),
    # training template
    "total_steps": ("train", "total_steps", int),
    "schedule_total": ("train", "schedule_total", _opt_int),
    "warmup_steps": ("train", "warmup_steps", int),
    "peak_lr": ("train", "peak_lr", float),
    "min_lr": ("train", "min_lr", float),
    "batch_per_rank": ("train", "batch_per_rank", int),
    "n_ranks": ("train", "n_ranks", int),
    "loss_scale_init": ("train", "loss_scale_init", _opt_float),
    "loss_scale_growth_interval": ("train", "loss_scale_growth_interval", int),
    "grad_clip": ("train", "grad_clip", float),
    "adam_beta1": ("train", "adam_beta1", float),
    "adam_beta2": ("train", "adam_beta2", float),
    "adam_eps": ("train", "adam_eps", float),
    "divergence_interval": ("train", "divergence_interval", int),
    "eval_max_windows": ("train", "eval_max_windows", _opt_int),
    "data_path": ("train", "data_path", _opt_str),
    # campaign axes
    "formats": ("campaign", "formats", _strs),
    "rates": ("campaign", "rates", _rates),
    "checkpoint_fracs": ("campaign", "checkpoint_fracs", _floats),
    "densities": ("campaign", "densities", _floats),
    "nan_check_variants": ("campaign", "nan_check_variants", _bools),
    "seeds_per_cell": ("campaign", "seeds_per_cell", int),
    "seed_base": ("campaign", "seed_base", int),
    "rank": ("campaign", "rank", int),
    "tile": ("campaign", "tile", int),
    "signatures": ("campaign", "signatures_path", _opt_str),
    "archetypes": ("campaign", "archetypes", _strs),
    "workers": ("campaign", "workers", int),
    "out": ("campaign", "out_dir", str),
    "sampled_rates_count": ("campaign", "sampled_rates_count", int),
    "rate_pdf_median": ("campaign", "rate_pdf_median", float),
    "rate_pdf_sigma": ("campaign", "rate_pdf_sigma", float),
}


def config_from_mapping(raw: Mapping[str, str]) -> CampaignConfig:
    """Build a CampaignConfig from flat key/value strings.

    Unknown keys and malformed values are usage errors, not warnings; a
    config file with a typo must fail loudly.
    """
    model_kw: dict = {}
    train_kw: dict = {}
    camp_kw: dict = {}
    buckets = {"model": model_kw, "train": train_kw, "campaign": camp_kw}
    for key, sval in raw.items():
        entry = _CONFIG_SCHEMA.get(key)
        if entry is None:
            raise CampaignError(f"unknown config key {key!r}")
        section, fname, parser = entry
        try:
            buckets[section][fname] = parser(sval)
        except (ValueError, TypeError) as exc:
            raise CampaignError(f"bad value for {key!r}: {exc}") from exc
    try:
        base_train = TrainConfig()
        model_cfg = dataclasses.replace(base_train.model, **model_kw)
        train_cfg = dataclasses.replace(base_train, model=model_cfg, **train_kw)
        return CampaignConfig(train=train_cfg, **camp_kw)
    except CampaignError:
        raise
    except (ValueError, TypeError) as exc:
        raise CampaignError(str(exc)) from exc


# ── run identity and grid ────────────────────────────────────────────


def run_id(fmt: str, rate: float, frac: float, density: float, nan_check: bool, seed: int) -> str:
    return f"{fmt}_r{rate:g}_cf{frac:g}_d{density:g}_nc{int(nan_check)}_s{seed}"


def baseline_id(fmt: str, seed: int) -> str:
    return f"baseline_{fmt}_s{seed}"


class Cell(NamedTuple):
    fmt: str
    rate: float
    frac: float
    density: float
    nan_check: bool
    seed: int

    @property
    def id(self) -> str:
        return run_id(*self)


def sample_rate(
    rng: np.random.Generator,
    median: float = RATE_PDF_MEDIAN,
    sigma: float = RATE_PDF_SIGMA,
) -> float:
    """One activation-rate draw from the truncated log-normal on (0, 1]."""
    mu = math.log(median)
    while True:
        r = math.exp(rng.normal(mu, sigma))
        if r <= 1.0:
            return r


def resolve_rates(cfg: CampaignConfig) -> tuple[float, ...]:
    """The sweep's rate axis; draws it when configured as "sampled".

    Sampled draws come from a dedicated stream so they are identical on
    every invocation of the same campaign, which keeps resume sound.
    """
    if not isinstance(cfg.rates, str):
        return tuple(cfg.rates)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed_base, 3]))
    return tuple(
        sample_rate(rng, cfg.rate_pdf_median, cfg.rate_pdf_sigma)
        for _ in range(cfg.sampled_rates_count)
    )


def sweep_cells(cfg: CampaignConfig) -> list[Cell]:
    """Full Cartesian grid crossed with the seed block, in stable order."""
    rates = resolve_rates(cfg)
    return [
        Cell(fmt, rate, frac, density, nan_check, seed)
        for fmt in cfg.formats
        for rate in rates
        for frac in cfg.checkpoint_fracs
        for density in cfg.densities
        for nan_check in cfg.nan_check_variants
        for seed in cfg.seeds()
    ]


# ── results store ────────────────────────────────────────────────────


class ResultsStore:
    """Append-only line-delimited JSON store of RunRecords, keyed by id."""

    def __init__(self, path):
        self.path = Path(path)
        self._records: list[RunRecord] = []
        self._ids: set[str] = set()
        if self.path.exists():
            with open(self.path, "r", encoding="utf-8") as fh:
                for line in fh:
                    line = line.strip()
                    if not line:
                        continue
                    rec = RunRecord.from_json(json.loads(line))
                    if rec.run_id in self._ids:
                        raise CampaignError(
                            f"{self.path}: duplicate run id {rec.run_id!r}"
                        )
                    self._records.append(rec)
                    self._ids.add(rec.run_id)

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, rid: str) -> bool:
        return rid in self._ids

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(self._ids)

    def records(self) -> list[RunRecord]:
        return list(self._records)

    def append(self, record: RunRecord) -> None:
        if record.run_id in self._ids:
            raise CampaignError(f"run id {record.run_id!r} already stored")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.to_json()) + "\n")
            fh.flush()
        self._records.append(record)
        self._ids.add(record.run_id)


# ── baselines ────────────────────────────────────────────────────────


@dataclass(frozen=True)
class BaselineArtifact:
    """Healthy fault-free twin for one (format, seed): the reference PPL,
    the final weight norm feeding the drift threshold, and on-disk
    snapshots for divergence lookups."""

    run_id: str
    fmt: str
    seed: int
    ppl: float
    initial_ppl: float
    final_norm: float
    snapshot_steps: tuple[int, ...]
    npz_path: str
    divergence_interval: int

    def loader(self) -> Callable[[int], np.ndarray]:
        data = np.load(self.npz_path)
        interval = self.divergence_interval

        def load(index: int) -> np.ndarray:
            step = index * interval
            key = f"step_{step}"
            if key not in data:
                raise KeyError(f"baseline {self.run_id} has no snapshot at step {step}")
            return data[key]

        return load


def _baseline_paths(out_dir, fmt: str, seed: int) -> tuple[Path, Path]:
    base = Path(out_dir) / "baselines"
    return base / f"{fmt}_s{seed}.npz", base / f"{fmt}_s{seed}.json"


def _check_baseline_health(final_ppl, early_stop_reason, vocab_size: int, rid: str) -> None:
    if final_ppl is None or not math.isfinite(final_ppl):
        raise CampaignError(f"baseline {rid} unhealthy: no finite PPL")
    if early_stop_reason is not None:
        raise CampaignError(f"baseline {rid} unhealthy: stopped early ({early_stop_reason})")
    if final_ppl >= vocab_size:
        raise CampaignError(
            f"baseline {rid} unhealthy: PPL {final_ppl:.2f} not below vocab size {vocab_size}"
        )


def ensure_baseline(cfg: CampaignConfig, fmt: str, seed: int) -> BaselineArtifact:
    """Load the (format, seed) baseline, training and persisting it if absent.

    An unhealthy baseline aborts: every downstream comparison would be
    meaningless.
    """
    npz_path, meta_path = _baseline_paths(cfg.out_dir, fmt, seed)
    rid = baseline_id(fmt, seed)
    tcfg = cfg.train_config(fmt, seed, nan_check=True, record_snapshots=True)
    if npz_path.exists() and meta_path.exists():
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        if meta["train_config"] != _train_config_json(tcfg):
            raise CampaignError(
                f"baseline {rid} on disk was trained with a different config; "
                f"remove {npz_path.parent} or change the output directory"
            )
        return BaselineArtifact(
            run_id=meta["run_id"],
            fmt=fmt,
            seed=seed,
            ppl=meta["ppl"],
            initial_ppl=meta["initial_ppl"],
            final_norm=meta["final_norm"],
            snapshot_steps=tuple(meta["snapshot_steps"]),
            npz_path=str(npz_path),
            divergence_interval=meta["divergence_interval"],
        )

    result = train_run(tcfg)
    _check_baseline_health(
        result.final_ppl, result.early_stop_reason, tcfg.model.vocab_size, rid
    )
    final_norm = float(np.linalg.norm(flat_weights(result.params, tcfg.model)))
    steps = tuple(s for s, _ in result.snapshots)
    npz_path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(npz_path, **{f"step_{s}": w for s, w in result.snapshots})
    meta = {
        "run_id": rid,
        "format": fmt,
        "seed": seed,
        "ppl": result.final_ppl,
        "initial_ppl": result.initial_ppl,
        "final_norm": final_norm,
        "snapshot_steps": list(steps),
        "divergence_interval": tcfg.divergence_interval,
        "train_config": _train_config_json(tcfg),
    }
    meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return BaselineArtifact(
        run_id=rid,
        fmt=fmt,
        seed=seed,
        ppl=result.final_ppl,
        initial_ppl=result.initial_ppl,
        final_norm=final_norm,
        snapshot_steps=steps,
        npz_path=str(npz_path),
        divergence_interval=tcfg.divergence_interval,
    )


def _train_config_json(tcfg: TrainConfig) -> dict:
    return dataclasses.asdict(tcfg)


def run_baseline(cfg: CampaignConfig, seed: int) -> dict[str, BaselineArtifact]:
    """Baselines for one seed across every configured format."""
    return {fmt: ensure_baseline(cfg, fmt, seed) for fmt in cfg.formats}


# ── single runs and sweeps ───────────────────────────────────────────


def trace_path(out_dir, rid: str) -> Path:
    return Path(out_dir) / "traces" / f"{rid}.csv"


_TRACE_COLUMNS = (
    "step",
    "loss",
    "loss_scale",
    "skipped",
    "nan_in_loss",
    "nan_in_activations",
    "nan_in_weights",
    "fault_activated",
    "divergence",
)


def write_trace_csv(path, record: RunRecord) -> None:
    """Per-step telemetry; the divergence column fills only on the
    snapshot grid (the state after step k lands on grid point k+1)."""
    div = dict(record.divergence)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_TRACE_COLUMNS)
        for s in record.steps:
            after = s.step + 1
            w.writerow(
                [
                    s.step,
                    s.loss,
                    s.loss_scale,
                    int(s.skipped),
                    int(s.nan_in_loss),
                    int(s.nan_in_activations),
                    int(s.nan_in_weights),
                    int(s.fault_active),
                    div[after] if after in div else "",
                ]
            )


def _build_site(cfg: CampaignConfig, cell: Cell, total_steps: int) -> FaultSiteTuple:
    return FaultSiteTuple(
        rank=cfg.rank,
        checkpoint=int(round(cell.frac * total_steps)),
        rate=cell.rate,
        density=cell.density,
        tile=cfg.tile,
        signatures=cfg.load_signatures(),
    )


def execute_cell(cfg: CampaignConfig, cell: Cell, baseline: BaselineArtifact):
    """Execute one cell seed against its baseline; returns the classified
    record plus the raw training result (for weight persistence)."""
    tcfg = cfg.train_config(cell.fmt, cell.seed, cell.nan_check)
    site = _build_site(cfg, cell, tcfg.total_steps)
    result = train_run(tcfg, site, baseline_loader=baseline.loader())
    rec = build_run_record(
        cell.id,
        result,
        site,
        baseline_ppl=baseline.ppl,
        baseline_final_norm=baseline.final_norm,
        checkpoint_frac=cell.frac,
    )
    return rec, result


def run_one(cfg: CampaignConfig, cell: Cell, baseline: BaselineArtifact) -> RunRecord:
    """Execute one cell seed against its baseline and classify it."""
    rec, _ = execute_cell(cfg, cell, baseline)
    return rec


def crashed_record(
    rid: str,
    tcfg: TrainConfig,
    site: FaultSiteTuple | None,
    frac: float | None,
    baseline_ppl: float,
    error: str,
) -> RunRecord:
    """Record for a run whose execution itself failed."""
    return RunRecord(
        run_id=rid,
        train_config=tcfg,
        fault=site,
        checkpoint_frac=frac,
        baseline_ppl=baseline_ppl,
        initial_ppl=None,
        final_ppl=None,
        steps=[],
        nan_event_steps=[],
        n_nan_loss_steps=0,
        n_nan_activation_steps=0,
        n_nan_weight_steps=0,
        n_skipped_steps=0,
        n_corruption_events=0,
        n_elements_corrupted=0,
        divergence=[],
        early_stop_step=None,
        early_stop_reason="exception",
        outcome=Outcome.CRASHED,
        mode=Mode.CRASHED,
        div_delta=0.0,
        div_rank_correlation=0.0,
        div_degenerate=True,
        error=error,
    )


def _sweep_worker(args: tuple[CampaignConfig, Cell, BaselineArtifact]) -> dict:
    """One sweep job.  Run failures become Crashed records; trace I/O
    errors propagate so the parent aborts with a resumable store."""
    cfg, cell, baseline = args
    try:
        rec = run_one(cfg, cell, baseline)
    except Exception as exc:  # noqa: BLE001 - any run failure is a Crashed record
        tcfg = cfg.train_config(cell.fmt, cell.seed, cell.nan_check)
        site = None
        try:
            site = _build_site(cfg, cell, tcfg.total_steps)
        except Exception:
            pass
        rec = crashed_record(
            cell.id, tcfg, site, cell.frac, baseline.ppl, f"{type(exc).__name__}: {exc}"
        )
    write_trace_csv(trace_path(cfg.out_dir, cell.id), rec)
    return rec.to_json()


def run_sweep(
    cfg: CampaignConfig,
    progress: Callable[[int, int, str], None] | None = None,
) -> ResultsStore:
    """Execute the grid, skipping run ids already in the results store.

    Individual run failures never abort the sweep; they are stored as
    Crashed records with the error text.  I/O failures do abort, leaving
    the append-only store valid for resume.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    store = ResultsStore(out / "results.jsonl")
    cells = sweep_cells(cfg)
    pending = [c for c in cells if c.id not in store]
    needed = sorted({(c.fmt, c.seed) for c in pending})
    baselines = {key: ensure_baseline(cfg, *key) for key in needed}
    jobs = [(cfg, c, baselines[(c.fmt, c.seed)]) for c in pending]
    total = len(jobs)
    if cfg.workers == 1:
        for i, job in enumerate(jobs):
            if progress is not None:
                progress(i, total, job[1].id)
            store.append(RunRecord.from_json(_sweep_worker(job)))
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            for i, d in enumerate(pool.map(_sweep_worker, jobs)):
                if progress is not None:
                    progress(i, total, d["run_id"])
                store.append(RunRecord.from_json(d))
    return store


# ── reporting ────────────────────────────────────────────────────────


def percentile_nearest_rank(values: Sequence[float], p: float) -> float:
    """Nearest-rank percentile: the smallest value with at least p% of
    the sample at or below it."""
    if not values:
        raise ValueError("no values")
    if not 0.0 < p <= 100.0:
        raise ValueError("percentile must be in (0, 100]")
    ordered = sorted(values)
    k = max(1, math.ceil(p / 100.0 * len(ordered)))
    return ordered[k - 1]


REPORT_COLUMNS = (
    "format",
    "rate",
    "n_runs",
    "frac_unchanged",
    "frac_changed",
    "frac_crashed",
    "frac_mode_benign",
    "frac_mode_spike_recover",
    "frac_mode_spike_degrade",
    "frac_mode_silent_degradation",
    "frac_mode_gradual_drift",
    "frac_mode_crashed",
    "frac_nan_loss",
    "frac_nan_loss_changed",
    "frac_nan_activations",
    "frac_nan_activations_changed",
    "frac_nan_weights",
    "frac_nan_weights_changed",
    "ppl_p50",
    "ppl_p95",
)

_MODE_COLUMN = {
    Mode.BENIGN: "frac_mode_benign",
    Mode.SPIKE_RECOVER: "frac_mode_spike_recover",
    Mode.SPIKE_DEGRADE: "frac_mode_spike_degrade",
    Mode.SILENT_DEGRADATION: "frac_mode_silent_degradation",
    Mode.GRADUAL_DRIFT: "frac_mode_gradual_drift",
    Mode.CRASHED: "frac_mode_crashed",
}


@dataclass(frozen=True)
class Report:
    rows: tuple[dict, ...]

    def to_text(self) -> str:
        if not self.rows:
            return "no data\n"
        lines = []
        for row in self.rows:
            lines.append(
                f"format={row['format']} rate={row['rate']:g} runs={row['n_runs']}"
            )
            lines.append(
                "  outcomes: "
                f"unchanged {row['frac_unchanged']:.3f}  "
                f"changed {row['frac_changed']:.3f}  "
                f"crashed {row['frac_crashed']:.3f}"
            )
            lines.append(
                "  modes: "
                f"benign {row['frac_mode_benign']:.3f}  "
                f"spike_recover {row['frac_mode_spike_recover']:.3f}  "
                f"spike_degrade {row['frac_mode_spike_degrade']:.3f}  "
                f"silent_degradation {row['frac_mode_silent_degradation']:.3f}  "
                f"gradual_drift {row['frac_mode_gradual_drift']:.3f}  "
                f"crashed {row['frac_mode_crashed']:.3f}"
            )
            lines.append(
                "  nonfinite events: "
                f"loss {row['frac_nan_loss']:.3f} (ppl-changed {row['frac_nan_loss_changed']:.3f})  "
                f"activations {row['frac_nan_activations']:.3f} "
                f"(ppl-changed {row['frac_nan_activations_changed']:.3f})  "
                f"weights {row['frac_nan_weights']:.3f} "
                f"(ppl-changed {row['frac_nan_weights_changed']:.3f})"
            )
            p50 = row["ppl_p50"]
            p95 = row["ppl_p95"]
            if p50 is None:
                lines.append("  ppl of non-crashed: none completed")
            else:
                lines.append(f"  ppl of non-crashed: p50 {p50:.3f}  p95 {p95:.3f}")
            lines.append("")
        return "\n".join(lines)

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(REPORT_COLUMNS)
            for row in self.rows:
                w.writerow([row[c] if row[c] is not None else "" for c in REPORT_COLUMNS])


def build_report(records: Iterable[RunRecord]) -> Report:
    """Aggregate records per (format, rate).  Pure: same records, same report."""
    groups: dict[tuple[str, float], list[RunRecord]] = {}
    for rec in records:
        rate = rec.rate if rec.rate is not None else 0.0
        groups.setdefault((rec.format, rate), []).append(rec)
    rows = []
    for (fmt, rate) in sorted(groups):
        cell = groups[(fmt, rate)]
        n = len(cell)
        row: dict = {"format": fmt, "rate": rate, "n_runs": n}
        for outcome, col in (
            (Outcome.UNCHANGED, "frac_unchanged"),
            (Outcome.CHANGED, "frac_changed"),
            (Outcome.CRASHED, "frac_crashed"),
        ):
            row[col] = sum(1 for r in cell if r.outcome is outcome) / n
        for mode, col in _MODE_COLUMN.items():
            row[col] = sum(1 for r in cell if r.mode is mode) / n
        for attr, col in (
            ("n_nan_loss_steps", "frac_nan_loss"),
            ("n_nan_activation_steps", "frac_nan_activations"),
            ("n_nan_weight_steps", "frac_nan_weights"),
        ):
            hit = [r for r in cell if getattr(r, attr) > 0]
            row[col] = len(hit) / n
            row[col + "_changed"] = (
                sum(1 for r in hit if r.outcome is Outcome.CHANGED) / n
            )
        ppls = [
            r.final_ppl
            for r in cell
            if r.outcome is not Outcome.CRASHED and r.final_ppl is not None
        ]
        row["ppl_p50"] = percentile_nearest_rank(ppls, 50.0) if ppls else None
        row["ppl_p95"] = percentile_nearest_rank(ppls, 95.0) if ppls else None
        rows.append(row)
    return Report(rows=tuple(rows))
