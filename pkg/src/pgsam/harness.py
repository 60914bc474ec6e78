"""Run orchestration: configs, training, evaluation reports, ablations and sweeps."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .data import (
    FIXED_TEMPLATES,
    PROMPT_MODES,
    REPORT_TEMPLATE,
    SEQUENCES,
    DatasetIndex,
    SampleBatch,
    stack_samples,
)
from .estimator import PGSAMSegmenter, SampleSegmentation
from .exceptions import CheckpointMismatchError, ConfigurationError, TrainingDivergedError, ValidationError
from .metrics import ConfusionCounts, accuracy, dsc, hd95, recall

logger = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "PGSAM_OUTPUT_ROOT"
SAMPLE_FRACTIONS = (0.05, 0.1, 0.2, 0.3, 1.0)


def output_root() -> Path:
    """Base directory for relative output paths (``$PGSAM_OUTPUT_ROOT`` or ``./runs``)."""
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


def resolve_output(path) -> Path:
    path = Path(path)
    return path if path.is_absolute() else output_root() / path


# ------------------------------------------------------------------ config


@dataclass
class RunConfig:
    """Flat run configuration; every field maps to one ``key = value`` line."""

    image_size: int = 224
    patch_size: int = 16
    embed_dim: int = 64
    encoder_depth: int = 2
    encoder_heads: int = 4
    lora_rank: int = 5
    decoder_depth: int = 2
    decoder_heads: int = 4
    use_cam: bool = True
    use_tpm: bool = True
    use_cmattn: bool = True
    use_lmca: bool = True
    prompt_mode: str = "expert"
    text_provider: str = "hash"
    learning_rate: float = 1e-4
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    max_epochs: int = 300
    batch_size: int = 8
    patience: int = 10
    loss_w: float = 0.5
    loss_beta: float = 0.5
    augment: bool = False
    sample_fraction: float = 1.0
    seed: int = 0
    pretrained_source: str | None = None

    def __post_init__(self):
        if not 0.0 < self.sample_fraction <= 1.0:
            raise ConfigurationError(f"sample_fraction must lie in (0, 1], got {self.sample_fraction}")
        if self.prompt_mode not in PROMPT_MODES:
            raise ConfigurationError(f"prompt_mode must be one of {PROMPT_MODES}, got {self.prompt_mode!r}")
        if self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigurationError("max_epochs and batch_size must be positive")

    def estimator_params(self) -> dict:
        params = asdict(self)
        params.pop("sample_fraction")
        return params

    def make_estimator(self, **overrides) -> PGSAMSegmenter:
        return PGSAMSegmenter(**{**self.estimator_params(), **overrides})

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name} = {'none' if value is None else str(value).lower() if isinstance(value, bool) else value}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def loads(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        """Parse ``key = value`` lines; ``#`` starts a comment."""
        values = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            values[key] = value
        return (base or cls()).updated(values)

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.loads(Path(path).read_text(), base)

    def updated(self, values: dict) -> "RunConfig":
        """Copy with ``values`` applied; string values are coerced to the field type."""
        known = {f.name: f for f in fields(self)}
        parsed = {}
        for key, value in values.items():
            if key not in known:
                raise ConfigurationError(f"unknown config key {key!r}")
            parsed[key] = _coerce(key, value, type(getattr(RunConfig(), key))) if isinstance(value, str) else value
        return replace(self, **parsed)


def _coerce(key, value: str, kind):
    text = value.strip()
    try:
        if kind is bool:
            if text.lower() in ("true", "1", "yes", "on"):
                return True
            if text.lower() in ("false", "0", "no", "off"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
    except ValueError:
        raise ConfigurationError(f"{key}: cannot parse {value!r} as {kind.__name__}") from None
    return None if text.lower() in ("none", "") else text


PRESETS = {
    # Desk scale: 30 epochs; the short schedule needs a larger step than the long one.
    "desk": {"max_epochs": 30, "learning_rate": 1e-3},
    "full": {"max_epochs": 300, "learning_rate": 1e-4},
}


def preset(name: str, **overrides) -> RunConfig:
    if name not in PRESETS:
        raise ConfigurationError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return RunConfig().updated({**PRESETS[name], **overrides})


# ------------------------------------------------------------------- data


def load_split(dataset: DatasetIndex, split: str, sites=None) -> SampleBatch:
    samples = [e.load() for e in dataset.split(split)]
    if sites is not None:
        samples = [s for s in samples if s[0].site_id in sites]
    return stack_samples(samples)


def subset_indices(n: int, fraction: float, seed: int) -> np.ndarray:
    """First ``round(fraction * n)`` entries of one seeded permutation, so smaller fractions nest."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigurationError(f"fraction must lie in (0, 1], got {fraction}")
    k = int(round(fraction * n))
    if k == 0:
        raise ConfigurationError(f"fraction {fraction} of {n} training samples selects nothing")
    return np.sort(np.random.default_rng([seed, 104729]).permutation(n)[:k])


def _take(batch: SampleBatch, idx) -> SampleBatch:
    idx = list(idx)
    return SampleBatch(
        batch.channels[idx],
        batch.available[idx],
        batch.masks[idx],
        [batch.reports[i] for i in idx],
        [batch.slice_ids[i] for i in idx],
        [batch.site_ids[i] for i in idx],
    )


# ----------------------------------------------------------------- training


@dataclass
class TrainResult:
    estimator: PGSAMSegmenter
    history: list
    n_train: int
    checkpoint: Path | None = None
    last_checkpoint: Path | None = None


def train(config: RunConfig, dataset: DatasetIndex, out_dir=None, resume=None, prior=None,
          variance_table=None, callback=None) -> TrainResult:
    """Fit on the train split (subsampled by ``sample_fraction``), selecting on val.

    ``prior`` and ``variance_table`` default to ones built from the training
    masks. ``callback(estimator, record)`` runs after every epoch. Writes ``last.pt`` after every epoch, ``best.pt`` at the end and one JSON
    line per epoch to ``train_log.jsonl`` when ``out_dir`` is given. ``resume``
    continues from a ``last.pt`` written by an interrupted run.
    """
    train_batch = load_split(dataset, "train")
    if len(train_batch.channels) == 0:
        raise ConfigurationError("dataset has no training samples")
    train_batch = _take(train_batch, subset_indices(len(train_batch.channels), config.sample_fraction, config.seed))
    val_batch = load_split(dataset, "val")
    eval_set = None
    if len(val_batch.channels):
        eval_set = (val_batch.channels, val_batch.masks, val_batch.reports, val_batch.available)

    out = Path(out_dir) if out_dir is not None else None
    log_handle = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        config.save(out / "config.txt")
        log_handle = open(out / "train_log.jsonl", "a" if resume else "w")

    def on_epoch(est, record):
        if log_handle is not None:
            log_handle.write(json.dumps(record, sort_keys=True) + "\n")
            log_handle.flush()
            est.save(out / "last.pt")
        if callback is not None:
            callback(est, record)

    if resume is not None:
        est = PGSAMSegmenter.load(resume, warm_start=True)
    else:
        est = config.make_estimator()
    try:
        est.fit(
            train_batch.channels,
            train_batch.masks,
            train_batch.reports,
            available=train_batch.available,
            eval_set=eval_set,
            prior=prior,
            variance_table=variance_table,
            callback=on_epoch,
        )
    except TrainingDivergedError as err:
        if out is not None:
            (out / "diverged.json").write_text(json.dumps(err.snapshot, sort_keys=True, indent=2))
        raise
    finally:
        if log_handle is not None:
            log_handle.close()
    result = TrainResult(est, list(est.history_), len(train_batch.channels))
    if out is not None:
        est.save(out / "best.pt")
        result.checkpoint, result.last_checkpoint = out / "best.pt", out / "last.pt"
    return result


# --------------------------------------------------------------- evaluation

ROW_FIELDS = ("site", "modality", "slice_id", "dsc", "hd95", "acc", "rec")
TABLE_FIELDS = ("site", "modality", "n", "dsc", "hd95", "acc", "rec", "hd95_undefined", "rec_undefined")


def modality_names(n: int) -> list[str]:
    return list(SEQUENCES) if n == len(SEQUENCES) else [f"seq{i}" for i in range(n)]


def _mean(values) -> float:
    values = [v for v in values if not math.isnan(v)]
    return float(np.mean(values)) if values else math.nan


@dataclass
class MetricReport:
    """Per-slice metric rows plus per-(site, modality) aggregates."""

    split: str
    rows: list = field(default_factory=list)
    table: list = field(default_factory=list)

    @property
    def mean_dsc(self) -> float:
        return _mean([r["dsc"] for r in self.rows])

    def dsc_by(self) -> dict:
        return {(t["site"], t["modality"]): t["dsc"] for t in self.table}

    @staticmethod
    def _fmt(value) -> str:
        if isinstance(value, float):
            return "NA" if math.isnan(value) else f"{value:.6f}"
        return str(value)

    def _csv(self, columns, records) -> str:
        buf = io.StringIO()
        buf.write(f"# split={self.split} n_slices={len({r['slice_id'] for r in self.rows})} n_rows={len(self.rows)}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([self._fmt(rec[c]) for c in columns])
        return buf.getvalue()

    def rows_csv(self) -> str:
        return self._csv(ROW_FIELDS, self.rows)

    def table_csv(self) -> str:
        return self._csv(TABLE_FIELDS, self.table)

    def to_json(self) -> str:
        def clean(rec):
            return {k: (None if isinstance(v, float) and math.isnan(v) else round(v, 6) if isinstance(v, float) else v)
                    for k, v in rec.items()}

        payload = {
            "split": self.split,
            "n_rows": len(self.rows),
            "rows": [clean(r) for r in self.rows],
            "table": [clean(t) for t in self.table],
        }
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"

    def write(self, out_dir, stem="metrics") -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "rows": out / f"{stem}_rows.csv",
            "table": out / f"{stem}_table.csv",
            "json": out / f"{stem}.json",
        }
        paths["rows"].write_text(self.rows_csv())
        paths["table"].write_text(self.table_csv())
        paths["json"].write_text(self.to_json())
        return paths


def build_report(split: str, pred: np.ndarray, batch: SampleBatch) -> MetricReport:
    """Metric rows for every available (slice, sequence) pair of ``pred[n, c, H, W]``."""
    names = modality_names(batch.channels.shape[1]) if len(batch.channels) else list(SEQUENCES)
    rows = []
    order = sorted(range(len(batch.slice_ids)), key=lambda i: (batch.site_ids[i], batch.slice_ids[i]))
    for i in order:
        for s, name in enumerate(names):
            if not batch.available[i, s]:
                continue
            counts = ConfusionCounts.from_masks(pred[i, s], batch.masks[i])
            rows.append(
                {
                    "site": batch.site_ids[i],
                    "modality": name,
                    "slice_id": batch.slice_ids[i],
                    "dsc": dsc(pred[i, s], batch.masks[i]),
                    "hd95": hd95(pred[i, s], batch.masks[i]),
                    "acc": accuracy(counts),
                    "rec": recall(counts),
                }
            )
    table = []
    for site in sorted({r["site"] for r in rows}):
        for name in names:
            sel = [r for r in rows if r["site"] == site and r["modality"] == name]
            if not sel:
                continue
            table.append(
                {
                    "site": site,
                    "modality": name,
                    "n": len(sel),
                    "dsc": _mean([r["dsc"] for r in sel]),
                    "hd95": _mean([r["hd95"] for r in sel]),
                    "acc": _mean([r["acc"] for r in sel]),
                    "rec": _mean([r["rec"] for r in sel]),
                    "hd95_undefined": sum(math.isnan(r["hd95"]) for r in sel),
                    "rec_undefined": sum(math.isnan(r["rec"]) for r in sel),
                }
            )
    return MetricReport(split, rows, table)


def load_checkpoint(checkpoint, text_provider: str | None = None) -> PGSAMSegmenter:
    """Load an estimator, refusing when ``text_provider`` differs from the one it was trained with."""
    if isinstance(checkpoint, PGSAMSegmenter):
        est = checkpoint
        if text_provider is not None and est.use_tpm and est.text_provider != text_provider:
            raise CheckpointMismatchError(f"model uses text provider {est.text_provider!r}, not {text_provider!r}")
        return est
    overrides = {"text_provider": text_provider} if text_provider is not None else {}
    return PGSAMSegmenter.load(checkpoint, **overrides)


def evaluate(checkpoint, dataset: DatasetIndex, split: str = "test", out_dir=None, text_provider=None) -> MetricReport:
    est = load_checkpoint(checkpoint, text_provider)
    batch = load_split(dataset, split)
    if len(batch.channels) and batch.channels.shape[1] != est.n_sequences:
        raise ValidationError(
            f"checkpoint expects {est.n_sequences} sequences, split {split!r} has {batch.channels.shape[1]}"
        )
    pred = est.predict(batch.channels, batch.reports) if len(batch.channels) else np.zeros((0,))
    report = build_report(split, pred, batch)
    if out_dir is not None:
        report.write(out_dir)
    return report


# ------------------------------------------------------------------ ablation

GRID = ((False, False), (False, True), (True, False), (True, True))


def prompt_label(mode: str) -> str:
    if mode == "none":
        return "None"
    if mode == "expert":
        return REPORT_TEMPLATE.format(pos="[pos]", size="[xx]")
    return FIXED_TEMPLATES[mode]


@dataclass
class AblationReport:
    runs: list
    module_table: list
    prompt_table: list

    @staticmethod
    def _csv(columns, records) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(columns)
        for rec in records:
            writer.writerow([MetricReport._fmt(rec.get(c, math.nan)) for c in columns])
        return buf.getvalue()

    def sites(self) -> list:
        return sorted({k for t in self.module_table + self.prompt_table for k in t if k.startswith("site")})

    def module_csv(self) -> str:
        return self._csv(["CAM", "TPM", "Modal", *self.sites()], self.module_table)

    def prompt_csv(self) -> str:
        return self._csv(["Text Prompts", "Modal", *self.sites()], self.prompt_table)

    def cell_mean(self, use_cam: bool, use_tpm: bool, prompt_mode: str = "expert") -> float:
        """Mean test DSC over seeds for one grid cell."""
        sel = [
            r["mean_dsc"]
            for r in self.runs
            if r["use_cam"] == use_cam and r["use_tpm"] == use_tpm and (not use_tpm or r["prompt_mode"] == prompt_mode)
        ]
        return float(np.mean(sel)) if sel else math.nan

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"modules": out / "ablation_modules.csv", "prompts": out / "ablation_prompts.csv", "runs": out / "ablation_runs.jsonl"}
        paths["modules"].write_text(self.module_csv())
        paths["prompts"].write_text(self.prompt_csv())
        paths["runs"].write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in self.runs))
        return paths


def _seed_average(reports) -> dict:
    """Per-(site, modality) DSC averaged across seeds."""
    merged = {}
    for rep in reports:
        for key, value in rep.dsc_by().items():
            merged.setdefault(key, []).append(value)
    return {k: _mean(v) for k, v in merged.items()}


def _layout(averages: dict, lead: dict) -> list:
    rows = []
    sites = sorted({s for s, _ in averages})
    modalities = [m for m in SEQUENCES if any(mm == m for _, mm in averages)]
    modalities += sorted({m for _, m in averages} - set(modalities))
    for m in modalities:
        row = {**lead, "Modal": m}
        for s in sites:
            row[s] = averages.get((s, m), math.nan)
        rows.append(row)
    return rows


def ablate(config: RunConfig, dataset: DatasetIndex, seeds=(0, 1, 2), prompt_modes=PROMPT_MODES, prompt_seeds=None,
           out_dir=None) -> AblationReport:
    """Train and test every CAM/TPM cell and every prompt mode under shared seeds.

    The full model in expert mode is shared between the module grid and the
    prompt list, so it is trained once per seed.
    """
    prompt_seeds = tuple(seeds if prompt_seeds is None else prompt_seeds)
    cache = {}

    def run(cfg: RunConfig):
        key = cfg.dumps()
        if key not in cache:
            logger.info("ablation run cam=%s tpm=%s prompt=%s seed=%d", cfg.use_cam, cfg.use_tpm, cfg.prompt_mode, cfg.seed)
            est = train(cfg, dataset).estimator
            cache[key] = (cfg, evaluate(est, dataset, "test"))
        return cache[key][1]

    module_table = []
    for use_cam, use_tpm in GRID:
        reps = [run(replace(config, use_cam=use_cam, use_tpm=use_tpm, prompt_mode="expert", seed=s)) for s in seeds]
        module_table += _layout(_seed_average(reps), {"CAM": "yes" if use_cam else "no", "TPM": "yes" if use_tpm else "no"})
    prompt_table = []
    for mode in prompt_modes:
        reps = [run(replace(config, use_cam=True, use_tpm=True, prompt_mode=mode, seed=s)) for s in prompt_seeds]
        prompt_table += _layout(_seed_average(reps), {"Text Prompts": prompt_label(mode)})
    runs = [
        {
            "use_cam": cfg.use_cam,
            "use_tpm": cfg.use_tpm,
            "prompt_mode": cfg.prompt_mode,
            "seed": cfg.seed,
            "mean_dsc": rep.mean_dsc,
        }
        for cfg, rep in cache.values()
    ]
    report = AblationReport(runs, module_table, prompt_table)
    if out_dir is not None:
        report.write(out_dir)
    return report


# -------------------------------------------------------------------- sweep


@dataclass
class SweepReport:
    rows: list

    def to_csv(self) -> str:
        return AblationReport._csv(["fraction", "n_train", "site", "modality", "dsc"], self.rows)

    def plot(self, path) -> None:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        sites = sorted({r["site"] for r in self.rows})
        fig, axes = plt.subplots(1, max(len(sites), 1), figsize=(4 * max(len(sites), 1), 3.2), squeeze=False)
        for ax, site in zip(axes[0], sites):
            for m in sorted({r["modality"] for r in self.rows if r["site"] == site}):
                pts = sorted((r["fraction"], r["dsc"]) for r in self.rows if r["site"] == site and r["modality"] == m)
                ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=m)
            ax.set_title(site)
            ax.set_xlabel("training fraction")
            ax.set_ylabel("DSC")
            ax.legend(fontsize=7)
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)

    def write(self, out_dir) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"csv": out / "sweep.csv", "plot": out / "sweep.png"}
        paths["csv"].write_text(self.to_csv())
        self.plot(paths["plot"])
        return paths


def sweep_fraction(config: RunConfig, dataset: DatasetIndex, fractions=SAMPLE_FRACTIONS, out_dir=None) -> SweepReport:
    bad = [f for f in fractions if f not in SAMPLE_FRACTIONS]
    if bad:
        raise ConfigurationError(f"fractions {bad} are outside the sweep grid {SAMPLE_FRACTIONS}")
    n = len(dataset.split("train"))
    for f in fractions:
        subset_indices(n, f, config.seed)
    rows = []
    for f in sorted(fractions):
        result = train(replace(config, sample_fraction=f), dataset)
        rep = evaluate(result.estimator, dataset, "test")
        for t in rep.table:
            rows.append({"fraction": f, "n_train": result.n_train, "site": t["site"], "modality": t["modality"], "dsc": t["dsc"]})
    report = SweepReport(rows)
    if out_dir is not None:
        report.write(out_dir)
    return report


# ------------------------------------------------------------------ predict


def overlay(channel: np.ndarray, mask: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """8-bit RGB rendering of ``channel`` with ``mask`` blended in red."""
    gray = (np.clip(channel, 0.0, 1.0) * 255).astype(np.float64)
    rgb = np.repeat(gray[..., None], 3, axis=-1)
    m = np.asarray(mask, bool)
    rgb[m] = (1 - alpha) * rgb[m] + alpha * np.array([255.0, 0.0, 0.0])
    return np.round(rgb).astype(np.uint8)


def predict(checkpoint, channels: np.ndarray, report=None, out_dir=None, name="slice") -> tuple[SampleSegmentation, dict]:
    """Segment one slice and write a red overlay per modality plus a JSON audit record."""
    est = load_checkpoint(checkpoint)
    if est.use_tpm and est.prompt_mode == "expert" and report is None:
        raise ValidationError("this model generates prompts from expert text; pass the slice's report")
    channels = np.asarray(channels, np.float32)
    seg = est.segment(channels[None], [report])[0]
    masks = seg.final_masks >= 0.5
    record = {
        "name": name,
        "mask_pixels": {m: int(masks[i].sum()) for i, m in enumerate(modality_names(len(masks)))},
        "prompt": None,
    }
    if seg.prompts is not None:
        record["prompt"] = {
            "point": list(seg.prompts.point),
            "bbox": list(seg.prompts.bbox),
            "fallback_used": seg.prompts.fallback_used,
        }
        logger.info("%s prompt bbox %s point %s", name, seg.prompts.bbox, seg.prompts.point)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = []
        for i, m in enumerate(modality_names(len(masks))):
            path = out / f"{name}_{m}.png"
            Image.fromarray(overlay(channels[i], masks[i])).save(path)
            files.append(path.name)
        record["overlays"] = files
        (out / f"{name}.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    return seg, record

