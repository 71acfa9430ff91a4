"""Training, prototype building, evaluation, LODO folds and ablation sweeps."""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
import math
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import torch

from .config import ExperimentConfig, save_config
from .data import DomainDataset, default_specs, generate_benchmark, load_benchmark, normalize
from .fadf import compute_prototype, decomposer_for, load_prototypes, save_prototypes
from .hmpr import upsample
from .losses import metrics, total_loss
from .model import ModuleFlags, SegmentationModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

Datasets = Mapping[int, Mapping[str, DomainDataset]]
METRIC_KEYS = ("dice", "iou", "f1")


class TrainingError(RuntimeError):
    pass


class FoldError(RuntimeError):
    def __init__(self, failures: Dict[int, str]):
        self.failures = failures
        detail = "; ".join(f"fold {k}: {v}" for k, v in sorted(failures.items()))
        super().__init__(f"{len(failures)} LODO fold(s) failed: {detail}")


# ---------------------------------------------------------------- data

def load_datasets(config: ExperimentConfig) -> Dict[int, Dict[str, DomainDataset]]:
    """Folder benchmark if ``data.root`` is set, else the synthetic default."""
    dc = config.data
    if dc.root:
        out = load_benchmark(dc.root, dc.domains, target_size=dc.size)
    else:
        specs = default_specs()
        if dc.domains is not None:
            by_id = {s.domain_id: s for s in specs}
            missing = sorted(set(dc.domains) - set(by_id))
            if missing:
                raise ValueError(f"unknown synthetic domain id(s): {missing}")
            specs = [by_id[d] for d in dc.domains]
        out = generate_benchmark(specs, dc.n_train, dc.n_test, config.component_seed("data"), dc.size)
    if not out:
        raise ValueError("no domains resolved from the data config")
    return out


def source_domains(config: ExperimentConfig, available: Sequence[int]) -> List[int]:
    available = sorted(available)
    if config.protocol == "mixed":
        return available
    t = config.target_domain
    if t is None:
        raise ValueError(f"protocol {config.protocol!r} needs target_domain")
    if t not in available:
        raise ValueError(f"target domain {t} not in datasets {available}")
    if config.protocol == "intra":
        return [t]
    sources = [d for d in available if d != t]
    if not sources:
        raise ValueError("lodo needs at least 2 domains")
    return sources


def eval_domains(config: ExperimentConfig, available: Sequence[int]) -> List[int]:
    if config.protocol == "mixed":
        return sorted(available)
    return [config.target_domain]


def _split(datasets: Datasets, domain: int, split: str) -> DomainDataset:
    try:
        return datasets[domain][split]
    except KeyError:
        raise ValueError(f"missing {split} data for domain {domain}") from None


def _prepare(images: torch.Tensor, model: SegmentationModel) -> torch.Tensor:
    enc = model.config.encoder
    return torch.stack([normalize(im, enc.pixel_mean, enc.pixel_std) for im in images])


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: SegmentationModel
    loss_log: List[dict]
    source_domains: List[int]
    train_fingerprints: List[str]
    wall_time: float
    checkpoint: Optional[Path] = None


def staged_loss(out, y: torch.Tensor, config: ExperimentConfig):
    """Final-output loss, averaged with the stage-1 loss under deep supervision."""
    final, parts = total_loss(torch.sigmoid(out.final), y, out.iou, config.loss, return_parts=True)
    if not (config.optim.deep_supervision and out.fine is not None):
        return final, parts
    coarse, cparts = total_loss(torch.sigmoid(upsample(out.coarse, y.shape[-2:])), y,
                                out.iou_coarse, config.loss, return_parts=True)
    parts = {k: 0.5 * (parts[k] + cparts[k]) for k in parts}
    return 0.5 * (final + coarse), parts


def train(config: ExperimentConfig, datasets: Optional[Datasets] = None,
          out_dir: Union[str, Path, None] = None) -> TrainResult:
    """Adam with per-epoch exponential decay on the pooled source training set.

    Batches are drawn uniformly from the shuffled pool, so a batch may mix
    domains; each sample's true domain selects its token.
    """
    if datasets is None:
        datasets = load_datasets(config)
    sources = source_domains(config, list(datasets))
    train_sets = [_split(datasets, d, "train") for d in sources]
    model = SegmentationModel(config.model_config(len(sources)))
    images = _prepare(torch.cat([ds.images for ds in train_sets]), model)
    masks = torch.cat([ds.masks for ds in train_sets]).float()
    token_ids = torch.cat([torch.full((len(ds),), k, dtype=torch.long) for k, ds in enumerate(train_sets)])
    fingerprints = [h for ds in train_sets for h in ds.fingerprints()]

    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.optim.lr)
    sched = torch.optim.lr_scheduler.ExponentialLR(opt, gamma=config.optim.decay)
    gen = torch.Generator().manual_seed(config.component_seed("shuffle"))
    bs = config.optim.batch_size
    autocast = (lambda: torch.autocast("cpu", dtype=torch.bfloat16)) if config.optim.amp else nullcontext

    loss_log: List[dict] = []
    start = time.perf_counter()
    model.train()
    step = 0
    for epoch in range(config.optim.epochs):
        order = torch.randperm(len(images), generator=gen)
        for b, lo in enumerate(range(0, len(order), bs)):
            idx = order[lo:lo + bs]
            with autocast():
                out = model(images[idx], token_ids[idx])
            out = type(out)(*(t.float() if t is not None else None for t in out))
            loss, parts = staged_loss(out, masks[idx], config)
            record = {"epoch": epoch, "step": step, "batch": b, "loss": loss.item(),
                      **{k: v.item() for k, v in parts.items()}}
            if not math.isfinite(record["loss"]):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b} (step {step}): "
                    + ", ".join(f"{k}={v}" for k, v in record.items() if k not in ("epoch", "step", "batch"))
                )
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            loss_log.append(record)
            step += 1
        sched.step()
    model.eval()
    result = TrainResult(model, loss_log, sources, fingerprints, time.perf_counter() - start)
    if out_dir is not None:
        out_dir = Path(out_dir)
        result.checkpoint = save_checkpoint(out_dir / "checkpoint.pt", model, {
            "source_domains": sources,
            "train_fingerprints": fingerprints,
            "config": config.to_dict(),
        })
        (out_dir / "loss_log.json").write_text(json.dumps(loss_log, indent=1) + "\n")
        save_config(out_dir / "config.yaml", config)
    return result


# ---------------------------------------------------------------- prototypes

def build_prototypes(model: SegmentationModel, source_sets: Sequence[DomainDataset],
                     path: Union[str, Path, None] = None, batch_size: int = 16):
    """One prototype per source domain, indexed by token position."""
    if len(source_sets) != model.config.num_domains:
        raise ValueError(
            f"model has {model.config.num_domains} domain tokens but {len(source_sets)} source datasets were given"
        )
    was_training = model.training
    model.eval()
    decompose = decomposer_for(model.sdm)
    protos = []
    with torch.no_grad():
        for k, ds in enumerate(source_sets):
            if ds is None or len(ds) == 0:
                raise ValueError(f"missing data for source domain {k}")
            feats = torch.cat([model.encoder(_prepare(ds.images[i:i + batch_size], model))
                               for i in range(0, len(ds), batch_size)])
            protos.append(compute_prototype(feats, k, decompose, batch_size))
    model.train(was_training)
    if path is not None:
        save_prototypes(path, protos)
    return protos


def build_prototypes_from_checkpoint(checkpoint: Union[str, Path], datasets: Datasets,
                                     path: Union[str, Path]):
    model, extra = load_checkpoint(checkpoint)
    sources = extra.get("source_domains")
    if sources is None:
        raise ValueError(f"{checkpoint}: checkpoint does not record its source domains")
    return build_prototypes(model, [_split(datasets, d, "train") for d in sources], path)


# ---------------------------------------------------------------- reports

@dataclass
class MetricRow:
    dataset: str
    dice: float
    iou: float
    f1: float
    n: int = 0

    def values(self) -> Tuple[float, float, float]:
        return self.dice, self.iou, self.f1


def average_row(rows: Sequence[MetricRow], name: str = "Avg.") -> MetricRow:
    if not rows:
        raise ValueError("cannot average zero rows")
    k = len(rows)
    return MetricRow(name, *(sum(getattr(r, m) for r in rows) / k for m in METRIC_KEYS),
                     n=sum(r.n for r in rows))


@dataclass
class RunReport:
    protocol: str
    rows: List[MetricRow]
    average: MetricRow
    config: dict
    wall_time: float
    run_id: str
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, protocol, rows, config: dict, wall_time: float, extra=None) -> "RunReport":
        avg = average_row(rows)
        return cls(protocol, list(rows), avg, config, wall_time, make_run_id(config, rows), extra or {})

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        d["rows"] = [MetricRow(**r) for r in d["rows"]]
        d["average"] = MetricRow(**d["average"])
        return cls(**d)

    def save(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RunReport":
        return cls.from_json(Path(path).read_text())

    def table(self, label: str = "model") -> str:
        return format_table([(label, self.rows + [self.average])])


def make_run_id(config: dict, rows: Sequence[MetricRow]) -> str:
    """Content hash of config and results; identical runs share an id."""
    blob = json.dumps({"config": config, "rows": [asdict(r) for r in rows]}, sort_keys=True)
    return hashlib.sha1(blob.encode()).hexdigest()[:12]


def format_table(method_rows: Sequence[Tuple[str, Sequence[MetricRow]]], digits: int = 2) -> str:
    """Aligned text table: one line per method, a Dice/IoU/F1 group per dataset."""
    if not method_rows:
        raise ValueError("empty table")
    columns = [r.dataset for r in method_rows[0][1]]
    for label, rows in method_rows:
        if [r.dataset for r in rows] != columns:
            raise ValueError(f"row {label!r} has columns {[r.dataset for r in rows]}, expected {columns}")
    cell = 7
    group = 3 * cell + 2
    label_w = max(len("Method"), *(len(l) for l, _ in method_rows))
    head1 = "Method".ljust(label_w) + " | " + " | ".join(c[:group].center(group) for c in columns)
    names = " ".join(n.rjust(cell) for n in ("Dice", "IoU", "F1"))
    head2 = " " * label_w + " | " + " | ".join(names for _ in columns)
    lines = [head1, head2, "-" * len(head1)]
    for label, rows in method_rows:
        cells = [" ".join(f"{v:{cell}.{digits}f}" for v in r.values()) for r in rows]
        lines.append(label.ljust(label_w) + " | " + " | ".join(cells))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- evaluation

Predictor = Callable[[torch.Tensor, Optional[torch.Tensor]], torch.Tensor]


def model_predictor(model: SegmentationModel) -> Predictor:
    """Hard-mask predictor; ``ids=None`` means the domain is unseen."""

    def predict(images: torch.Tensor, ids: Optional[torch.Tensor]) -> torch.Tensor:
        with torch.no_grad():
            out = model(_prepare(images, model), ids)
        return (out.final > 0).float()

    return predict


def evaluate_dataset(predict: Predictor, dataset: DomainDataset, ids: Optional[torch.Tensor],
                     name: str, batch_size: int = 8) -> MetricRow:
    """Per-image metrics, macro-averaged over the dataset."""
    scores = {m: [] for m in METRIC_KEYS}
    for lo in range(0, len(dataset), batch_size):
        imgs = dataset.images[lo:lo + batch_size]
        pred = predict(imgs, None if ids is None else ids[lo:lo + batch_size])
        for p, g in zip(pred, dataset.masks[lo:lo + batch_size]):
            for m, v in metrics(p, g).items():
                scores[m].append(v)
    n = len(dataset)
    return MetricRow(name, *(sum(scores[m]) / n for m in METRIC_KEYS), n=n)


def evaluate(model: SegmentationModel, prototypes, datasets: Datasets, config: ExperimentConfig,
             source_ids: Sequence[int], predictor: Optional[Predictor] = None,
             extra: Optional[dict] = None) -> RunReport:
    """Evaluate on the protocol's test domains.

    A test domain that was a source uses its true token unless FADF is on;
    an unseen one uses FADF fusion, or uniform token averaging without FADF.
    """
    start = time.perf_counter()
    if model.flags.fadf:
        if prototypes is None:
            raise ValueError("FADF is enabled but no prototype store was given")
        model.set_prototypes(prototypes)
    predict = predictor or model_predictor(model)
    model.eval()
    rows = []
    for d in eval_domains(config, list(datasets)):
        ds = _split(datasets, d, "test")
        ids = None
        if d in source_ids:
            ids = torch.full((len(ds),), list(source_ids).index(d), dtype=torch.long)
        rows.append(evaluate_dataset(predict, ds, ids, ds.name or str(d)))
    return RunReport.build(config.protocol, rows, config.to_dict(), time.perf_counter() - start, extra)


def run_single(config: ExperimentConfig, datasets: Optional[Datasets] = None,
               out_dir: Union[str, Path, None] = None) -> RunReport:
    """Train, build prototypes and evaluate one configuration."""
    if datasets is None:
        datasets = load_datasets(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    res = train(config, datasets, out_dir)
    src_sets = [_split(datasets, d, "train") for d in res.source_domains]
    protos = build_prototypes(res.model, src_sets, out_dir / "prototypes.json" if out_dir else None)
    heldout = [h for d in eval_domains(config, list(datasets)) if d not in res.source_domains
               for h in _split(datasets, d, "test").fingerprints()]
    overlap = set(res.train_fingerprints) & set(heldout)
    if overlap:
        raise TrainingError(f"{len(overlap)} held-out sample(s) found in the training pool")
    report = evaluate(res.model, protos, datasets, config, res.source_domains, extra={
        "source_domains": res.source_domains,
        "train_fingerprints": res.train_fingerprints,
        "heldout_fingerprints": heldout,
        "final_loss": res.loss_log[-1]["loss"],
        "train_time": res.wall_time,
    })
    if out_dir is not None:
        report.save(out_dir / "report.json")
    return report


# ---------------------------------------------------------------- LODO

@dataclass
class LodoResult:
    reports: Dict[int, RunReport]
    rows: List[MetricRow]  # one per target plus Avg.
    table: str


def domain_names(datasets: Datasets) -> Dict[int, str]:
    return {d: (v["test"].name or str(d)) for d, v in datasets.items()}


def run_lodo(config: ExperimentConfig, datasets: Optional[Datasets] = None,
             out_dir: Union[str, Path, None] = None, targets: Optional[Sequence[int]] = None,
             label: Optional[str] = None) -> LodoResult:
    """One fold per held-out domain; failures are collected and re-raised."""
    if datasets is None:
        datasets = load_datasets(config)
    ids = sorted(datasets)
    if len(ids) < 2:
        raise ValueError("lodo needs at least 2 domains")
    targets = ids if targets is None else list(targets)
    out_dir = Path(out_dir) if out_dir is not None else None
    reports, failures = {}, {}
    for t in targets:
        fold = config.replace(protocol="lodo", target_domain=t)
        fold_dir = out_dir / f"fold_{t}" if out_dir else None
        try:
            reports[t] = run_single(fold, datasets, fold_dir)
        except Exception as exc:  # recorded and re-raised after the other folds
            log.exception("fold %d failed", t)
            failures[t] = f"{type(exc).__name__}: {exc}"
    if failures:
        if out_dir is not None:
            out_dir.mkdir(parents=True, exist_ok=True)
            (out_dir / "failures.json").write_text(json.dumps(failures, indent=1) + "\n")
        raise FoldError(failures)
    rows = [reports[t].rows[0] for t in targets]
    rows = rows + [average_row(rows)]
    table = format_table([(label or config.flags.label(), rows)])
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "summary.txt").write_text(table)
        (out_dir / "summary.json").write_text(json.dumps({
            "label": label or config.flags.label(),
            "rows": [asdict(r) for r in rows],
            "run_ids": {str(t): reports[t].run_id for t in targets},
        }, indent=1, sort_keys=True) + "\n")
        save_config(out_dir / "config.yaml", config)
    return LodoResult(reports, rows, table)


# ---------------------------------------------------------------- ablation

def ablation_flags(base: Optional[ModuleFlags] = None) -> List[Tuple[str, ModuleFlags]]:
    """Eight module on/off rows, then four frequency-branch rows.

    The branch rows run the modulator alone (FADF and HMPR off) so the band
    choice is the only difference between them.
    """
    rows = []
    for hmpr, fadf, sdm in itertools.product((False, True), repeat=3):
        f = ModuleFlags(sdm=sdm, fadf=fadf, hmpr=hmpr)
        rows.append((f.label(), f))
    for low, high in ((False, False), (True, False), (False, True), (True, True)):
        f = ModuleFlags(sdm=True, fadf=False, hmpr=False, low_branch=low, high_branch=high)
        name = {(False, False): "sdm[no-bands]", (True, False): "sdm[low]",
                (False, True): "sdm[high]", (True, True): "sdm[low+high]"}[(low, high)]
        rows.append((name, f))
    return rows


@dataclass
class AblationResult:
    rows: List[Tuple[str, List[MetricRow]]]
    table: str


def run_ablation(config: ExperimentConfig, datasets: Optional[Datasets] = None,
                 out_dir: Union[str, Path, None] = None,
                 targets: Optional[Sequence[int]] = None) -> AblationResult:
    """Every ablation row under the configured protocol (lodo or mixed)."""
    if datasets is None:
        datasets = load_datasets(config)
    out_dir = Path(out_dir) if out_dir is not None else None
    table_rows = []
    for i, (label, flags) in enumerate(ablation_flags()):
        cfg = config.replace(flags=flags)
        sub = out_dir / f"{i:02d}_{label.replace('+', '_').replace('[', '_').rstrip(']')}" if out_dir else None
        if config.protocol == "lodo":
            rows = run_lodo(cfg, datasets, sub, targets, label).rows
        else:
            report = run_single(cfg, datasets, sub)
            rows = report.rows + [report.average]
        table_rows.append((label, rows))
    table = format_table(table_rows)
    if out_dir is not None:
        (out_dir / "ablation.txt").write_text(table)
        (out_dir / "ablation.json").write_text(json.dumps(
            [{"label": l, "rows": [asdict(r) for r in rs]} for l, rs in table_rows], indent=1) + "\n")
        save_config(out_dir / "config.yaml", config)
    return AblationResult(table_rows, table)


def load_checkpoint_and_prototypes(checkpoint: Union[str, Path], prototypes: Union[str, Path, None]):
    model, extra = load_checkpoint(checkpoint)
    protos = load_prototypes(prototypes) if prototypes is not None else None
    return model, protos, extra
