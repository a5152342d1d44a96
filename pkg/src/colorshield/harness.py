"""Experiment orchestration: threat models, seeded multi-run evaluation, and
report emission.

An evaluation row averages one attack over R seeded runs (default 6); each
run re-samples a stratified subset and re-seeds attack randomness. Crafting
surfaces per threat model: white-box attacks the evaluated system itself
(the full differentiable pipeline view when defended), grey-box attacks the
RGB member's weights only, black-box attacks a separately trained surrogate.
Robust accuracy is always measured on the evaluated system.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackConfig, AttackKind, ModelSurface, craft_batch
from .colorspace import ColorSpace
from .data import Dataset, stratified_subset
from .defense import DefensePipeline, differentiable_view, predict_batch
from .model import Model, forward_batch

__all__ = [
    "ThreatModel",
    "EvalRow",
    "EvalReport",
    "EvalSettings",
    "run_eval",
    "emit_report",
    "parse_report",
    "report_markdown",
]


@dataclass
class ThreatModel:
    tag: str  # white_box | grey_box | black_box
    surrogate: Model | None = None
    attacks_see_defense: bool = False

    def __post_init__(self):
        if self.tag not in ("white_box", "grey_box", "black_box"):
            raise ValueError(f"ThreatModel: unknown tag {self.tag!r}")
        if self.tag == "black_box" and self.surrogate is None:
            raise ValueError("ThreatModel: black_box requires a surrogate model")
        if self.tag == "white_box":
            self.attacks_see_defense = True

    def check_surrogate_disjoint(self, system) -> None:
        """Black-box surrogates must differ from the target in seed or config."""
        if self.tag != "black_box":
            return
        targets = system.members.values() if isinstance(system, DefensePipeline) else [system]
        for m in targets:
            if m.rng_seed == self.surrogate.rng_seed and m.config == self.surrogate.config:
                raise ValueError("ThreatModel: surrogate shares seed and architecture with the target")


_COLUMNS = (
    "threat",
    "attack",
    "epsilon",
    "clean_acc",
    "robust_acc",
    "mean_l2",
    "mean_linf",
    "success_rate",
    "n",
    "wall_time_s",
)


@dataclass
class EvalRow:
    threat: str
    attack: str
    epsilon: float
    clean_acc: float
    robust_acc: float
    mean_l2: float
    mean_linf: float
    success_rate: float
    n: int
    wall_time_s: float

    def as_strings(self) -> list[str]:
        return [
            self.threat,
            self.attack,
            repr(self.epsilon),
            repr(self.clean_acc),
            repr(self.robust_acc),
            repr(self.mean_l2),
            repr(self.mean_linf),
            repr(self.success_rate),
            str(self.n),
            repr(self.wall_time_s),
        ]


@dataclass
class EvalReport:
    header: dict[str, str] = field(default_factory=dict)
    rows: list[EvalRow] = field(default_factory=list)


@dataclass
class EvalSettings:
    runs: int = 6
    subset_size: int = 500
    base_seed: int = 0
    record_wall_time: bool = True


def _system_predict(system, images: np.ndarray) -> np.ndarray:
    if isinstance(system, DefensePipeline):
        return predict_batch(system, images).argmax(axis=1)
    preds = []
    for start in range(0, len(images), 128):
        x = np.transpose(images[start : start + 128], (0, 3, 1, 2)).astype(np.float32)
        preds.append(forward_batch(system, x)[0].argmax(axis=1))
    return np.concatenate(preds)


def _craft_surface(system, threat: ThreatModel):
    if threat.tag == "black_box":
        return ModelSurface(threat.surrogate)
    if isinstance(system, DefensePipeline):
        if threat.tag == "white_box":
            return differentiable_view(system)
        return ModelSurface(system.members[ColorSpace.RGB])
    return ModelSurface(system)


def run_eval(
    system,
    dataset: Dataset,
    threat: ThreatModel,
    attack_configs: list[AttackConfig],
    settings: EvalSettings | None = None,
    header_extra: dict[str, str] | None = None,
) -> EvalReport:
    """Average each attack over seeded runs; returns one report per system."""
    settings = settings or EvalSettings()
    if settings.subset_size < 50:
        raise ValueError("run_eval: subset size must be >= 50")
    if settings.subset_size > len(dataset):
        raise ValueError(f"run_eval: subset {settings.subset_size} > dataset {len(dataset)}")
    threat.check_surrogate_disjoint(system)

    system_name = "defended-pipeline" if isinstance(system, DefensePipeline) else "undefended-model"
    report = EvalReport(
        header={
            "system": system_name,
            "threat": threat.tag,
            "dataset": dataset.source,
            "split": dataset.split,
            "subset_size": str(settings.subset_size),
            "runs": str(settings.runs),
            "base_seed": str(settings.base_seed),
        }
    )
    if header_extra:
        report.header.update(header_extra)

    for config in attack_configs:
        if config.kind == AttackKind.JSMA and config.target is None:
            report.header[f"skipped_{config.kind.value}"] = "jsma requires a target class"
            continue
        t0 = time.perf_counter()
        clean_accs, robust_accs, l2s, linfs, succ = [], [], [], [], []
        total_n = 0
        for r in range(settings.runs):
            run_seed = settings.base_seed + r
            subset = stratified_subset(dataset, settings.subset_size, seed=run_seed)
            run_config = replace(config, seed=run_seed)
            surface = _craft_surface(system, threat)
            adv = craft_batch(surface, subset.images, subset.labels, run_config)
            clean_pred = _system_predict(system, subset.images)
            adv_pred = _system_predict(system, adv)
            clean_ok = clean_pred == subset.labels
            robust_ok = adv_pred == subset.labels
            clean_accs.append(clean_ok.mean())
            robust_accs.append(robust_ok.mean())
            d = adv.astype(np.float64) - subset.images.astype(np.float64)
            per_img = d.reshape(len(d), -1)
            l2s.append(float(np.mean(np.sqrt((per_img**2).sum(axis=1) / per_img.shape[1]))))
            linfs.append(float(np.mean(np.abs(per_img).max(axis=1))))
            fooled = clean_ok & (adv_pred != subset.labels)
            succ.append(float(fooled.sum() / max(int(clean_ok.sum()), 1)))
            total_n += len(subset)
        wall = time.perf_counter() - t0 if settings.record_wall_time else 0.0
        report.rows.append(
            EvalRow(
                threat=threat.tag,
                attack=config.kind.value,
                epsilon=float(config.epsilon),
                clean_acc=float(np.mean(clean_accs)),
                robust_acc=float(np.mean(robust_accs)),
                mean_l2=float(np.mean(l2s)),
                mean_linf=float(np.mean(linfs)),
                success_rate=float(np.mean(succ)),
                n=total_n,
                wall_time_s=wall,
            )
        )
    return report


def emit_report(report: EvalReport, path, format: str = "csv") -> None:
    """Write a report as CSV (with provenance header) or markdown."""
    if not report.rows:
        raise ValueError("emit_report: empty report")
    if format == "csv":
        lines = [f"# {key} = {value}" for key, value in report.header.items()]
        lines.append(",".join(_COLUMNS))
        for row in report.rows:
            lines.append(",".join(row.as_strings()))
        text = "\n".join(lines) + "\n"
    elif format == "markdown":
        text = report_markdown(report)
    else:
        raise ValueError(f"emit_report: unknown format {format!r}")
    with open(path, "w") as fh:
        fh.write(text)


def report_markdown(report: EvalReport) -> str:
    """Attack-by-threat grid: one row per (threat, attack) pair."""
    lines = [f"<!-- {key} = {value} -->" for key, value in report.header.items()]
    lines.append("| Threat | Attack | eps | Clean acc | Robust acc | Mean L2 | Mean Linf | Success |")
    lines.append("|---|---|---|---|---|---|---|---|")
    for row in report.rows:
        lines.append(
            f"| {row.threat} | {row.attack} | {row.epsilon:g} | {row.clean_acc:.4f} "
            f"| {row.robust_acc:.4f} | {row.mean_l2:.4f} | {row.mean_linf:.4f} | {row.success_rate:.4f} |"
        )
    return "\n".join(lines) + "\n"


def parse_report(path) -> EvalReport:
    """Inverse of emit_report's CSV form."""
    report = EvalReport()
    with open(path) as fh:
        lines = fh.read().splitlines()
    body = []
    for line in lines:
        if line.startswith("# "):
            key, _, value = line[2:].partition(" = ")
            report.header[key] = value
        elif line:
            body.append(line)
    if not body or body[0] != ",".join(_COLUMNS):
        raise ValueError(f"parse_report: missing column header in {path}")
    for line in body[1:]:
        parts = line.split(",")
        if len(parts) != len(_COLUMNS):
            raise ValueError(f"parse_report: bad row {line!r}")
        report.rows.append(
            EvalRow(
                threat=parts[0],
                attack=parts[1],
                epsilon=float(parts[2]),
                clean_acc=float(parts[3]),
                robust_acc=float(parts[4]),
                mean_l2=float(parts[5]),
                mean_linf=float(parts[6]),
                success_rate=float(parts[7]),
                n=int(parts[8]),
                wall_time_s=float(parts[9]),
            )
        )
    return report
