"""One-axis ablations over the pipeline with shared seeds."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

from moder.bench.metrics import MetricsReport
from moder.bench.pipeline import Experiment, build_experiment, run_pipeline
from moder.config import RunConfig
from moder.errors import ConfigError


class Axis(str, enum.Enum):
    LOSS = "loss"
    ALPHA = "alpha"
    K = "k"
    TEMPLATE_AUG = "template_aug"


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    text = str(v).strip().lower()
    if text in ("1", "true", "on", "yes"):
        return True
    if text in ("0", "false", "off", "no"):
        return False
    raise ConfigError(f"cannot read {v!r} as a boolean")


def _overrides(axis: Axis, value) -> dict:
    """Config overrides for one ablation cell.  ALPHA moves unseen and seen smoothing together."""
    try:
        if axis is Axis.LOSS:
            return {"experts.loss": str(value)}
        if axis is Axis.ALPHA:
            a = float(value)
            return {"forge.alpha": a, "forge.alpha_seen": a}
        if axis is Axis.K:
            return {"forge.k": int(value)}
        return {"experts.template_aug": _parse_bool(value)}
    except ValueError as exc:
        raise ConfigError(f"bad value {value!r} for axis {axis.value}: {exc}") from None


def base_hash(cfg: RunConfig, axis: Axis) -> str:
    """Hash of ``cfg`` with the ablated fields reset to a fixed value; equal across one table's rows."""
    reset = _overrides(axis, {"loss": "sigmoid", "alpha": 0.0, "k": 1, "template_aug": True}[axis.value])
    return cfg.with_overrides(reset).content_hash()


_HEADERS = {"faa": "FAA", "ci_transfer": "CI-Transfer", "transfer": "Transfer", "avg": "Avg", "last": "Last"}


@dataclass
class AblationRow:
    label: str
    value: str
    report: MetricsReport
    config_hash: str
    base_hash: str


@dataclass
class AblationTable:
    axis: Axis
    protocol: str
    rows: list[AblationRow] = field(default_factory=list)

    def columns(self) -> list[str]:
        return ["faa", "ci_transfer"] if self.protocol == "class_il" else ["transfer", "avg", "last"]

    def to_markdown(self) -> str:
        cols = self.columns()
        header = ["setting"] + [_HEADERS[c] for c in cols] + ["config"]
        body = []
        for r in self.rows:
            vals = [getattr(r.report, c) for c in cols]
            body.append([r.label] + ["n/a" if v is None else f"{100 * v:.2f}" for v in vals] + [r.config_hash[:12]])
        widths = [max(len(str(x)) for x in col) for col in zip(header, *body)]

        def line(cells):
            return "| " + " | ".join(str(c).ljust(w) for c, w in zip(cells, widths)) + " |"

        out = [line(header), "| " + " | ".join("-" * w for w in widths) + " |"]
        out += [line(b) for b in body]
        return "\n".join(out) + "\n"


def ablate(
    cfg: RunConfig,
    axis: Axis | str,
    values: Sequence,
    experiment: Experiment | None = None,
    include_zero_shot: bool = True,
    progress: Callable[[str], None] | None = None,
) -> AblationTable:
    """One pipeline run per value, all from the same seeds and splits.

    With ``include_zero_shot`` a frozen-model row is appended for reference.
    """
    axis = Axis(axis)
    if not values:
        raise ConfigError("ablate() needs at least one value")
    exp = experiment or build_experiment(cfg)
    table = AblationTable(axis, cfg.protocol.value)
    for v in values:
        cell = cfg.with_overrides(_overrides(axis, v))
        if progress:
            progress(f"{axis.value}={v}")
        rep = run_pipeline(cell, exp, progress=progress).report
        table.rows.append(AblationRow(f"{axis.value}={v}", str(v), rep, cell.content_hash(), base_hash(cell, axis)))
    if include_zero_shot:
        zs = cfg.with_overrides({"eval.method": "zero_shot"})
        rep = run_pipeline(zs, exp).report
        table.rows.append(AblationRow("zero-shot", "", rep, zs.content_hash(), base_hash(zs, axis)))
    return table
