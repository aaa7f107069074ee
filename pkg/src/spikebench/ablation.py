"""Ablation sweeps: each variant is trained and evaluated under the same seed and budget."""

from __future__ import annotations

import csv
import dataclasses
import io
from dataclasses import dataclass

import numpy as np

from .data import Dataset
from .errors import ConfigError, SpikeBenchError
from .network import ModelConfig, SpikingTransformer
from .train import TrainConfig, evaluate, train

ABLATION_MODES = ("random_attn", "sps_depth", "encoder_sweep", "qkv_generator")


@dataclass
class AblationRow:
    variant: str
    accuracy: float | None
    delta: float | None
    status: str = "ok"
    qk_update_norm: float | None = None


@dataclass
class AblationTable:
    mode: str
    baseline: str
    rows: list[AblationRow]

    def row(self, variant: str) -> AblationRow:
        return next(r for r in self.rows if r.variant == variant)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["mode", "variant", "accuracy", "delta", "status", "qk_update_norm"])
        for r in self.rows:
            w.writerow([self.mode, r.variant, _fmt(r.accuracy), _fmt(r.delta), r.status, _fmt(r.qk_update_norm)])
        return buf.getvalue()

    def to_text(self) -> str:
        lines = [f"ablation: {self.mode} (baseline {self.baseline})",
                 f"{'variant':<14} {'accuracy':>9} {'delta':>9}  status"]
        for r in self.rows:
            acc = "-" if r.accuracy is None else f"{100 * r.accuracy:.2f}%"
            delta = "-" if r.delta is None else f"{100 * r.delta:+.2f}"
            lines.append(f"{r.variant:<14} {acc:>9} {delta:>9}  {r.status}")
        return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def variants(mode: str, base: ModelConfig) -> list[tuple[str, ModelConfig]]:
    """``(label, config)`` pairs for a sweep; the first entry is the baseline."""
    rep = dataclasses.replace
    if mode == "random_attn":
        return [("baseline", rep(base, attn=rep(base.attn, randomized_qk=False))),
                ("random_qk", rep(base, attn=rep(base.attn, randomized_qk=True)))]
    if mode == "sps_depth":
        return [(str(n), rep(base, sps_conv_layers=n)) for n in (4, 2, 1)]
    if mode == "encoder_sweep":
        return [(k, rep(base, encoder=rep(base.encoder, kind=k))) for k in ("direct", "phase", "rate", "ttfs")]
    if mode == "qkv_generator":
        return [(g, rep(base, attn=rep(base.attn, qkv_generator=g))) for g in ("linear", "conv_bn", "sepconv_bn")]
    raise ConfigError(f"unknown ablation mode {mode!r}; expected one of {ABLATION_MODES}")


def _qk_weights(model: SpikingTransformer) -> list[np.ndarray]:
    out = []
    for block in model.blocks:
        for g in block.attn.query_generators() + [block.attn.k_gen]:
            out += [p.data.copy() for p in g.parameters()]
    return out


def ablate(mode: str, base: ModelConfig, train_data: Dataset, test_data: Dataset, tc: TrainConfig,
           seed: int = 0, log=None) -> AblationTable:
    """Train and test every variant of ``mode``. A failing variant is recorded, not raised."""
    runs = variants(mode, base)
    rows = []
    for label, cfg in runs:
        try:
            model = SpikingTransformer(cfg, seed=seed)
            before = _qk_weights(model)
            train(model, train_data, tc)
            after = _qk_weights(model)
            acc = evaluate(model, test_data, tc.val_batch_size)["accuracy"]
            norm = float(np.sqrt(sum(float(((a - b) ** 2).sum()) for a, b in zip(after, before))))
            rows.append(AblationRow(label, acc, None, qk_update_norm=norm))
        except (SpikeBenchError, FloatingPointError) as exc:
            rows.append(AblationRow(label, None, None, status=f"failed: {type(exc).__name__}: {exc}"))
        if log is not None:
            log(rows[-1])
    base_acc = rows[0].accuracy
    for r in rows:
        if r.accuracy is not None and base_acc is not None:
            r.delta = r.accuracy - base_acc
    return AblationTable(mode, runs[0][0], rows)
