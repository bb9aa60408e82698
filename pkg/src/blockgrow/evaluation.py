"""Perplexity, base-rank shift analysis, and the strategy comparison harness.

Perplexity uses non-overlapping windows per document (final partial window
kept when it still has two tokens) with all NLL accumulation in float64;
per-window sums are combined with math.fsum so corpus document order cannot
perturb the result. Shift analysis greedy-decodes with the adapted model and
ranks each chosen token under the frozen base model, bucketing positions
into unshifted (rank 1), marginal (rank 2..3), and shifted (rank > 3).
"""

from __future__ import annotations

import json
import math
import statistics
from collections import Counter
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import Corpus, derive_rng, mixture_sampler
from .expansion import FreezeMask
from .model import DecoderModel
from .training import (StrategySpec, TrainConfig, TrainingDivergedError,
                       prepare_strategy, train)

EVAL_BATCH = 64


def _documents(corpus) -> list[np.ndarray]:
    if isinstance(corpus, Corpus):
        return corpus.documents
    return [np.asarray(doc, dtype=np.int64) for doc in corpus]


def perplexity(model, corpus, seq_len: int, batch_size: int = EVAL_BATCH) -> float:
    """exp(mean token NLL) over non-overlapping seq_len windows.

    Windows shorter than 2 tokens carry no prediction and are dropped.
    """
    docs = _documents(corpus)
    if not docs:
        raise ValueError("perplexity: corpus has no documents")
    if seq_len < 2:
        raise ValueError("perplexity: seq_len must be >= 2")
    if seq_len > model.config.max_seq_len:
        raise ValueError(
            f"perplexity: seq_len {seq_len} exceeds model max_seq_len "
            f"{model.config.max_seq_len}")
    by_length: dict[int, list[np.ndarray]] = {}
    for doc in docs:
        for start in range(0, len(doc), seq_len):
            chunk = doc[start:start + seq_len]
            if len(chunk) >= 2:
                by_length.setdefault(len(chunk), []).append(chunk)
    if not by_length:
        raise ValueError("perplexity: no window with at least 2 tokens")
    window_nlls: list[float] = []
    count = 0
    for length in sorted(by_length):
        group = by_length[length]
        for i in range(0, len(group), batch_size):
            batch = np.stack(group[i:i + batch_size])
            with T.no_grad():
                logits = model.forward_batch(batch).data.astype(np.float64)
            rows = logits[:, :-1, :]
            targets = batch[:, 1:]
            peak = rows.max(axis=-1, keepdims=True)
            lse = peak[..., 0] + np.log(np.exp(rows - peak).sum(axis=-1))
            picked = np.take_along_axis(rows, targets[..., None], axis=-1)[..., 0]
            nll = lse - picked
            window_nlls.extend(float(x) for x in nll.sum(axis=-1))
            count += targets.size
    return float(math.exp(math.fsum(window_nlls) / count))


def base_rank(model, context_ids, token: int) -> int:
    """1-based rank of `token` in the model's next-token ordering.

    Descending probability, ties broken by ascending token id.
    """
    ctx = np.asarray(context_ids, dtype=np.int64)
    if ctx.ndim != 1 or ctx.size < 1:
        raise ValueError("base_rank: context must be a non-empty 1-D id array")
    with T.no_grad():
        logits = model.forward(ctx).data[-1].astype(np.float64)
    vocab = logits.shape[0]
    if not 0 <= token < vocab:
        raise ValueError(f"base_rank: token {token} outside vocabulary {vocab}")
    order = np.lexsort((np.arange(vocab), -logits))
    return int(np.nonzero(order == token)[0][0]) + 1


def greedy_decode(model, prompt_ids, max_new_tokens: int) -> np.ndarray:
    """Append argmax tokens one at a time; returns only the new tokens."""
    prompt = np.asarray(prompt_ids, dtype=np.int64)
    if prompt.ndim != 1 or prompt.size < 1:
        raise ValueError("greedy_decode: prompt must be a non-empty 1-D id array")
    limit = model.config.max_seq_len
    ctx = list(prompt)
    out = []
    for _ in range(max_new_tokens):
        window = np.asarray(ctx[-limit:], dtype=np.int64)
        with T.no_grad():
            logits = model.forward(window)
        nxt = int(np.argmax(logits.data[-1]))
        out.append(nxt)
        ctx.append(nxt)
    return np.asarray(out, dtype=np.int64)


@dataclass
class ShiftReport:
    """Where the adapted model's greedy choices sit in the base ordering."""

    per_query_etas: list[list[int]]
    total_positions: int
    counts: tuple[int, int, int]  # eta == 1, 1 < eta <= 3, eta > 3
    fraction_unshifted: float
    fraction_marginal: float
    fraction_shifted: float
    top_shifted_tokens: list[tuple[int, int]]  # (token id, occurrences)

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.fraction_unshifted, self.fraction_marginal,
                self.fraction_shifted)

    def to_json_dict(self) -> dict:
        return {
            "total_positions": self.total_positions,
            "counts": {"unshifted": self.counts[0], "marginal": self.counts[1],
                       "shifted": self.counts[2]},
            "fractions": {"unshifted": self.fraction_unshifted,
                          "marginal": self.fraction_marginal,
                          "shifted": self.fraction_shifted},
            "top_shifted_tokens": [
                {"token": t, "count": c} for t, c in self.top_shifted_tokens],
            "per_query_etas": self.per_query_etas,
        }


def shift_analysis(base, aligned, queries, max_new_tokens: int,
                   top_k: int = 10) -> ShiftReport:
    """Greedy-decode each query with `aligned`, rank every choice under `base`."""
    if base.config.vocab_size != aligned.config.vocab_size:
        raise ValueError("shift_analysis: models must share a vocabulary")
    limit = base.config.max_seq_len
    per_query: list[list[int]] = []
    shifted: Counter[int] = Counter()
    for query in queries:
        generated = greedy_decode(aligned, query, max_new_tokens)
        ctx = list(np.asarray(query, dtype=np.int64))
        etas: list[int] = []
        for tok in generated:
            tok = int(tok)
            window = np.asarray(ctx[-limit:], dtype=np.int64)
            eta = base_rank(base, window, tok)
            etas.append(eta)
            if eta > 3:
                shifted[tok] += 1
            ctx.append(tok)
        per_query.append(etas)
    flat = [eta for etas in per_query for eta in etas]
    total = len(flat)
    if total == 0:
        raise ValueError("shift_analysis: no positions generated")
    n_unshifted = sum(1 for eta in flat if eta == 1)
    n_marginal = sum(1 for eta in flat if 1 < eta <= 3)
    n_shifted = total - n_unshifted - n_marginal
    top = sorted(shifted.items(), key=lambda kv: (-kv[1], kv[0]))[:top_k]
    return ShiftReport(
        per_query_etas=per_query,
        total_positions=total,
        counts=(n_unshifted, n_marginal, n_shifted),
        fraction_unshifted=n_unshifted / total,
        fraction_marginal=n_marginal / total,
        fraction_shifted=n_shifted / total,
        top_shifted_tokens=top,
    )


# ---------------------------------------------------------------------------
# strategy comparison


@dataclass
class StrategyRunRow:
    strategy: str
    seed: int
    domain_ppl: float
    general_ppl: float
    general_degradation: float
    trainable_params: int
    total_params: int
    steps: int
    final_loss_mean_100: float
    wall_time_s: float
    diverged: bool


@dataclass
class CompareReport:
    base_domain_ppl: float
    base_general_ppl: float
    eval_seq_len: int
    rows: list[StrategyRunRow]
    medians: dict[str, dict[str, float]]
    loss_histories: dict[str, list[float]]  # "<label>/seed<k>" -> per-step loss


MEDIAN_METRICS = ("domain_ppl", "general_ppl", "general_degradation",
                  "final_loss_mean_100", "trainable_params", "wall_time_s")


def count_trainable(model, mask: FreezeMask) -> int:
    return sum(p.size for name, p in model.named_parameters()
               if mask.trainable[name])


def final_loss_mean(losses: list[float], tail: int = 100) -> float:
    if not losses:
        return math.inf
    window = losses[-tail:]
    return float(statistics.fmean(window))


def compare_strategies(base: DecoderModel, corpora: dict[str, Corpus],
                       strategies: list[StrategySpec], cfg: TrainConfig,
                       seeds: list[int], eval_seq_len: int | None = None,
                       log=None) -> CompareReport:
    """Adapt the base once per (strategy, seed) and measure both domains.

    `corpora` needs "domain_train", "domain_eval", and "general_eval". Each
    run trains on the domain stream only; a diverged run becomes a row with
    infinite perplexities rather than an exception.
    """
    for key in ("domain_train", "domain_eval", "general_eval"):
        if key not in corpora:
            raise ValueError(f"compare_strategies: corpora missing {key!r}")
    if not seeds:
        raise ValueError("compare_strategies: at least one seed required")
    if eval_seq_len is None:
        eval_seq_len = min(base.config.max_seq_len, 2 * cfg.seq_len)
    base_domain = perplexity(base, corpora["domain_eval"], eval_seq_len)
    base_general = perplexity(base, corpora["general_eval"], eval_seq_len)
    rows: list[StrategyRunRow] = []
    histories: dict[str, list[float]] = {}
    for spec in strategies:
        for seed in seeds:
            run_cfg = replace(cfg, strategy=spec.kind, seed=seed)
            model, mask = prepare_strategy(base, spec, run_cfg)
            stream_seed = int(derive_rng(seed, "compare", spec.label)
                              .integers(2 ** 31))
            stream = mixture_sampler([corpora["domain_train"]],
                                     run_cfg.batch_size, run_cfg.seq_len,
                                     seed=stream_seed)
            diverged = False
            try:
                result = train(model, mask, stream, run_cfg)
                losses = result.loss_history
                wall = result.wall_time_s
            except TrainingDivergedError:
                diverged = True
                losses = []
                wall = math.nan
            if diverged:
                domain_ppl = general_ppl = math.inf
            else:
                domain_ppl = perplexity(model, corpora["domain_eval"], eval_seq_len)
                general_ppl = perplexity(model, corpora["general_eval"], eval_seq_len)
            row = StrategyRunRow(
                strategy=spec.label,
                seed=seed,
                domain_ppl=domain_ppl,
                general_ppl=general_ppl,
                general_degradation=general_ppl - base_general,
                trainable_params=count_trainable(model, mask),
                total_params=model.parameter_count(),
                steps=run_cfg.total_steps,
                final_loss_mean_100=final_loss_mean(losses),
                wall_time_s=wall,
                diverged=diverged,
            )
            rows.append(row)
            histories[f"{spec.label}/seed{seed}"] = losses
            if log is not None:
                log(row)
    medians: dict[str, dict[str, float]] = {}
    for spec in strategies:
        group = [r for r in rows if r.strategy == spec.label]
        medians[spec.label] = {
            metric: float(statistics.median(getattr(r, metric) for r in group))
            for metric in MEDIAN_METRICS}
    return CompareReport(
        base_domain_ppl=base_domain,
        base_general_ppl=base_general,
        eval_seq_len=eval_seq_len,
        rows=rows,
        medians=medians,
        loss_histories=histories,
    )


# ---------------------------------------------------------------------------
# report serialization


def _clean(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    return value


def write_compare_csv(report: CompareReport, path: str | Path) -> None:
    """Per-run rows plus one median row per strategy. No wall times here;
    those live in the timings sidecar so reports stay byte-stable."""
    lines = ["strategy,seed,domain_ppl,general_ppl,general_degradation,"
             "trainable_params,steps,final_loss_mean_100,diverged"]
    lines.append(f"base,-,{report.base_domain_ppl!r},{report.base_general_ppl!r},"
                 f"0.0,0,0,,False")
    for row in report.rows:
        lines.append(
            f"{row.strategy},{row.seed},{row.domain_ppl!r},{row.general_ppl!r},"
            f"{row.general_degradation!r},{row.trainable_params},{row.steps},"
            f"{row.final_loss_mean_100!r},{row.diverged}")
    for label in sorted(report.medians):
        med = report.medians[label]
        lines.append(
            f"{label},median,{med['domain_ppl']!r},{med['general_ppl']!r},"
            f"{med['general_degradation']!r},{round(med['trainable_params'])},"
            f"-,{med['final_loss_mean_100']!r},-")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_timings_csv(report: CompareReport, path: str | Path) -> None:
    lines = ["strategy,seed,wall_time_s"]
    for row in report.rows:
        lines.append(f"{row.strategy},{row.seed},{row.wall_time_s!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def compare_report_json_dict(report: CompareReport) -> dict:
    medians = {label: {k: _clean(v) for k, v in med.items() if k != "wall_time_s"}
               for label, med in report.medians.items()}
    return {
        "base": {"domain_ppl": _clean(report.base_domain_ppl),
                 "general_ppl": _clean(report.base_general_ppl)},
        "eval_seq_len": report.eval_seq_len,
        "rows": [{
            "strategy": r.strategy,
            "seed": r.seed,
            "domain_ppl": _clean(r.domain_ppl),
            "general_ppl": _clean(r.general_ppl),
            "general_degradation": _clean(r.general_degradation),
            "trainable_params": r.trainable_params,
            "total_params": r.total_params,
            "steps": r.steps,
            "final_loss_mean_100": _clean(r.final_loss_mean_100),
            "diverged": r.diverged,
        } for r in report.rows],
        "medians": medians,
        "loss_histories": report.loss_histories,
    }


def write_compare_json(report: CompareReport, path: str | Path) -> None:
    payload = json.dumps(compare_report_json_dict(report), indent=2,
                         sort_keys=True)
    Path(path).write_text(payload + "\n", encoding="utf-8")


def write_shift_json(report: ShiftReport, path: str | Path) -> None:
    payload = json.dumps(report.to_json_dict(), indent=2, sort_keys=True)
    Path(path).write_text(payload + "\n", encoding="utf-8")


def write_shift_csv(report: ShiftReport, path: str | Path) -> None:
    lines = ["query,position,eta,category"]
    for qi, etas in enumerate(report.per_query_etas):
        for pos, eta in enumerate(etas):
            category = ("unshifted" if eta == 1
                        else "marginal" if eta <= 3 else "shifted")
            lines.append(f"{qi},{pos},{eta},{category}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
