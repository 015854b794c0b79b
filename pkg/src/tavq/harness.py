"""Run orchestration behind the CLI verbs: data, training, evaluation, ablations, timing."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import checkpoint, synth
from .config import ConfigError, RunConfig, check_factors
from .model import TrainState, batch_indices, encode_indices, text_similarity, train_step
from .text import FileEmbedding, GranularText, HashEmbedding, Lexicon, encode_caption
from .vq import codebook_metrics

log = logging.getLogger(__name__)

WALL_CLOCK_FIELDS = ("step_ms",)


@dataclass
class Corpus:
    images: np.ndarray                 # float64 in [0, 1], (N, H, W, 3)
    captions: list[str]
    texts: list[GranularText]          # one bundle per caption
    pooled: list[GranularText]         # bundles merged over text_pool neighbours

    def __len__(self) -> int:
        return len(self.captions)


def text_tools(cfg: RunConfig):
    lex = Lexicon.from_file(cfg.vocabulary) if cfg.vocabulary else Lexicon.default()
    provider = FileEmbedding.from_file(cfg.embeddings) if cfg.embeddings else HashEmbedding(cfg.d)
    if provider.dim != cfg.d:
        raise ConfigError(f"embedding dimension {provider.dim} does not match d={cfg.d}")
    return lex, provider


def dataset_spec(cfg: RunConfig, count: int | None = None) -> synth.DatasetSpec:
    return synth.DatasetSpec(count=cfg.data_count if count is None else count,
                             image_size=cfg.image_size, seed=cfg.data_seed,
                             vocabulary=cfg.vocabulary)


def build_corpus(cfg: RunConfig, split: int = 0, count: int | None = None) -> Corpus:
    """Training data (split 0) or a disjoint held-out set (split 1)."""
    if split == 0 and cfg.data_dir:
        data = synth.load(cfg.data_dir)
        if data.images.shape[1:3] != (cfg.image_size, cfg.image_size):
            raise ConfigError(f"dataset at {cfg.data_dir} has images of {data.images.shape[1:3]}, "
                              f"config says image_size={cfg.image_size}")
    else:
        data = synth.generate(dataset_spec(cfg, count), split=split)
    lex, provider = text_tools(cfg)
    texts = [encode_caption(c, lex, provider) for c in data.captions]
    n, pool = len(texts), cfg.text_pool
    pooled = texts if pool == 1 else \
        [GranularText.merge([texts[(i + k) % n] for k in range(pool)]) for i in range(n)]
    return Corpus(images=data.float_images(), captions=data.captions, texts=texts, pooled=pooled)


def strip_wall_clock(record: dict) -> dict:
    return {k: v for k, v in record.items() if k not in WALL_CLOCK_FIELDS}


# --------------------------------------------------------------------------
# training


@dataclass
class RunResult:
    state: TrainState
    records: list[dict]
    out_dir: Path


def _read_records(path: Path, upto: int) -> list[dict]:
    if not path.exists():
        return []
    out = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            if rec["step"] <= upto:
                out.append(rec)
    return out


def train(cfg: RunConfig, out_dir: str | Path | None = None, resume: str | Path | None = None,
          corpus: Corpus | None = None) -> RunResult:
    """Train for ``cfg.steps`` total steps, appending one JSON record per step.

    Checkpoints go to ``<out>/checkpoints/step_NNNNNN`` every
    ``checkpoint_every`` steps and after the last one.
    """
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    corpus = corpus or build_corpus(cfg)
    if cfg.batch > len(corpus):
        raise ConfigError(f"batch {cfg.batch} exceeds dataset size {len(corpus)}")
    if resume is not None:
        state = checkpoint.load(resume, cfg)
    else:
        state = TrainState.create(cfg)

    metrics_path = out / "metrics.jsonl"
    records = _read_records(metrics_path, state.step) if resume is not None else []
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
        fh.flush()
        ckpt_root = out / "checkpoints"
        while state.step < cfg.steps:
            idx = batch_indices(cfg.seed, state.step, len(corpus), cfg.batch)
            rec = train_step(state, corpus.images[idx], [corpus.pooled[i] for i in idx])
            records.append(rec)
            fh.write(json.dumps(rec) + "\n")
            fh.flush()
            if state.step % cfg.checkpoint_every == 0 or state.step == cfg.steps:
                checkpoint.save(state, ckpt_root / f"step_{state.step:06d}")
    return RunResult(state=state, records=records, out_dir=out)


# --------------------------------------------------------------------------
# evaluation


def evaluate(cfg: RunConfig, state: TrainState, corpus: Corpus | None = None) -> dict:
    """Reconstruction error, codebook/text similarity and code usage on held-out data."""
    if corpus is None:
        corpus = build_corpus(cfg, split=1, count=cfg.eval_count) if cfg.eval_count else build_corpus(cfg)
    indices, mse = encode_indices(state.model, corpus.images)
    report = {"step": state.step, "recon_mse": mse,
              "similarity": text_similarity(state.model, corpus.texts)}
    for lvl, idx in zip(("f1", "f2", "f3"), indices):
        m = codebook_metrics(idx, cfg.K)
        report[f"perplexity_{lvl}"] = m["perplexity"]
        report[f"usage_{lvl}"] = m["usage_fraction"]
    return report


# --------------------------------------------------------------------------
# ablations

ABLATION_ROWS = (
    ("i", "none", (0, 0, 0)),
    ("ii", "s", (0, 0, 1)),
    ("iii", "s+p", (0, 1, 1)),
    ("iv", "s+w", (1, 0, 1)),
    ("v", "w+p", (1, 1, 0)),
    ("vi", "w+p+s", (1, 1, 1)),
)

ABLATION_COLUMNS = ("row", "setting", "alpha", "beta_p", "gamma_s", "factors",
                    "train_recon_mse", "recon_mse", "similarity", "status")


def ablation_settings(cfg: RunConfig) -> list[tuple[str, str, RunConfig | None, str]]:
    """(row id, label, config or None, status) per setting; loss-term rows
    switch each weight between zero and its base value."""
    rows = []
    for row, label, (w, p, s) in ABLATION_ROWS:
        rows.append((row, label, replace(cfg, alpha=cfg.alpha * w, beta_p=cfg.beta_p * p,
                                         gamma_s=cfg.gamma_s * s), "ok"))
    for fs in cfg.ablate_factors:
        label = "factors " + "/".join(map(str, fs))
        try:
            check_factors(fs, cfg.image_size, cfg.min_bottom_grid)
            rows.append((f"f{'-'.join(map(str, fs))}", label, replace(cfg, factors=list(fs)), "ok"))
        except ConfigError as exc:
            rows.append((f"f{'-'.join(map(str, fs))}", label, None, f"rejected: {exc}"))
    return rows


def ablate(cfg: RunConfig, out_dir: str | Path | None = None) -> Path:
    """Train and evaluate every ablation setting; write ``ablation.csv``."""
    cfg.validate()
    out = Path(out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    train_corpus = build_corpus(cfg)
    eval_corpus = build_corpus(cfg, split=1, count=cfg.eval_count) if cfg.eval_count else train_corpus
    path = out / "ablation.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        writer.writeheader()
        for row, label, run_cfg, status in ablation_settings(cfg):
            rec = {"row": row, "setting": label, "status": status,
                   "factors": "/".join(map(str, (run_cfg or cfg).factors))}
            if run_cfg is not None:
                rec.update(alpha=run_cfg.alpha, beta_p=run_cfg.beta_p, gamma_s=run_cfg.gamma_s)
                try:
                    result = train(run_cfg, out / f"row_{row}", corpus=train_corpus)
                    report = evaluate(run_cfg, result.state, eval_corpus)
                    rec.update(train_recon_mse=result.records[-1]["recon_mse"] if result.records else "",
                               recon_mse=report["recon_mse"], similarity=report["similarity"])
                except Exception as exc:  # noqa: BLE001 - one failed row must not stop the table
                    log.error("ablation row %s failed: %s", row, exc)
                    rec["status"] = f"error: {type(exc).__name__}: {exc}"
            else:
                log.error("ablation row %s %s", row, status)
            writer.writerow(rec)
            fh.flush()
    return path


# --------------------------------------------------------------------------
# timing


MIN_TIMING_UNITS = 32


def time_sampling(cfg: RunConfig, steps: int | None = None) -> dict:
    """Mean step time with q-sample alignment versus full-set alignment.

    Both modes train from the same initialization on the same batches; their
    steps are interleaved so background load affects both alike.
    """
    cfg.validate()
    steps = cfg.timing_steps if steps is None else steps
    corpus = build_corpus(cfg)
    min_units = min(min(t.counts()) for t in corpus.pooled)
    if min_units < MIN_TIMING_UNITS:
        raise ConfigError(f"timing needs >= {MIN_TIMING_UNITS} text units per granularity, "
                          f"found {min_units}; raise text_pool")
    states = {"sampled": TrainState.create(replace(cfg, full_set=False)),
              "full": TrainState.create(replace(cfg, full_set=True))}
    times: dict[str, list[float]] = {k: [] for k in states}
    for step in range(steps):
        idx = batch_indices(cfg.seed, step, len(corpus), cfg.batch)
        batch = (corpus.images[idx], [corpus.pooled[i] for i in idx])
        order = ("sampled", "full") if step % 2 == 0 else ("full", "sampled")
        for mode in order:
            times[mode].append(train_step(states[mode], *batch)["step_ms"])
    sampled, full = float(np.mean(times["sampled"])), float(np.mean(times["full"]))
    return {"steps": steps, "q": cfg.q, "min_units": int(min_units),
            "sampled_ms": sampled, "full_ms": full, "ratio": sampled / full,
            "sampled_step_ms": times["sampled"], "full_step_ms": times["full"]}
