"""Experiment runner, hyperparameter sweeps, and comparison reports.

A run is described by a RunConfig (parsed strictly from JSON; unknown keys
are rejected). ``run_experiment`` trains the configured model, evaluates
validation metrics on a fixed schedule, early-stops on NDCG@10, restores
the best-validation snapshot, and reports test metrics. Identical configs
produce byte-identical metrics CSVs; wall time appears only in run
summaries and never in sweep reports, so parallel sweeps are reproducible.

``two_stage_sweep`` tunes the whole model under AdamW first, then fixes
the Adam-group hyperparameters at the stage-1 optimum and sweeps only the
Muon group. ``lr_sweep`` maps out the divergence boundary. ``compare``
turns run summaries into step-reduction and metric-improvement rows.

All budgets are in optimizer steps; epochs are derived and reported
informationally.
"""

import dataclasses
import json
import math
import os
import time
from dataclasses import dataclass
from multiprocessing import get_context

import numpy as np

from .data import (
    SYNTH_FACTORS,
    SYNTH_ITEMS,
    SYNTH_LEN_RANGE,
    SYNTH_TEMPERATURE,
    SYNTH_USERS,
    InteractionDataset,
    five_core_filter,
    ingest_csv,
    leave_one_out_split,
    make_batches,
    synth_generate,
)
from .linalg import NonFiniteError
from .metrics import (
    EVAL_KS,
    ConvergenceSpec,
    ConvergenceTracker,
    Decision,
    rank_of_target,
    recall_ndcg,
)
from .model import ModelKind, ModelSpec, init_model, loss_and_backward, score_last
from .optim import AdamSpec, AdamState, MuonSpec, adam_step, hybrid_step, init_states

OPTIMIZERS = ("adam", "adamw", "muonrec")
EVAL_BATCH_SIZE = 512
EPOCH_SEED_STRIDE = 1000003

DEFAULT_ADAM_GRID = {
    "lrs": (1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3),
    "wds": (1e-5, 1e-4, 1e-3, 1e-2),
}
DEFAULT_MUON_GRID = {
    "lrs": (1e-5, 3e-5, 1e-4, 3e-4, 1e-3, 3e-3, 1e-2),
    "wds": (1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3),
}

_SYNTH_DEFAULTS = {
    "num_users": SYNTH_USERS,
    "num_items": SYNTH_ITEMS,
    "factors": SYNTH_FACTORS,
    "temperature": SYNTH_TEMPERATURE,
    "seq_len_range": list(SYNTH_LEN_RANGE),
    "seed": 0,
}

_dataset_cache = {}


def _reject_unknown(mapping: dict, allowed, where: str) -> None:
    unknown = sorted(set(mapping) - set(allowed))
    if unknown:
        raise ValueError(f"unknown key(s) {unknown} in {where}")


@dataclass
class DatasetConfig:
    """Exactly one source: a CSV path, or synthetic-generator parameters."""

    csv: str = None
    synthetic: dict = None

    def __post_init__(self):
        if (self.csv is None) == (self.synthetic is None):
            raise ValueError(
                "dataset config needs exactly one of 'csv' or 'synthetic'"
            )
        if self.synthetic is not None:
            _reject_unknown(self.synthetic, _SYNTH_DEFAULTS, "dataset.synthetic")
            self.synthetic = {**_SYNTH_DEFAULTS, **self.synthetic}

    def to_dict(self) -> dict:
        if self.csv is not None:
            return {"csv": self.csv}
        return {"synthetic": dict(self.synthetic)}

    def build(self, cache: bool = True) -> InteractionDataset:
        key = json.dumps(self.to_dict(), sort_keys=True)
        if cache and key in _dataset_cache:
            return _dataset_cache[key]
        if self.csv is not None:
            dataset = leave_one_out_split(five_core_filter(ingest_csv(self.csv)))
        else:
            s = self.synthetic
            dataset = synth_generate(
                num_users=s["num_users"],
                num_items=s["num_items"],
                factors=s["factors"],
                temperature=s["temperature"],
                seq_len_range=tuple(s["seq_len_range"]),
                seed=s["seed"],
            )
        if cache:
            _dataset_cache[key] = dataset
        return dataset


@dataclass
class RunConfig:
    dataset: DatasetConfig
    model_kind: ModelKind
    optimizer: str
    adam: AdamSpec = AdamSpec()
    muon: MuonSpec = None
    embed_dim: int = 64
    max_len: int = 50
    ffn_dim: int = None
    batch_size: int = 256
    max_steps: int = 200
    convergence: ConvergenceSpec = ConvergenceSpec()
    eval_ks: tuple = EVAL_KS
    exclude_seen: bool = True
    seed: int = 0
    out_dir: str = None
    save_checkpoint: bool = False

    def __post_init__(self):
        if isinstance(self.model_kind, str):
            self.model_kind = ModelKind(self.model_kind)
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(
                f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}"
            )
        if (self.optimizer == "muonrec") != (self.muon is not None):
            raise ValueError(
                "a MuonSpec must be present exactly when optimizer='muonrec'"
            )
        if self.optimizer == "adam" and self.adam.weight_decay != 0.0:
            raise ValueError(
                "optimizer 'adam' implies weight_decay 0; use 'adamw' to decay"
            )
        if self.ffn_dim is None:
            self.ffn_dim = 2 * self.embed_dim
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        self.eval_ks = tuple(int(k) for k in self.eval_ks)
        if not self.eval_ks or any(k < 1 for k in self.eval_ks):
            raise ValueError(f"eval_ks must be positive, got {self.eval_ks}")
        if list(self.eval_ks) != sorted(set(self.eval_ks)):
            raise ValueError(f"eval_ks must be strictly increasing, got {self.eval_ks}")
        target_k = int(self.convergence.target_metric.split("@")[1])
        if target_k not in self.eval_ks:
            raise ValueError(
                f"eval_ks must include the convergence target K={target_k}"
            )
        if self.seed < 0:
            raise ValueError(f"seed must be >= 0, got {self.seed}")

    def resolved(self) -> dict:
        """The fully-defaulted config as a JSON-ready dict (provenance)."""
        return {
            "dataset": self.dataset.to_dict(),
            "model": {
                "kind": self.model_kind.value,
                "embed_dim": self.embed_dim,
                "max_len": self.max_len,
                "ffn_dim": self.ffn_dim,
            },
            "optimizer": self.optimizer,
            "adam": dataclasses.asdict(self.adam),
            "muon": None if self.muon is None else dataclasses.asdict(self.muon),
            "batch_size": self.batch_size,
            "max_steps": self.max_steps,
            "convergence": dataclasses.asdict(self.convergence),
            "eval_ks": list(self.eval_ks),
            "exclude_seen": self.exclude_seen,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "save_checkpoint": self.save_checkpoint,
        }


def config_from_dict(raw: dict) -> RunConfig:
    """Parse a config mapping strictly; unknown keys anywhere are errors."""
    _reject_unknown(
        raw,
        (
            "dataset", "model", "optimizer", "adam", "muon", "batch_size",
            "max_steps", "convergence", "eval_ks", "exclude_seen", "seed",
            "out_dir", "save_checkpoint",
        ),
        "config",
    )
    if "dataset" not in raw:
        raise ValueError("config is missing 'dataset'")
    if "model" not in raw:
        raise ValueError("config is missing 'model'")
    if "optimizer" not in raw:
        raise ValueError("config is missing 'optimizer'")
    ds_raw = raw["dataset"]
    _reject_unknown(ds_raw, ("csv", "synthetic"), "config.dataset")
    dataset = DatasetConfig(**ds_raw)
    model_raw = dict(raw["model"])
    _reject_unknown(model_raw, ("kind", "embed_dim", "max_len", "ffn_dim"),
                    "config.model")
    if "kind" not in model_raw:
        raise ValueError("config.model is missing 'kind'")
    adam_raw = dict(raw.get("adam", {}))
    _reject_unknown(adam_raw, ("eta", "beta1", "beta2", "epsilon",
                               "weight_decay"), "config.adam")
    muon = None
    if raw.get("muon") is not None:
        muon_raw = dict(raw["muon"])
        _reject_unknown(muon_raw, ("eta", "mu", "weight_decay", "ns_iters",
                                   "rms_scale", "nesterov"), "config.muon")
        muon = MuonSpec(**muon_raw)
    conv_raw = dict(raw.get("convergence", {}))
    _reject_unknown(conv_raw, ("eval_every", "patience", "target_metric"),
                    "config.convergence")
    kwargs = {}
    for key in ("batch_size", "max_steps", "exclude_seen", "seed", "out_dir",
                "save_checkpoint"):
        if key in raw:
            kwargs[key] = raw[key]
    if "eval_ks" in raw:
        kwargs["eval_ks"] = tuple(raw["eval_ks"])
    return RunConfig(
        dataset=dataset,
        model_kind=model_raw["kind"],
        optimizer=raw["optimizer"],
        adam=AdamSpec(**adam_raw),
        muon=muon,
        embed_dim=model_raw.get("embed_dim", 64),
        max_len=model_raw.get("max_len", 50),
        ffn_dim=model_raw.get("ffn_dim"),
        convergence=ConvergenceSpec(**conv_raw),
        **kwargs,
    )


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return config_from_dict(json.load(fh))


@dataclass
class RunRecord:
    rows: list
    summary: dict


def _model_spec(config: RunConfig, dataset: InteractionDataset) -> ModelSpec:
    return ModelSpec(
        kind=config.model_kind,
        vocab_size=dataset.num_items + 1,
        embed_dim=config.embed_dim,
        max_len=config.max_len,
        ffn_dim=config.ffn_dim if config.model_kind is ModelKind.SASREC_LITE else 0,
        seed=config.seed,
    )


def _init_opt_states(params, config: RunConfig) -> dict:
    if config.optimizer == "muonrec":
        return init_states(params)
    return {
        p.name: AdamState(m=np.zeros_like(p.value), v=np.zeros_like(p.value))
        for p in params
    }


def _apply_step(params, states, config: RunConfig) -> None:
    if config.optimizer == "muonrec":
        hybrid_step(params, None, states, config.muon, config.adam)
        return
    for p in sorted(params, key=lambda t: t.name):
        adam_step(p.value, p.grad, states[p.name], config.adam, name=p.name)


def _exclusion_sets(dataset: InteractionDataset, stage: str) -> list:
    sets = []
    for u in range(dataset.num_users):
        seen = set(dataset.train_prefix(u))
        if stage == "test":
            seen.add(dataset.val_item(u))
            target = dataset.test_item(u)
        else:
            target = dataset.val_item(u)
        seen.discard(target)
        sets.append(seen)
    return sets


def _evaluate(params, mspec, dataset, config, stage):
    if config.exclude_seen:
        exclusions = _exclusion_sets(dataset, stage)
    else:
        exclusions = [frozenset()] * dataset.num_users
    ranks = []
    user = 0
    for batch in make_batches(dataset, config.max_len, EVAL_BATCH_SIZE, stage):
        scores = score_last(params, mspec, batch)
        for i in range(scores.shape[0]):
            target = int(batch.targets[i, -1])
            ranks.append(rank_of_target(scores[i], target, exclusions[user]))
            user += 1
    return recall_ndcg(ranks, config.eval_ks)


def _metric_row(step, train_loss, result, ks) -> dict:
    row = {"step": int(step), "train_loss": train_loss}
    for k in ks:
        row[f"recall@{k}"] = result.recall[k]
    for k in ks:
        row[f"ndcg@{k}"] = result.ndcg[k]
    return row


def metrics_csv_text(record: RunRecord, ks) -> str:
    header = ["step", "train_loss"]
    header += [f"recall@{k}" for k in ks] + [f"ndcg@{k}" for k in ks]
    lines = [",".join(header)]
    for row in record.rows:
        cells = [str(row["step"])]
        cells += [f"{row[col]:.10g}" for col in header[1:]]
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def run_experiment(config: RunConfig, dataset: InteractionDataset = None) -> RunRecord:
    """Train per config, early-stop on validation NDCG@10, report test
    metrics at the best-validation snapshot.

    A non-finite training loss or gradient stops training and sets the
    `diverged` flag instead of raising, so sweeps can record the failure.
    Deterministic apart from the wall_time_seconds summary field.
    """
    started = time.monotonic()
    if dataset is None:
        dataset = config.dataset.build()
    mspec = _model_spec(config, dataset)
    params = init_model(mspec)
    states = _init_opt_states(params, config)
    tracker = ConvergenceTracker(config.convergence)

    best_values = [p.value.copy() for p in params]
    initial_result = _evaluate(params, mspec, dataset, config, "val")
    rows = [_metric_row(0, float("nan"), initial_result, config.eval_ks)]
    tracker.observe(0, initial_result.ndcg[10])

    step = 0
    epoch = 0
    diverged = False
    stop = False
    initial_loss = None
    last_loss = None
    window_losses = []
    eval_every = config.convergence.eval_every
    with np.errstate(all="ignore"):
        while not stop and step < config.max_steps:
            shuffle_seed = config.seed * EPOCH_SEED_STRIDE + epoch
            epoch += 1
            for batch in make_batches(dataset, config.max_len,
                                      config.batch_size, "train",
                                      seed=shuffle_seed):
                try:
                    loss = loss_and_backward(params, mspec, batch)
                    if initial_loss is None:
                        initial_loss = loss
                    last_loss = loss
                    window_losses.append(loss)
                    _apply_step(params, states, config)
                    step += 1
                    if step % eval_every == 0:
                        result = _evaluate(params, mspec, dataset, config,
                                           "val")
                        rows.append(_metric_row(
                            step, float(np.mean(window_losses)), result,
                            config.eval_ks))
                        window_losses = []
                        decision = tracker.observe(step, result.ndcg[10])
                        if tracker.best_step() == step:
                            best_values = [p.value.copy() for p in params]
                        if decision is Decision.STOP:
                            stop = True
                            break
                except NonFiniteError:
                    diverged = True
                    stop = True
                    break
                if step >= config.max_steps:
                    stop = True
                    break

    for p, value in zip(params, best_values):
        p.value = value
    test_result = _evaluate(params, mspec, dataset, config, "test")

    steps_per_epoch = math.ceil(dataset.num_users / config.batch_size)
    summary = {
        "optimizer": config.optimizer,
        "model_kind": config.model_kind.value,
        "seed": config.seed,
        "converged_step": tracker.best_step(),
        "best_val_ndcg10": tracker.best_metric(),
        "test_recall": {str(k): test_result.recall[k] for k in config.eval_ks},
        "test_ndcg": {str(k): test_result.ndcg[k] for k in config.eval_ks},
        "steps_trained": step,
        "diverged": diverged,
        "initial_train_loss": initial_loss,
        "final_train_loss": last_loss,
        "dataset_fingerprint": dataset.fingerprint(),
        "num_users": dataset.num_users,
        "num_items": dataset.num_items,
        "steps_per_epoch": steps_per_epoch,
        "epochs_completed": round(step / steps_per_epoch, 4),
        "wall_time_seconds": round(time.monotonic() - started, 3),
        "config": config.resolved(),
    }
    record = RunRecord(rows=rows, summary=summary)
    if config.out_dir is not None:
        write_outputs(record, config, params)
    return record


def write_outputs(record: RunRecord, config: RunConfig, params=None) -> None:
    os.makedirs(config.out_dir, exist_ok=True)
    csv_path = os.path.join(config.out_dir, "metrics.csv")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(metrics_csv_text(record, config.eval_ks))
    with open(os.path.join(config.out_dir, "summary.json"), "w",
              encoding="utf-8") as fh:
        json.dump(record.summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if config.save_checkpoint and params is not None:
        ordered = sorted(params, key=lambda p: p.name)
        blob = b"".join(p.value.astype("<f8").tobytes(order="C")
                        for p in ordered)
        with open(os.path.join(config.out_dir, "checkpoint.bin"), "wb") as fh:
            fh.write(blob)
        manifest = {
            "dtype": "<f8",
            "order": "C",
            "params": [{"name": p.name, "shape": list(p.value.shape)}
                       for p in ordered],
        }
        with open(os.path.join(config.out_dir, "checkpoint.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2)
            fh.write("\n")


def _cell_result(config: RunConfig) -> dict:
    """One sweep cell: a trimmed, deterministic view of the run summary."""
    try:
        summary = run_experiment(config).summary
    except Exception as exc:  # isolate, record, continue
        return {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
    return {
        "status": "ok",
        "best_val_ndcg10": summary["best_val_ndcg10"],
        "converged_step": summary["converged_step"],
        "diverged": summary["diverged"],
        "initial_train_loss": summary["initial_train_loss"],
        "final_train_loss": summary["final_train_loss"],
        "test_ndcg10": summary["test_ndcg"]["10"],
        "dataset_fingerprint": summary["dataset_fingerprint"],
    }


def _map_cells(configs, parallelism: int) -> list:
    if parallelism <= 1:
        return [_cell_result(c) for c in configs]
    with get_context("fork").Pool(parallelism) as pool:
        return pool.map(_cell_result, configs)


def _check_grid(grid: dict, where: str) -> dict:
    _reject_unknown(grid, ("lrs", "wds"), where)
    lrs, wds = list(grid.get("lrs", ())), list(grid.get("wds", ()))
    if not lrs or not wds:
        raise ValueError(f"{where} needs non-empty 'lrs' and 'wds'")
    return {"lrs": lrs, "wds": wds}


def _select_winner(rows: list, stage: str) -> dict:
    ok = [r for r in rows if r["status"] == "ok"]
    if not ok:
        raise RuntimeError(f"every {stage} cell failed")
    return min(ok, key=lambda r: (-r["best_val_ndcg10"], r["lr"], r["wd"]))


def two_stage_sweep(
    base: RunConfig,
    adam_grid: dict = None,
    muon_grid: dict = None,
    parallelism: int = 1,
) -> dict:
    """Stage 1 tunes the whole model under AdamW; stage 2 fixes the Adam
    group at the stage-1 winner and sweeps only the Muon group.

    Ties are broken toward smaller lr, then smaller wd. Failed cells are
    recorded and skipped; the report is independent of parallelism.
    """
    adam_grid = _check_grid(adam_grid or DEFAULT_ADAM_GRID, "adam_grid")
    muon_grid = _check_grid(muon_grid or DEFAULT_MUON_GRID, "muon_grid")
    base.dataset.build()  # warm the cache once before any fork

    stage1_configs, stage1_rows = [], []
    for lr in adam_grid["lrs"]:
        for wd in adam_grid["wds"]:
            cfg = dataclasses.replace(
                base,
                optimizer="adamw",
                adam=dataclasses.replace(base.adam, eta=lr, weight_decay=wd),
                muon=None,
                out_dir=None,
            )
            stage1_configs.append(cfg)
            stage1_rows.append({"lr": lr, "wd": wd})
    for row, result in zip(stage1_rows,
                           _map_cells(stage1_configs, parallelism)):
        row.update(result)
    stage1_winner = _select_winner(stage1_rows, "stage 1")
    fixed_adam = dataclasses.replace(
        base.adam, eta=stage1_winner["lr"], weight_decay=stage1_winner["wd"]
    )

    muon_base = base.muon if base.muon is not None else MuonSpec()
    stage2_configs, stage2_rows = [], []
    for lr in muon_grid["lrs"]:
        for wd in muon_grid["wds"]:
            cfg = dataclasses.replace(
                base,
                optimizer="muonrec",
                adam=fixed_adam,
                muon=dataclasses.replace(muon_base, eta=lr, weight_decay=wd),
                out_dir=None,
            )
            stage2_configs.append(cfg)
            stage2_rows.append({"lr": lr, "wd": wd})
    for row, result in zip(stage2_rows,
                           _map_cells(stage2_configs, parallelism)):
        row.update(result)
    stage2_winner = _select_winner(stage2_rows, "stage 2")

    return {
        "model_kind": base.model_kind.value,
        "seed": base.seed,
        "stage1": {
            "optimizer": "adamw",
            "grid": adam_grid,
            "runs": stage1_rows,
            "winner": stage1_winner,
        },
        "stage2": {
            "optimizer": "muonrec",
            "grid": muon_grid,
            "fixed_adam": dataclasses.asdict(fixed_adam),
            "runs": stage2_rows,
            "winner": stage2_winner,
        },
    }


def lr_sweep(base: RunConfig, lrs, parallelism: int = 1) -> list:
    """One run per learning rate; divergence is recorded, not raised.

    The swept rate is the run's single learning-rate knob: it is applied
    to every parameter group, so a muonrec sweep moves the Muon eta and
    the Adam-group eta together. Per-group tuning belongs to
    two_stage_sweep; this op maps out the method's stability range.

    Each ok row carries a "regressed" flag; see _flag_regressions for
    the definition.
    """
    lrs = list(lrs)
    if len(lrs) < 3:
        raise ValueError(f"lr_sweep needs >= 3 learning rates, got {len(lrs)}")
    base.dataset.build()
    configs = []
    for lr in lrs:
        cfg = dataclasses.replace(
            base, adam=dataclasses.replace(base.adam, eta=lr), out_dir=None
        )
        if base.optimizer == "muonrec":
            cfg = dataclasses.replace(
                cfg, muon=dataclasses.replace(base.muon, eta=lr)
            )
        configs.append(cfg)
    rows = []
    for lr, result in zip(lrs, _map_cells(configs, parallelism)):
        row = {"lr": lr}
        row.update(result)
        rows.append(row)
    _flag_regressions(rows)
    return rows


def _flag_regressions(rows: list) -> None:
    """Mark each ok row whose training regressed.

    A rate regresses if its run diverged, ended above its own initial
    loss, or ended above the best final loss reached at any smaller rate
    in the same sweep (the right side of the lr-performance bell).
    """
    for row in rows:
        if row["status"] != "ok":
            continue
        smaller = [
            r["final_train_loss"] for r in rows
            if r["status"] == "ok" and r["lr"] < row["lr"]
            and r["final_train_loss"] is not None
        ]
        final = row["final_train_loss"]
        initial = row["initial_train_loss"]
        row["regressed"] = bool(
            row["diverged"]
            or (final is not None and initial is not None and final > initial)
            or (final is not None and smaller and final > min(smaller))
        )


def lr_sweep_csv_text(rows: list) -> str:
    lines = ["lr,best_ndcg10,initial_loss,final_loss,diverged,regressed"]
    for r in rows:
        if r["status"] != "ok":
            lines.append(f"{r['lr']:.10g},error,error,error,error,error")
            continue
        cells = [f"{r['lr']:.10g}"]
        for key in ("best_val_ndcg10", "initial_train_loss",
                    "final_train_loss"):
            value = r.get(key)
            cells.append("" if value is None else f"{value:.10g}")
        cells.append(str(bool(r["diverged"])).lower())
        cells.append(str(bool(r["regressed"])).lower())
        lines.append(",".join(cells))
    return "\n".join(lines) + "\n"


def compare(summaries: list) -> dict:
    """Step-reduction and metric-improvement percentages vs the first
    summary, following the (new - old)/old convention for metrics and
    (old - new)/old for steps."""
    if len(summaries) < 2:
        raise ValueError("compare needs at least two run summaries")
    fingerprints = {s["dataset_fingerprint"] for s in summaries}
    if len(fingerprints) != 1:
        raise ValueError("dataset fingerprints differ; runs are not comparable")
    kinds = {s["model_kind"] for s in summaries}
    if len(kinds) != 1:
        raise ValueError(f"model kinds differ: {sorted(kinds)}")

    def row_of(s):
        return {
            "optimizer": s["optimizer"],
            "seed": s.get("seed"),
            "converged_step": s["converged_step"],
            "test_recall": dict(s["test_recall"]),
            "test_ndcg": dict(s["test_ndcg"]),
        }

    base = summaries[0]
    ks = sorted(base["test_ndcg"], key=int)
    improvements = []
    for s in summaries[1:]:
        entry = {"optimizer": s["optimizer"], "vs": base["optimizer"]}
        base_step = base["converged_step"]
        entry["step_reduction_pct"] = (
            None if base_step == 0
            else 100.0 * (base_step - s["converged_step"]) / base_step
        )
        for name in ("recall", "ndcg"):
            for k in ks:
                b = base[f"test_{name}"][k]
                v = s[f"test_{name}"][k]
                entry[f"{name}@{k}_improvement_pct"] = (
                    None if b == 0 else 100.0 * (v - b) / b
                )
        improvements.append(entry)
    return {
        "baseline": base["optimizer"],
        "rows": [row_of(s) for s in summaries],
        "improvements": improvements,
    }
