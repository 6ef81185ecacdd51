"""Benchmark orchestration: the full incremental loop, persistence, metrics.

A run executes: initial CE training, class statistics, then per task —
snapshot, candidate sampling, replay training, drift calibration, new-class
statistics, shrinkage tuning, and evaluation with every configured
classifier.  Everything an emitted number depends on lands in the run
directory: resolved config, seed record, per-epoch loss rows, per-task
accuracy rows, and the final summary.  The metrics CSV is a pure function
of (config, seeds); wall-clock and host metadata go to a separate file so
identical runs stay byte-identical.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import calib as C
from . import classify as CL
from . import config as CFG
from . import data as D
from . import model as M
from . import replay as R
from . import train as TR
from .errors import ConfigError, ContractError, EngineError
from .tensor import Tensor

# named rng stream ids (entropy = [seed, stream, task])
_STREAM_MODEL = 0
_STREAM_TRAIN = 1
_STREAM_CANDIDATES = 2


@dataclass
class RunResult:
    run_dir: Path
    summary: dict            # classifier -> {"A_inc": ..., "A_last": ...}
    accuracy: dict           # classifier -> EvalResult
    gammas: list             # per-task tuned (gamma1, gamma2) or None


def _rng(seed: int, stream: int, task: int = 0):
    return np.random.default_rng([seed, stream, task])


def stream_from_config(config: dict) -> D.TaskStream:
    ds = config["dataset"]
    t_count, mode = config["tasks"]["count"], config["tasks"]["mode"]
    shuffle_seed = config["seeds"]["class_shuffle"]
    seed = config["seeds"]["randomness"]
    if ds["kind"] == "synthetic":
        return D.make_task_stream(CFG.build_synthetic_spec(config), t_count, mode,
                                  seed, shuffle_seed)
    loader = D.load_csv if ds["kind"] == "csv" else D.load_binary
    pool = loader(ds["train_path"], split="train")
    test = loader(ds["test_path"], split="test")
    return _partition_ingested(pool, test, ds, t_count, mode, seed, shuffle_seed)


def _partition_ingested(pool: D.LabeledSet, test: D.LabeledSet, ds: dict,
                        t_count: int, mode: str, seed: int, shuffle_seed: int) -> D.TaskStream:
    classes = pool.classes()
    sizes = D.group_sizes(len(classes), t_count, mode)
    order = np.random.default_rng(shuffle_seed).permutation(len(classes))
    shuffled = [classes[i] for i in order]
    groups, cursor = [], 0
    for size in sizes:
        groups.append(tuple(shuffled[cursor: cursor + size]))
        cursor += size

    rng = np.random.default_rng([seed, 9])
    labels = np.asarray(pool.y)
    test_labels = np.asarray(test.y)

    def carve(group):
        tr_rows, tr_y, va_rows, va_y = [], [], [], []
        for cid in group:
            rows = pool.x.data[labels == cid]
            perm = rng.permutation(len(rows))
            n_val = max(1, int(round(ds["val_fraction"] * len(rows))))
            val_idx, train_idx = perm[:n_val], perm[n_val:]
            tr_rows.append(rows[train_idx])
            tr_y.extend([cid] * len(train_idx))
            va_rows.append(rows[val_idx])
            va_y.extend([cid] * n_val)
        return (D.LabeledSet(Tensor(np.concatenate(tr_rows)), tuple(tr_y), "train"),
                D.LabeledSet(Tensor(np.concatenate(va_rows)), tuple(va_y), "val"))

    def test_of(group):
        keep = np.isin(test_labels, group)
        return D.LabeledSet(Tensor(test.x.data[keep]),
                            tuple(int(v) for v in test_labels[keep]), "test")

    carved = [carve(g) for g in groups]
    return D.TaskStream(
        mode, tuple(groups),
        tuple(tr for tr, _ in carved),
        tuple(va for _, va in carved),
        tuple(test_of(g) for g in groups),
    )


def _merged_val(stream: D.TaskStream, upto: int) -> D.LabeledSet:
    xs = np.concatenate([stream.val[j].x.data for j in range(upto + 1)])
    ys = tuple(y for j in range(upto + 1) for y in stream.val[j].y)
    return D.LabeledSet(Tensor(xs), ys, "val")


class _CsvLog:
    """Append-only (stage, task, epoch, key, value) rows."""

    def __init__(self, path: Path):
        self.path = path
        with path.open("w", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow(["stage", "task", "epoch", "key", "value"])

    def add(self, stage, task, epoch, key, value):
        if isinstance(value, float):
            value = repr(value)
        with self.path.open("a", newline="", encoding="utf-8") as fh:
            csv.writer(fh).writerow([stage, task, epoch, key, value])


def run_benchmark(config: dict, out_dir=None) -> RunResult:
    """Execute one seeded run end to end and persist its artifacts."""
    CFG.validate_config(config)
    seed = config["seeds"]["randomness"]
    shuffle_seed = config["seeds"]["class_shuffle"]
    tag = config["output"]["tag"] or f"run_s{seed}_c{shuffle_seed}"
    run_dir = Path(out_dir if out_dir is not None else config["output"]["dir"]) / tag
    run_dir.mkdir(parents=True, exist_ok=True)
    started = time.time()

    (run_dir / "config.json").write_text(json.dumps(config, indent=2, sort_keys=True),
                                         encoding="utf-8")
    (run_dir / "seeds.json").write_text(
        json.dumps({"randomness": seed, "class_shuffle": shuffle_seed}), encoding="utf-8")
    log = _CsvLog(run_dir / "metrics.csv")

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except EngineError as err:
            raise type(err)(f"stage {name!r}: {err}") from err

    stream = stage("dataset", stream_from_config, config)
    t_count = stream.task_count
    d = config["model"]["feature_dim"]
    family = CFG.build_family(config, input_dim=stream.train[0].input_dim)
    loss_cfg = CFG.build_loss_config(config)
    attack_cfg = CFG.build_attack_config(config) if config["attack"]["enabled"] else None
    drift_cfg = CFG.build_drift_config(config)
    cov_mode = config["covariance"]["mode"]
    svd_k = config["covariance"]["svd_k"] if cov_mode == "svd" else None
    classifiers = list(config["classifiers"])
    grid = tuple(config["shrinkage"]["grid"])
    use_maha = "mahalanobis" in classifiers

    rng_model = _rng(seed, _STREAM_MODEL)
    extractor = M.init_extractor(
        (stream.train[0].input_dim, *config["model"]["hidden"], d),
        tuple([config["model"]["activation"]] * len(config["model"]["hidden"]) + ["identity"]),
        rng_model)
    head = M.init_head(stream.class_groups[0], d, rng_model,
                       mode=config["model"]["head_mode"],
                       scale=config["model"]["cosine_scale"],
                       init_std=config["model"]["head_init_std"])
    state = M.ModelState(extractor, head, None, 0)

    state = stage("initial-training", TR.train_initial, state, stream.train[0],
                  loss_cfg, CFG.build_optim_config(config, initial=True),
                  _rng(seed, _STREAM_TRAIN, 0))

    store = C.PrototypeStore()

    def add_stats(task_index):
        stats = TR.compute_class_stats(state.extractor, stream.train[task_index])
        for cid, (mu, cov) in stats.items():
            store.add(cid, mu, cov, task=task_index, svd_k=svd_k)

    stage("statistics", add_stats, 0)

    gammas: list = []
    acc_rows: dict[str, list[list[float]]] = {name: [] for name in classifiers}

    def evaluate(task_index):
        gamma = None
        if use_maha:
            gamma = stage("shrinkage-tuning", C.tune_shrinkage, store, state.extractor,
                          _merged_val(stream, task_index), grid,
                          config["shrinkage"]["coupled"])
            log.add("calibration", task_index, "", "gamma1", gamma[0])
            log.add("calibration", task_index, "", "gamma2", gamma[1])
        gammas.append(gamma)
        for name in classifiers:
            row = []
            for j in range(task_index + 1):
                test = stream.test[j]
                pred = stage(f"eval-{name}", CL.predict, name, state, store, test.x,
                             *(gamma if gamma else (1.0, 1.0)))
                row.append(float(np.mean(pred == np.asarray(test.y))))
                log.add("eval", task_index, "", f"acc/{name}/group{j}", row[-1])
            acc_rows[name].append(row)

    evaluate(0)

    for t in range(1, t_count):
        state = M.begin_task(state, stream.class_groups[t], _rng(seed, _STREAM_MODEL, t),
                             init_std=config["model"]["head_init_std"])
        frozen_ext, _ = state.frozen
        frozen_sum = M.checksum(*state.frozen)

        candidates = None
        if config["replay"]["enabled"] and loss_cfg.lambda_kd > 0.0:
            candidates = stage("candidate-sampling", R.build_candidate_set,
                               frozen_ext, stream.train[t], store.prototypes(),
                               config["replay"]["k"], _rng(seed, _STREAM_CANDIDATES, t),
                               config["replay"]["cap"], family)

        noise_r = 0.0
        if attack_cfg is not None and attack_cfg.noise:
            noise_r = R.noise_magnitude(store.covariances(), d)
            log.add("attack", t, "", "noise_r", noise_r)

        state, task_log = stage("task-training", TR.run_task, state, stream.train[t],
                                candidates, store.prototypes(), noise_r, loss_cfg,
                                CFG.build_optim_config(config, initial=False),
                                attack_cfg, _rng(seed, _STREAM_TRAIN, t),
                                use_attack=config["attack"]["enabled"])
        for row in task_log.epochs:
            log.add("train", t, row["epoch"], "ce_loss", row["ce_loss"])
            log.add("train", t, row["epoch"], "kd_loss", row["kd_loss"])
            log.add("train", t, row["epoch"], "lr", row["lr"])

        if config["adc"]["enabled"]:
            def calibrate_old():
                shared = None
                for cid in store.class_ids():
                    drift = C.generate_drift_samples(frozen_ext, stream.train[t],
                                                     store.entries[cid].mu, drift_cfg)
                    feats_old = M.extract(frozen_ext, drift).data
                    feats_new = M.extract(state.extractor, drift).data
                    # cap the step at the GD stability bound; feature scale is
                    # data-dependent and a fixed lr can silently diverge
                    lr = min(config["adc"]["transfer_lr"], C.stable_transfer_lr(feats_old))
                    if config["adc"]["per_class"]:
                        w, delta = C.fit_transfer_matrix(
                            feats_old, feats_new, lr, config["adc"]["transfer_epochs"])
                    else:
                        if shared is None:
                            shared = C.fit_transfer_matrix(
                                feats_old, feats_new, lr, config["adc"]["transfer_epochs"])
                        w, _ = shared
                        delta = feats_new.mean(axis=0) - feats_old.mean(axis=0)
                    C.calibrate(store.entries[cid], w, delta, task=t)
            stage("calibration", calibrate_old)

        stage("statistics", add_stats, t)
        evaluate(t)
        if M.checksum(*state.frozen) != frozen_sum:
            raise ContractError(f"frozen model mutated during task {t}")

    summary = {}
    results = {}
    for name in classifiers:
        result = CL.metrics(acc_rows[name], t_count)
        results[name] = result
        summary[name] = {"A_inc": result.incremental, "A_last": result.final}
        log.add("summary", t_count - 1, "", f"A_inc/{name}", result.incremental)
        log.add("summary", t_count - 1, "", f"A_last/{name}", result.final)

    M.save_checkpoint(state, run_dir / "model.json")
    C.save_store(store, run_dir / "store.json")
    (run_dir / "meta.json").write_text(json.dumps({
        "wall_seconds": time.time() - started,
        "task_count": t_count,
        "argv": sys.argv,
        "engine_version": _package_version(),
    }), encoding="utf-8")
    return RunResult(run_dir, summary, results, gammas)


def _package_version() -> str:
    from . import __version__

    return __version__


# -- storage accounting ----------------------------------------------------------


def storage_report(n_old_classes: int, feature_dim: int,
                   n_candidates_per_class: int, n_task_samples: int,
                   svd_k: int | None = None, float_bytes: int = 8,
                   index_bytes: int = 4,
                   policy_bytes: int = D.POLICY_RECORD_BYTES) -> dict:
    """Exact byte counts per stored component.

    ``float_bytes``/``index_bytes`` parameterize the element width so the
    report can mirror external accounting conventions (e.g. f32 + int64).
    """
    if n_old_classes < 0:
        raise ConfigError("class count must be non-negative")
    d = feature_dim
    report = {
        "prototypes": n_old_classes * d * float_bytes,
        "covariances_full": n_old_classes * d * d * float_bytes,
        "candidate_indices": n_old_classes * n_candidates_per_class * index_bytes,
        "augmentation_params": n_task_samples * policy_bytes,
    }
    if svd_k is not None:
        report["covariances_svd"] = (
            n_old_classes * C.decomposed_scalars(d, svd_k) * float_bytes)
    return report


def format_storage_table(report: dict) -> str:
    lines = [f"{'component':<22}{'bytes':>14}{'MB':>10}"]
    for key, nbytes in report.items():
        lines.append(f"{key:<22}{nbytes:>14}{nbytes / 1e6:>10.2f}")
    return "\n".join(lines)
