"""End-to-end pipeline commands.

Each command reads artifacts from disk, does one stage (reference data,
preprocessing, training, generation, evaluation, epsilon sweep) and writes
its outputs back to disk. Given identical inputs and seed every command
reproduces identical output bytes; wall-clock timestamps only ever go to
the sidecar run log.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .encoding import (
    Table,
    apply_filters,
    encode_table,
    fit_schema,
    holdout_split,
    load_matrix,
    save_matrix,
)
from .errors import ConfigError, RunError
from .evaluation import (
    bernoulli_divergence,
    categorical_divergence,
    evaluate_fidelity,
    evaluate_utility,
    fidelity_text,
    pca_project,
    sample_rows,
    split_features_labels,
    standard_slices,
    subpopulation_report,
    utility_text,
    write_pca_csv,
    _average_ranks,
)
from .gan import DpTraining, GanConfig, generate, init_state, load_checkpoint, save_checkpoint, train_epoch
from .privacy import Accountant, DpConfig, PrivacyLog, calibrate_sigma
from .reference import ReferenceDataSpec, default_spec, make_reference_data
from .rng import substream
from .schema import Schema

EPSILON_SWEEP = (1.0, 10.0, 20.0, 30.0, math.inf)


@dataclass
class RunConfig:
    """Everything one training run needs, resolvable to a stable hash."""

    data_matrix: str
    schema: str
    out_dir: str
    seed: int
    epochs: int
    gan: GanConfig
    dp: DpConfig | None = None
    reps: int = 3
    allow_dp_any_variant: bool = False
    validation_rows: int = 10000

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.reps < 1:
            raise ConfigError(f"reps must be >= 1, got {self.reps}")
        if self.dp is not None and self.gan.variant != "wgan_gp" and not self.allow_dp_any_variant:
            raise ConfigError(
                f"private training is wired to the wgan_gp variant; pass "
                f"allow_dp_any_variant to use it with {self.gan.variant!r}"
            )

    def to_json(self) -> dict:
        obj = {
            "data_matrix": str(self.data_matrix),
            "schema": str(self.schema),
            "out_dir": str(self.out_dir),
            "seed": self.seed,
            "epochs": self.epochs,
            "gan": self.gan.to_json(),
            "reps": self.reps,
            "allow_dp_any_variant": self.allow_dp_any_variant,
            "validation_rows": self.validation_rows,
        }
        if self.dp is not None:
            obj["dp"] = {
                "clip_norm": self.dp.clip_norm,
                "noise_multiplier": self.dp.noise_multiplier,
                "epsilon": self.dp.epsilon,
                "delta": self.dp.delta,
                "sampling_rate": self.dp.sampling_rate,
                "disable_clipping": self.dp.disable_clipping,
            }
        return obj

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# ---------------------------------------------------------------------------
# small shared helpers


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing artifact: {p}")
    return p


def _write_json(path, obj) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _log_line(out_dir, message: str) -> None:
    # the one place timestamps are allowed
    with open(Path(out_dir) / "run_log.txt", "a", encoding="utf-8") as fh:
        fh.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {message}\n")


def spearman(xs, ys) -> float:
    """Rank correlation with average ranks for ties."""
    rx = _average_ranks(np.asarray(xs, dtype=np.float64))
    ry = _average_ranks(np.asarray(ys, dtype=np.float64))
    if np.all(rx == rx[0]) or np.all(ry == ry[0]):
        raise ConfigError("spearman needs variation in both sequences")
    return float(np.corrcoef(rx, ry)[0, 1])


# ---------------------------------------------------------------------------
# commands


def cmd_make_reference_data(out_dir, seed: int, n_rows: int = 20000, spec_path=None) -> dict:
    if spec_path is not None:
        with open(_require(spec_path), encoding="utf-8") as fh:
            spec = ReferenceDataSpec.from_json(json.load(fh))
    else:
        spec = default_spec(n_rows)
    paths = make_reference_data(spec, seed, out_dir)
    _log_line(out_dir, f"make-reference-data seed={seed} rows={spec.n_rows}")
    return {k: str(v) for k, v in paths.items()}


def cmd_preprocess(data_csv, schema_path, out_dir, seed: int) -> dict:
    """Filter, split by the schema's year-like column, fit, encode, cache."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = Table.read_csv(_require(data_csv))
    schema = Schema.load(_require(schema_path))
    table = apply_filters(table, schema.filters)
    if schema.split_column is None:
        raise ConfigError("schema has no split column; cannot hold out a test set")
    train_table, test_table = holdout_split(table, schema.split_column)
    fitted = fit_schema(schema, train_table, seed=seed)
    matrix = encode_table(train_table, fitted, seed=seed)

    paths = {
        "train_csv": out / "train.csv",
        "test_csv": out / "test.csv",
        "schema": out / "schema_fitted.json",
        "matrix": out / "train_matrix.bin",
    }
    train_table.write_csv(paths["train_csv"])
    test_table.write_csv(paths["test_csv"])
    fitted.save(paths["schema"])
    save_matrix(paths["matrix"], matrix)
    manifest = {
        "rows_train": len(train_table),
        "rows_test": len(test_table),
        "encoded_width": matrix.shape[1],
        "seed": seed,
        "paths": {k: str(v) for k, v in paths.items()},
    }
    _write_json(out / "preprocess_manifest.json", manifest)
    _log_line(out, f"preprocess rows={len(table)} -> train={len(train_table)} test={len(test_table)}")
    return manifest


def selection_metric(validation: np.ndarray, synth: np.ndarray, schema: Schema) -> float:
    """Mean of the divergences that exist for this schema (bernoulli/categorical)."""
    parts = [
        d
        for d in (
            bernoulli_divergence(validation, synth, schema),
            categorical_divergence(validation, synth, schema),
        )
        if d is not None
    ]
    if not parts:
        raise ConfigError("schema has no discrete features to select checkpoints on")
    return float(np.mean(parts))


def resolve_dp(dp: DpConfig, q: float, planned_steps: int) -> DpConfig:
    """Fill in the sampling rate; a zero noise multiplier means 'calibrate'.

    Calibration finds the smallest noise multiplier whose accountant stays
    within (epsilon, delta) for the planned number of critic steps.
    """
    if math.isinf(dp.epsilon) and dp.noise_multiplier == 0.0:
        raise ConfigError("cannot calibrate noise for an infinite epsilon target")
    sigma = dp.noise_multiplier
    if sigma == 0.0:
        sigma = calibrate_sigma(dp.epsilon, dp.delta, q, planned_steps)
    return replace(dp, sampling_rate=q, noise_multiplier=sigma)


def cmd_train(config: RunConfig) -> dict:
    out = Path(config.out_dir)
    (out / "checkpoints").mkdir(parents=True, exist_ok=True)
    data = load_matrix(_require(config.data_matrix))
    schema = Schema.load(_require(config.schema))
    if config.gan.out_width != data.shape[1]:
        raise ConfigError(
            f"model width {config.gan.out_width} != data width {data.shape[1]}"
        )

    n = data.shape[0]
    dp_training = None
    log_path = None
    config_used = config
    if config.dp is not None:
        q = config.gan.batch_size / n
        planned = config.epochs * (n // config.gan.batch_size)
        dp = resolve_dp(config.dp, q, planned)
        config_used = replace(config, dp=dp)
        log_path = out / "privacy_log.csv"
        log_path.unlink(missing_ok=True)  # idempotent re-runs
        dp_training = DpTraining(dp=dp, accountant=Accountant(), log=PrivacyLog(log_path))

    n_val = min(config.validation_rows, n)
    validation = sample_rows(data, n_val, substream(config.seed, "validation"))

    state = init_state(config_used.gan, config.seed)
    epoch_rows = []
    budget_stopped = False
    for epoch in range(config.epochs):
        state, summary = train_epoch(state, data, dp_training)
        synth = generate(state, n_val, config.seed)
        metric = selection_metric(validation, synth, schema)
        ckpt = out / "checkpoints" / f"epoch_{epoch + 1:04d}.ckpt"
        save_checkpoint(state, ckpt)
        epoch_rows.append(
            {
                "epoch": epoch + 1,
                "checkpoint": str(ckpt),
                "selection_metric": metric,
                "critic_loss": summary.mean_critic_loss,
                "gen_loss": summary.mean_gen_loss,
                "epsilon": summary.epsilon,
            }
        )
        _log_line(out, f"epoch {epoch + 1} metric={metric:.6f}")
        if summary.budget_stopped:
            budget_stopped = True
            if epoch == 0:
                dump = out / "accountant_dump.json"
                _write_json(dump, dp_training.accountant.to_json())
                raise RunError(
                    f"privacy budget (epsilon={config_used.dp.epsilon}) exhausted "
                    f"after {state.critic_steps} critic steps, before the first "
                    f"epoch completed; accountant state dumped to {dump}"
                )
            break

    best = min(epoch_rows, key=lambda r: r["selection_metric"])
    selected = {
        "epoch": best["epoch"],
        "checkpoint": best["checkpoint"],
        "selection_metric": best["selection_metric"],
    }
    _write_json(out / "selected.json", selected)
    manifest = {
        "config": config_used.to_json(),
        "config_hash": config_used.config_hash(),
        "seed": config.seed,
        "epochs_run": len(epoch_rows),
        "budget_stopped": budget_stopped,
        "critic_steps": state.critic_steps,
        "gen_steps": state.gen_steps,
        "selected": selected,
        "epochs": epoch_rows,
        "accountant": dp_training.accountant.to_json() if dp_training else None,
        "privacy_log": str(log_path) if log_path else None,
        # experiment repetitions retrain the generative model from scratch
        # under a fresh seed (each repetition is its own run directory);
        # downstream classifiers additionally use per-repetition sub-streams
        "repetition_policy": "generative model retrained per repetition",
    }
    _write_json(out / "manifest.json", manifest)
    return manifest


def cmd_generate(checkpoint_path, schema_path, out_csv, n: int, seed: int) -> Path:
    state = load_checkpoint(_require(checkpoint_path))
    schema = Schema.load(_require(schema_path))
    matrix = generate(state, n, seed)
    from .encoding import decode_matrix

    table = decode_matrix(matrix, schema)
    out = Path(out_csv)
    out.parent.mkdir(parents=True, exist_ok=True)
    table.write_csv(out)
    return out


def cmd_evaluate(
    train_csv,
    test_csv,
    synth_csv,
    schema_path,
    out_dir,
    seed: int,
    reps: int = 3,
    sex_column: str = "sex",
    age_column: str = "age",
) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    schema = Schema.load(_require(schema_path))
    train_table = Table.read_csv(_require(train_csv))
    test_table = Table.read_csv(_require(test_csv))
    synth_table = Table.read_csv(_require(synth_csv))
    x_train = encode_table(train_table, schema, seed=seed)
    x_test = encode_table(test_table, schema, seed=seed)
    x_synth = encode_table(synth_table, schema, seed=seed)

    fidelity = evaluate_fidelity(x_train, x_synth, schema, seed=seed)

    rep_seeds = [int(s) for s in substream(seed, "eval", 55).integers(0, 2**31 - 1, size=reps)]
    feats_synth, labels_synth = split_features_labels(x_synth, schema)
    feats_train, labels_train = split_features_labels(x_train, schema)
    feats_test, labels_test = split_features_labels(x_test, schema)
    utility_synth = evaluate_utility(feats_synth, labels_synth, feats_test, labels_test, rep_seeds)
    utility_base = evaluate_utility(feats_train, labels_train, feats_test, labels_test, rep_seeds)

    # sub-populations scored with the first repetition's synthetic-trained model
    from .classifier import train_classifier

    subpop = None
    cols = set(test_table.columns)
    if sex_column in cols and age_column in cols:
        model = train_classifier(feats_synth, labels_synth, seed=rep_seeds[0])
        scores = model.predict(feats_test)
        sex = np.array([float(v) for v in test_table.column(sex_column)])
        age = np.array([float(v) for v in test_table.column(age_column)])
        subpop = subpopulation_report(scores, labels_test, standard_slices(sex, age))

    n_sample = min(1000, x_train.shape[0], x_synth.shape[0])
    coords, _ = pca_project(
        {
            "real": sample_rows(x_train, n_sample, substream(seed, "eval", 70)),
            "synthetic": sample_rows(x_synth, n_sample, substream(seed, "eval", 71)),
        },
        k=2,
    )
    write_pca_csv(out / "pca.csv", coords)

    _write_json(out / "fidelity.json", fidelity.to_json())
    _write_json(
        out / "utility.json",
        {"baseline": utility_base.to_json(), "synthetic": utility_synth.to_json(), "rep_seeds": rep_seeds},
    )
    if subpop is not None:
        _write_json(out / "subpopulation.json", subpop.to_json())

    lines = [
        "== fidelity (real train vs synthetic) ==",
        fidelity_text(fidelity),
        "",
        "== utility: classifier trained on real data ==",
        utility_text(utility_base),
        "",
        "== utility: classifier trained on synthetic data ==",
        utility_text(utility_synth),
    ]
    if subpop is not None:
        lines += ["", "== sub-populations (synthetic-trained classifier) =="]
        for name, m in subpop.slices.items():
            if m is None:
                lines.append(f"{name:<14}absent")
            else:
                roc = "undefined" if m.auroc is None else f"{m.auroc:.4f}"
                lines.append(f"{name:<14}n={m.n:<6} accuracy={m.accuracy:.4f} auroc={roc}")
    (out / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _log_line(out, f"evaluate reps={reps}")

    result = {
        "fidelity": fidelity.to_json(),
        "utility_baseline": utility_base.to_json(),
        "utility_synthetic": utility_synth.to_json(),
        "subpopulation": subpop.to_json() if subpop is not None else None,
        "paths": {
            "fidelity": str(out / "fidelity.json"),
            "utility": str(out / "utility.json"),
            "pca": str(out / "pca.csv"),
            "report": str(out / "report.txt"),
        },
    }
    return result


def _eps_label(eps: float) -> str:
    return "inf" if math.isinf(eps) else f"{eps:g}"


def cmd_sweep_epsilon(
    matrix_path,
    schema_path,
    test_csv,
    out_dir,
    seed: int,
    epochs: int,
    epsilons=EPSILON_SWEEP,
    n_seeds: int = 3,
    delta: float = 1e-5,
    clip_norm: float = 1.0,
    gan_kwargs: dict | None = None,
    synth_rows: int | None = None,
) -> dict:
    """One DP run per (seed, epsilon), epsilon=inf meaning DP disabled.

    Every leg trains, generates, and scores AUROC/AUPRC/accuracy of a
    synthetic-trained classifier on the real test split, plus the bernoulli
    scatter (training p vs generated p per feature). A failed leg aborts
    the sweep after flushing the partial table.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = load_matrix(_require(matrix_path))
    schema = Schema.load(_require(schema_path))
    test_table = Table.read_csv(_require(test_csv))
    x_test = encode_table(test_table, schema, seed=seed)
    feats_test, labels_test = split_features_labels(x_test, schema)
    gan_kwargs = dict(gan_kwargs or {})
    n_gen = synth_rows if synth_rows is not None else data.shape[0]

    rows: list[dict] = []
    scatter: list[dict] = []

    def flush():
        _write_csv_dicts(
            out / "sweep.csv",
            rows,
            ["epsilon", "seed", "auroc", "auprc", "accuracy", "bernoulli_divergence", "categorical_divergence"],
        )
        _write_csv_dicts(
            out / "bernoulli_scatter.csv",
            scatter,
            ["epsilon", "seed", "feature", "train_p", "synth_p"],
        )

    blocks = schema.block_slices()
    bern_features = [f.name for f in schema.features if f.kind == "bernoulli"]

    for s in range(n_seeds):
        run_seed = seed + s
        for eps in epsilons:
            leg = out / f"seed_{run_seed}" / f"eps_{_eps_label(eps)}"
            cfg = RunConfig(
                data_matrix=str(matrix_path),
                schema=str(schema_path),
                out_dir=str(leg),
                seed=run_seed,
                epochs=epochs,
                gan=GanConfig(out_width=data.shape[1], variant="wgan_gp", **gan_kwargs),
                dp=None
                if math.isinf(eps)
                else DpConfig(clip_norm=clip_norm, noise_multiplier=0.0, epsilon=eps, delta=delta),
            )
            try:
                manifest = cmd_train(cfg)
                synth_csv = cmd_generate(
                    manifest["selected"]["checkpoint"], schema_path, leg / "synth.csv", n_gen, run_seed
                )
                synth_table = Table.read_csv(synth_csv)
                x_synth = encode_table(synth_table, schema, seed=run_seed)
                feats_synth, labels_synth = split_features_labels(x_synth, schema)
                rep = evaluate_utility(
                    feats_synth, labels_synth, feats_test, labels_test, seeds=[run_seed]
                )
                rows.append(
                    {
                        "epsilon": _eps_label(eps),
                        "seed": run_seed,
                        "auroc": rep.auroc_mean,
                        "auprc": rep.auprc_mean,
                        "accuracy": rep.accuracy_mean,
                        "bernoulli_divergence": bernoulli_divergence(data, x_synth, schema),
                        "categorical_divergence": categorical_divergence(data, x_synth, schema),
                    }
                )
                for name in bern_features:
                    col = blocks[name].start
                    scatter.append(
                        {
                            "epsilon": _eps_label(eps),
                            "seed": run_seed,
                            "feature": name,
                            "train_p": float(np.mean(data[:, col] >= 0.5)),
                            "synth_p": float(np.mean(x_synth[:, col] >= 0.5)),
                        }
                    )
            except Exception as exc:
                flush()
                raise RunError(
                    f"sweep leg epsilon={_eps_label(eps)} seed={run_seed} failed "
                    f"({exc}); partial results kept in {out}"
                ) from exc
    flush()

    by_eps: dict[str, list[float]] = {}
    for r in rows:
        by_eps.setdefault(r["epsilon"], []).append(r["auroc"])
    mean_auroc = {k: float(np.mean(v)) for k, v in by_eps.items()}
    # epsilon=inf enters the rank correlation as the largest value
    order = [_eps_label(e) for e in epsilons]
    xs = [1e18 if lbl == "inf" else float(lbl) for lbl in order]
    ys = [mean_auroc[lbl] for lbl in order]
    try:
        rho = spearman(xs, ys)
    except ConfigError:
        rho = None  # all legs tied (degenerate sweep)
    summary = {
        "epsilons": order,
        "mean_auroc": mean_auroc,
        "spearman_epsilon_auroc": rho,
        "seeds": [seed + s for s in range(n_seeds)],
        "epochs": epochs,
    }
    _write_json(out / "sweep_summary.json", summary)
    _log_line(out, f"sweep-epsilon done rho={rho}")
    return summary


def _write_csv_dicts(path, rows: list[dict], header: list[str]) -> None:
    import csv

    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[k] if not isinstance(r[k], float) else repr(r[k]) for k in header])
