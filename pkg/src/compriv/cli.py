"""End-to-end pipeline and command-line entry points.

Subcommands: synth, featurize, privatize, attack, audit, sweep. A pipeline
run ingests or synthesizes data, runs one release mechanism, attacks the
release, audits mutual information, writes the released matrix as CSV and a
JSON report. All randomness derives from one top-level seed through spawned
seed sequences, so repeated runs are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import dataset, linear_game, logistic_game, neural_game, powerfeat, privmetrics
from .errors import (
    ComprivError,
    DegenerateSample,
    InfeasibleDistortion,
    NonConvergence,
    RankNotAttained,
    ValidationError,
)

MECHANISMS = ("linear", "logistic", "neural")
SYNTHETIC_KINDS = ("linear", "logistic", "images")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_INFEASIBLE = 3
EXIT_NONCONVERGENCE = 4


# ---------------------------------------------------------------------------
# CSV interfaces

def write_feature_csv(path, x: np.ndarray, column_names: list[str]) -> None:
    x = np.asarray(x, dtype=float)
    if x.shape[1] != len(column_names):
        raise ValidationError("column name count does not match feature count")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(column_names)
        for row in x:
            writer.writerow([repr(float(v)) for v in row])


def read_feature_csv(path) -> tuple[np.ndarray, list[str]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            names = next(reader)
        except StopIteration:
            raise ValidationError(f"feature CSV {path} is empty") from None
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValidationError(f"feature CSV {path} has no data rows")
    return np.array(rows, dtype=float), names


def write_label_csv(path, y: np.ndarray, kind: str) -> None:
    y = np.asarray(y)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if kind == "binary":
            writer.writerow(["label"])
            for v in y.ravel():
                writer.writerow([int(v)])
        else:
            y2 = y if y.ndim == 2 else y[:, None]
            writer.writerow([f"y{j + 1}" for j in range(y2.shape[1])])
            for row in y2:
                writer.writerow([repr(float(v)) for v in row])


def read_label_csv(path) -> tuple[np.ndarray, str]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"label CSV {path} is empty") from None
        rows = [row for row in reader if row]
    if not rows:
        raise ValidationError(f"label CSV {path} has no data rows")
    if header == ["label"]:
        y = np.array([int(r[0]) for r in rows])
        if not np.all(np.isin(y, (-1, 1))):
            raise ValidationError("binary labels must be -1 or +1")
        return y, "binary"
    if all(name == f"y{j + 1}" for j, name in enumerate(header)):
        return np.array([[float(v) for v in r] for r in rows]), "continuous"
    raise ValidationError(
        "label CSV header must be 'label' (binary) or 'y1..yd' (continuous), "
        f"got {header}"
    )


# ---------------------------------------------------------------------------
# configuration

@dataclass
class DataConfig:
    kind: str = "synthetic-linear"
    n: int = 200
    p: int = 12
    d: int = 1
    noise_std: float = 0.1
    signal: float = 5.0
    features_csv: str | None = None
    labels_csv: str | None = None


@dataclass
class AuditConfig:
    enabled: bool = True
    k_nn: int = 3
    pca_dim: int = 16


@dataclass
class PipelineConfig:
    mechanism: str = "linear"
    data: DataConfig = field(default_factory=DataConfig)
    gamma: float = 1.0
    k: int | None = None
    rank_rate: float = 0.5
    eta: float = 0.01
    beta0: float | None = None
    T: int = 60
    rho0: float = 5.0
    minibatch: int = 128
    attacker_epochs: int = 50
    seed: int = 0
    train_fraction: float = 0.8
    batch_size: int | None = None
    audit: AuditConfig = field(default_factory=AuditConfig)
    out_release: str = "release.csv"
    out_report: str = "report.json"


@dataclass
class PrivacyReport:
    mechanism: str
    config: dict
    seed: int
    distortion: float
    effective_rank: int | None
    attacker: dict
    mi_before: float | None
    mi_after: float | None
    runtime_seconds: float | None

    def to_json_dict(self, include_runtime: bool = False) -> dict:
        out = asdict(self)
        if not include_runtime:
            out["runtime_seconds"] = None
        return out


ATTACKER_KEYS = (
    "rmse_train", "rmse_test", "r2_train", "r2_test",
    "accuracy_train", "accuracy_test",
)


def _full_attacker_dict(values: dict) -> dict:
    return {key: values.get(key) for key in ATTACKER_KEYS}


def validate_config(cfg: PipelineConfig) -> None:
    if cfg.mechanism not in MECHANISMS:
        raise ValidationError(
            f"mechanism must be one of {list(MECHANISMS)}, got {cfg.mechanism!r}"
        )
    known_kinds = tuple(f"synthetic-{k}" for k in SYNTHETIC_KINDS) + ("csv",)
    if cfg.data.kind not in known_kinds:
        raise ValidationError(f"data kind must be one of {list(known_kinds)}")
    if cfg.data.kind == "csv" and not (cfg.data.features_csv and cfg.data.labels_csv):
        raise ValidationError("csv data needs both --features-csv and --labels-csv")
    if cfg.gamma < 0:
        raise ValidationError("gamma must be nonnegative")
    if not 0 < cfg.train_fraction < 1:
        raise ValidationError("train_fraction must lie in (0, 1)")


def _spawn_seeds(seed: int, count: int) -> list[int]:
    children = np.random.SeedSequence(seed).spawn(count)
    return [int(c.generate_state(1, np.uint32)[0]) for c in children]


def _load_data(cfg: PipelineConfig, data_seed: int):
    """Returns (x, y, label_kind, column_names)."""
    d = cfg.data
    if d.kind == "csv":
        x, names = read_feature_csv(d.features_csv)
        y, kind = read_label_csv(d.labels_csv)
        if len(y) != x.shape[0]:
            raise ValidationError("feature and label CSVs disagree on sample count")
        return x, y, kind, names
    if d.kind == "synthetic-linear":
        gen = dataset.gen_linear_gaussian(d.n, d.p, d.d, d.noise_std, seed=data_seed)
        names = [f"x{j + 1}" for j in range(d.p)]
        return gen.x, gen.y, "continuous", names
    if d.kind == "synthetic-logistic":
        gen = dataset.gen_logistic_planted(d.n, d.p, d.signal, seed=data_seed)
        names = [f"x{j + 1}" for j in range(d.p)]
        return gen.x, gen.y, "binary", names
    side = int(round(d.p ** 0.5))
    if side * side != d.p:
        raise ValidationError("synthetic-images needs p to be a perfect square")
    gen = dataset.gen_block_images(d.n, side=side, seed=data_seed)
    names = [f"px{j + 1}" for j in range(d.p)]
    return gen.x, gen.y, "binary", names


def _privatization_batches(n: int, batch_size: int | None, p: int, seed: int) -> list[np.ndarray]:
    """Partition all rows for per-batch solves (single batch by default)."""
    if batch_size is None or batch_size >= n:
        return [np.arange(n)]
    if batch_size <= p:
        raise ValidationError(f"batch_size={batch_size} must exceed p={p}")
    order = np.random.default_rng(seed).permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) <= p:
        batches[-2] = np.concatenate([batches[-2], batches[-1]])
        batches.pop()
    return batches


def run_pipeline(
    cfg: PipelineConfig,
    write_outputs: bool = True,
    include_runtime: bool = False,
) -> PrivacyReport:
    validate_config(cfg)
    started = time.perf_counter()
    data_seed, split_seed, mech_seed, attack_seed, batch_seed = _spawn_seeds(cfg.seed, 5)
    x, y, label_kind, names = _load_data(cfg, data_seed)
    n, p = x.shape
    k = cfg.k if cfg.k is not None else max(1, p // 2)

    split = dataset.split_and_batch(x, y, cfg.train_fraction, seed=split_seed)
    batches = _privatization_batches(n, cfg.batch_size, p, batch_seed)

    effective_rank: int | None = None
    if cfg.mechanism == "linear":
        if label_kind != "continuous":
            raise ValidationError("the linear mechanism needs continuous labels")
        beta0 = cfg.beta0 if cfg.beta0 is not None else 1e-3
        x_tilde = np.zeros_like(x)
        distortion = 0.0
        for idx in batches:
            game_cfg = linear_game.LinearGameConfig(
                gamma=cfg.gamma, k=k, eta=cfg.eta, beta0=beta0, max_outer=cfg.T
            )
            xt_b, rm = linear_game.run_linear_game(x[idx], y[idx], game_cfg)
            x_tilde[idx] = xt_b
            distortion = max(distortion, rm.distortion)
            effective_rank = max(effective_rank or 0, rm.effective_rank)
        attack = linear_game.linear_attack_eval(x_tilde, y, split, x)
        attacker = _full_attacker_dict({
            "rmse_train": attack["rmse_train"], "rmse_test": attack["rmse"],
            "r2_train": attack["r2_train"], "r2_test": attack["r2"],
        })
    elif cfg.mechanism == "logistic":
        if label_kind != "binary":
            raise ValidationError("the logistic mechanism needs binary labels")
        beta0 = cfg.beta0 if cfg.beta0 is not None else 0.05
        x_tilde = np.zeros_like(x)
        distortion = 0.0
        for idx in batches:
            game_cfg = logistic_game.CategoricalGameConfig(
                gamma=cfg.gamma, k=k, T=cfg.T, beta0=beta0, eta=cfg.eta
            )
            m_bar, xt_b = logistic_game.run_categorical_game(x[idx], y[idx], game_cfg)
            x_tilde[idx] = xt_b
            distortion = max(distortion, float(np.sum((xt_b - x[idx]) ** 2)))
            effective_rank = max(effective_rank or 0,
                                 linear_game.effective_rank(m_bar, cfg.eta))
        attack = logistic_game.logistic_attack_eval(x_tilde, y, split)
        attacker = _full_attacker_dict(attack)
    else:
        if label_kind != "binary":
            raise ValidationError("the neural mechanism needs binary labels")
        nn_cfg = neural_game.NnGameConfig(
            gamma=cfg.gamma, T=cfg.T, minibatch=cfg.minibatch,
            attacker_epochs=cfg.attacker_epochs,
            beta0=cfg.beta0 if cfg.beta0 is not None else 5.0,
            rho0=cfg.rho0, seed=mech_seed,
        )
        g_spec = neural_game.default_holder_spec(p, rate=cfg.rank_rate)
        h_spec = neural_game.default_attacker_spec(p)
        _, x_tilde, _ = neural_game.run_nn_game(x, y, g_spec, h_spec, nn_cfg)
        distortion = neural_game.mean_sq_distortion(x_tilde, x)
        attack = neural_game.nn_attack_eval(x_tilde, y, split, seed=attack_seed)
        attacker = _full_attacker_dict(attack)

    mi_before = mi_after = None
    if cfg.audit.enabled:
        mi_before = privmetrics.audit_mi(
            x, y, label_kind, cfg.audit.k_nn, cfg.audit.pca_dim
        ).nats
        mi_after = privmetrics.audit_mi(
            x_tilde, y, label_kind, cfg.audit.k_nn, cfg.audit.pca_dim
        ).nats

    report = PrivacyReport(
        mechanism=cfg.mechanism,
        config=asdict(cfg),
        seed=cfg.seed,
        distortion=float(distortion),
        effective_rank=effective_rank,
        attacker=attacker,
        mi_before=mi_before,
        mi_after=mi_after,
        runtime_seconds=time.perf_counter() - started,
    )
    if write_outputs:
        write_feature_csv(cfg.out_release, x_tilde, names)
        emit_report(report, cfg.out_report, include_runtime=include_runtime)
    return report


def emit_report(report: PrivacyReport, path, include_runtime: bool = False) -> None:
    """Pretty-printed JSON with sorted keys.

    The measured runtime is nulled out by default so equal-seed runs produce
    byte-identical files; pass ``include_runtime=True`` to keep it.
    """
    payload = json.dumps(report.to_json_dict(include_runtime), indent=2, sort_keys=True)
    with open(path, "w") as fh:
        fh.write(payload + "\n")


def emit_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["gamma", "k", "distortion", "attacker_metric", "mi_after"])
        for row in rows:
            writer.writerow([
                repr(float(row["gamma"])),
                "" if row["k"] is None else int(row["k"]),
                repr(float(row["distortion"])),
                repr(float(row["attacker_metric"])),
                "" if row["mi_after"] is None else repr(float(row["mi_after"])),
            ])


def run_sweep(cfg: PipelineConfig, gammas: list[float], ks: list[int | None], out_csv) -> list[dict]:
    rows = []
    for gamma in gammas:
        for k in ks:
            point = PipelineConfig(**{**asdict_flat(cfg), "gamma": gamma, "k": k})
            report = run_pipeline(point, write_outputs=False)
            metric_key = "r2_test" if cfg.mechanism == "linear" else "accuracy_test"
            rows.append({
                "gamma": gamma,
                "k": k,
                "distortion": report.distortion,
                "attacker_metric": report.attacker[metric_key],
                "mi_after": report.mi_after,
            })
    emit_sweep_csv(rows, out_csv)
    return rows


def asdict_flat(cfg: PipelineConfig) -> dict:
    out = asdict(cfg)
    out["data"] = DataConfig(**out["data"])
    out["audit"] = AuditConfig(**out["audit"])
    return out


# ---------------------------------------------------------------------------
# argument parsing

def _add_data_args(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--synthetic", choices=SYNTHETIC_KINDS, default=None,
                    help="generate data instead of reading CSVs")
    sp.add_argument("--features-csv", default=None)
    sp.add_argument("--labels-csv", default=None)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--p", type=int, default=12)
    sp.add_argument("--d", type=int, default=1)
    sp.add_argument("--noise-std", type=float, default=0.1)
    sp.add_argument("--signal", type=float, default=5.0)


def _add_mechanism_args(sp: argparse.ArgumentParser) -> None:
    sp.add_argument("--mechanism", default="linear")
    sp.add_argument("--gamma", type=float, default=1.0)
    sp.add_argument("--k", type=int, default=None)
    sp.add_argument("--rank-rate", type=float, default=0.5)
    sp.add_argument("--eta", type=float, default=0.01)
    sp.add_argument("--beta0", type=float, default=None)
    sp.add_argument("--rho0", type=float, default=5.0)
    sp.add_argument("--T", type=int, default=60)
    sp.add_argument("--minibatch", type=int, default=128)
    sp.add_argument("--attacker-epochs", type=int, default=50)
    sp.add_argument("--batch-size", type=int, default=None)
    sp.add_argument("--train-fraction", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--knn", type=int, default=3)
    sp.add_argument("--pca-dim", type=int, default=16)
    sp.add_argument("--no-audit", action="store_true")
    sp.add_argument("--timing", action="store_true",
                    help="keep measured runtime in the report JSON")


def _data_config_from_args(args) -> DataConfig:
    if args.synthetic is not None:
        return DataConfig(kind=f"synthetic-{args.synthetic}", n=args.n, p=args.p,
                          d=args.d, noise_std=args.noise_std, signal=args.signal)
    return DataConfig(kind="csv", features_csv=args.features_csv,
                      labels_csv=args.labels_csv)


def _pipeline_config_from_args(args) -> PipelineConfig:
    return PipelineConfig(
        mechanism=args.mechanism,
        data=_data_config_from_args(args),
        gamma=args.gamma,
        k=args.k,
        rank_rate=args.rank_rate,
        eta=args.eta,
        beta0=args.beta0,
        T=args.T,
        rho0=args.rho0,
        minibatch=args.minibatch,
        attacker_epochs=args.attacker_epochs,
        seed=args.seed,
        train_fraction=args.train_fraction,
        batch_size=args.batch_size,
        audit=AuditConfig(enabled=not args.no_audit, k_nn=args.knn, pca_dim=args.pca_dim),
        out_release=args.out_release,
        out_report=args.out_report,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="compriv",
                                     description="Compressive adversarial privacy toolkit")
    parser.add_argument("--config", default=None,
                        help="JSON file of default values for the chosen subcommand")
    sub = parser.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="write a synthetic dataset as CSVs")
    sp.add_argument("--kind", choices=SYNTHETIC_KINDS, required=True)
    sp.add_argument("--n", type=int, default=200)
    sp.add_argument("--p", type=int, default=12)
    sp.add_argument("--d", type=int, default=1)
    sp.add_argument("--noise-std", type=float, default=0.1)
    sp.add_argument("--signal", type=float, default=5.0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-features", required=True)
    sp.add_argument("--out-labels", required=True)

    sp = sub.add_parser("featurize", help="power-series CSV to feature CSV")
    sp.add_argument("--power-csv", required=True)
    sp.add_argument("--out-features", required=True)
    sp.add_argument("--out-households", default=None)

    sp = sub.add_parser("privatize", help="run a mechanism and write release + report")
    _add_data_args(sp)
    _add_mechanism_args(sp)
    sp.add_argument("--out-release", default="release.csv")
    sp.add_argument("--out-report", default="report.json")

    sp = sub.add_parser("attack", help="evaluate the attacker on a released CSV")
    sp.add_argument("--mechanism", default="linear")
    sp.add_argument("--features-csv", required=True)
    sp.add_argument("--release-csv", required=True)
    sp.add_argument("--labels-csv", required=True)
    sp.add_argument("--train-fraction", type=float, default=0.8)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-report", default=None)

    sp = sub.add_parser("audit", help="empirical mutual information of features vs labels")
    sp.add_argument("--features-csv", required=True)
    sp.add_argument("--labels-csv", required=True)
    sp.add_argument("--knn", type=int, default=3)
    sp.add_argument("--pca-dim", type=int, default=16)
    sp.add_argument("--out-report", default=None)

    sp = sub.add_parser("sweep", help="grid of gamma/k pipeline runs")
    _add_data_args(sp)
    _add_mechanism_args(sp)
    sp.add_argument("--gammas", required=True, help="comma-separated gamma grid")
    sp.add_argument("--ks", default=None, help="comma-separated rank grid")
    sp.add_argument("--out-csv", default="sweep.csv")
    sp.add_argument("--out-release", default="release.csv")
    sp.add_argument("--out-report", default="report.json")
    return parser


def _cmd_synth(args) -> int:
    if args.kind == "linear":
        gen = dataset.gen_linear_gaussian(args.n, args.p, args.d, args.noise_std, args.seed)
        x, y, kind = gen.x, gen.y, "continuous"
    elif args.kind == "logistic":
        gen = dataset.gen_logistic_planted(args.n, args.p, args.signal, args.seed)
        x, y, kind = gen.x, gen.y, "binary"
    else:
        side = int(round(args.p ** 0.5))
        if side * side != args.p:
            raise ValidationError("images need p to be a perfect square")
        gen = dataset.gen_block_images(args.n, side=side, seed=args.seed)
        x, y, kind = gen.x, gen.y, "binary"
    names = [f"x{j + 1}" for j in range(x.shape[1])]
    write_feature_csv(args.out_features, x, names)
    write_label_csv(args.out_labels, y, kind)
    print(f"wrote {x.shape[0]} samples to {args.out_features} / {args.out_labels}")
    return EXIT_OK


def _cmd_featurize(args) -> int:
    series = powerfeat.read_power_csv(args.power_csv)
    feats, households = powerfeat.featurize_households(series)
    write_feature_csv(args.out_features, feats, list(powerfeat.POWER_FEATURE_NAMES))
    if args.out_households:
        with open(args.out_households, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["household_id"])
            for hid in households:
                writer.writerow([hid])
    print(f"featurized {len(households)} households -> {args.out_features}")
    return EXIT_OK


def _cmd_privatize(args) -> int:
    cfg = _pipeline_config_from_args(args)
    run_pipeline(cfg, write_outputs=True, include_runtime=args.timing)
    print(f"release -> {cfg.out_release}; report -> {cfg.out_report}")
    return EXIT_OK


def _cmd_attack(args) -> int:
    x, _ = read_feature_csv(args.features_csv)
    x_tilde, _ = read_feature_csv(args.release_csv)
    y, kind = read_label_csv(args.labels_csv)
    split_seed = _spawn_seeds(args.seed, 5)[1]
    split = dataset.split_and_batch(x, y, args.train_fraction, seed=split_seed)
    if args.mechanism == "linear":
        if kind != "continuous":
            raise ValidationError("linear attack needs continuous labels")
        metrics = linear_game.linear_attack_eval(x_tilde, y, split, x)
    elif args.mechanism == "logistic":
        metrics = logistic_game.logistic_attack_eval(x_tilde, y, split)
    elif args.mechanism == "neural":
        attack_seed = _spawn_seeds(args.seed, 5)[3]
        metrics = neural_game.nn_attack_eval(x_tilde, y, split, seed=attack_seed)
    else:
        raise ValidationError(f"mechanism must be one of {list(MECHANISMS)}, got {args.mechanism!r}")
    payload = json.dumps(metrics, indent=2, sort_keys=True)
    if args.out_report:
        with open(args.out_report, "w") as fh:
            fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


def _cmd_audit(args) -> int:
    x, _ = read_feature_csv(args.features_csv)
    y, kind = read_label_csv(args.labels_csv)
    est = privmetrics.audit_mi(x, y, kind, args.knn, args.pca_dim)
    payload = json.dumps(
        {"mi_nats": est.nats, "method": est.method, "components": est.components},
        indent=2, sort_keys=True,
    )
    if args.out_report:
        with open(args.out_report, "w") as fh:
            fh.write(payload + "\n")
    print(payload)
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = _pipeline_config_from_args(args)
    gammas = [float(v) for v in args.gammas.split(",") if v]
    ks = [int(v) for v in args.ks.split(",")] if args.ks else [args.k]
    rows = run_sweep(cfg, gammas, ks, args.out_csv)
    print(f"swept {len(rows)} grid points -> {args.out_csv}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(args.config) as fh:
            overrides = json.load(fh)
        parser.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    handlers = {
        "synth": _cmd_synth,
        "featurize": _cmd_featurize,
        "privatize": _cmd_privatize,
        "attack": _cmd_attack,
        "audit": _cmd_audit,
        "sweep": _cmd_sweep,
    }
    try:
        return handlers[args.command](args)
    except InfeasibleDistortion as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (NonConvergence, RankNotAttained, DegenerateSample) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE
    except (ValidationError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except ComprivError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGENCE


if __name__ == "__main__":
    raise SystemExit(main())
