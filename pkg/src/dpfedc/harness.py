"""Command-line front end: configuration, repeated runs, sweeps and the accountant.

Configuration is a flat ``key = value`` text file; ``--set key=value`` on the
command line overrides individual keys.  Every run writes its resolved
configuration to ``metadata.cfg`` in the output directory, and that file can
be fed back through ``--config`` to reproduce the run byte for byte.
"""

from __future__ import annotations

import argparse
import csv
import io
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import data as datamod
from . import model
from .federation import (
    CSV_COLUMNS,
    ConfigError,
    FedConfig,
    MetricsLog,
    baseline_fed_kmeans,
    check_feasible,
    q2_schedule,
    run_experiment,
)
from .model import ProblemParams, StepPolicy
from .privacy import DpConfig, PrivacyError, aggregate_ratio, per_round_epsilon, round_sigma2, total_loss
from .rng import substream

OUTPUT_ENV = "DPFEDC_OUTPUT_DIR"
SWEEP_AXES = ("eps_total", "K", "partition")
METRICS = CSV_COLUMNS[1:]


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt_int(text: str) -> int | None:
    """Integer, or empty / ``auto`` / ``full`` for None."""
    if text.strip().lower() in ("", "auto", "full", "none"):
        return None
    return int(text)


def _eps(text: str) -> float:
    """Positive float; ``inf`` or ``off`` disables DP."""
    if text.strip().lower() in ("inf", "off", "none"):
        return math.inf
    return float(text)


def _choice(*options):
    def parse(text: str) -> str:
        value = text.strip()
        if value not in options:
            raise ValueError(f"expected one of {options}, got {value!r}")
        return value

    return parse


# key -> (parser, default as text).  Order is the metadata order.
SCHEMA = {
    "dataset": (_choice("blobs", "csv", "idx"), "blobs"),
    "csv_path": (str, ""),
    "csv_labels": (_bool, "false"),
    "idx_images": (str, ""),
    "idx_labels": (str, ""),
    "subsample": (int, "0"),
    "subsample_mode": (_choice("uniform", "balanced"), "uniform"),
    "blobs_m": (int, "10"),
    "blobs_k": (int, "4"),
    "blobs_n": (int, "58000"),
    "blobs_separation": (float, "10"),
    "blobs_spread": (float, "1"),
    "partition": (_choice("iid", "shards", "kmeans"), "iid"),
    "classes_per_client": (int, "2"),
    "method": (_choice("dpfedc", "fedkmeans"), "dpfedc"),
    "k": (_opt_int, "auto"),
    "N": (int, "100"),
    "K": (int, "30"),
    "R": (int, "100"),
    "Q1": (int, "10"),
    "Q_hat": (int, "10"),
    "b": (_opt_int, "50"),
    "rho_scale": (float, "1e-7"),
    "mu_h_scale": (float, "1e-10"),
    "mu_w": (float, "0"),
    "eps_total": (_eps, "20"),
    "delta": (float, "1e-4"),
    "clip_G": (float, "10"),
    "c0": (float, "1"),
    "gamma_scale": (float, "0.5"),
    "eta_scale": (float, "5"),
    "power_iters": (int, "100"),
    "init": (_choice("kmeanspp", "kmeanspp-pooled", "gaussian"), "kmeanspp"),
    "bootstrap": (_opt_int, "auto"),
    "workers": (int, "1"),
    "record_wall_time": (_bool, "false"),
    "seed": (int, "0"),
    "repeat": (int, "1"),
    "output_dir": (str, "runs"),
}


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    raw = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        raw[key] = value
    return raw


def parse_overrides(items) -> dict[str, str]:
    raw = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = (s.strip() for s in item.split("=", 1))
        raw[key] = value
    return raw


@dataclass
class RunSpec:
    """Validated run settings; ``text`` keeps the literal value of every key."""

    values: dict = field(default_factory=dict)
    text: dict = field(default_factory=dict)

    @classmethod
    def from_raw(cls, raw: dict[str, str]) -> "RunSpec":
        unknown = sorted(set(raw) - set(SCHEMA))
        if unknown:
            raise ConfigError(f"unknown configuration key(s): {', '.join(unknown)}")
        values, text = {}, {}
        for key, (parse, default) in SCHEMA.items():
            literal = raw.get(key, default)
            try:
                values[key] = parse(literal)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {exc}") from None
            text[key] = literal
        spec = cls(values, text)
        spec.validate()
        return spec

    @classmethod
    def load(cls, config_path=None, overrides=None) -> "RunSpec":
        raw = {}
        if config_path is not None:
            raw.update(parse_config_text(Path(config_path).read_text(), str(config_path)))
        raw.update(parse_overrides(overrides))
        env_dir = os.environ.get(OUTPUT_ENV)
        if env_dir:
            raw["output_dir"] = env_dir
        return cls.from_raw(raw)

    def __getitem__(self, key):
        return self.values[key]

    def with_value(self, key: str, literal: str) -> "RunSpec":
        raw = dict(self.text)
        raw[key] = literal
        return RunSpec.from_raw(raw)

    @property
    def output_dir(self) -> Path:
        return Path(self.values["output_dir"])

    def validate(self):
        v = self.values
        if v["repeat"] < 1:
            raise ConfigError(f"repeat must be >= 1, got {v['repeat']}")
        if v["dataset"] == "csv" and not Path(v["csv_path"]).is_file():
            raise ConfigError(f"csv_path {v['csv_path']!r} does not exist")
        if v["dataset"] == "idx":
            if not Path(v["idx_images"]).is_file():
                raise ConfigError(f"idx_images {v['idx_images']!r} does not exist")
            if v["idx_labels"] and not Path(v["idx_labels"]).is_file():
                raise ConfigError(f"idx_labels {v['idx_labels']!r} does not exist")
        if v["subsample"] < 0:
            raise ConfigError("subsample must be >= 0 (0 keeps every sample)")
        if v["eps_total"] <= 0:
            raise ConfigError(f"eps_total must be > 0 or inf, got {v['eps_total']}")

    def dump(self, extra: dict | None = None) -> str:
        lines = [f"{key} = {self.text[key]}" for key in SCHEMA]
        for key, value in (extra or {}).items():
            lines.append(f"# resolved {key} = {value}")
        return "\n".join(lines) + "\n"


def derived_seed(seed: int, purpose: str) -> int:
    return int(substream(seed, purpose).integers(2**31))


def load_dataset(spec: RunSpec, seed: int) -> datamod.DataMatrix:
    v = spec.values
    if v["dataset"] == "blobs":
        d = datamod.generate_blobs(
            v["blobs_m"], v["blobs_k"], v["blobs_n"], v["blobs_separation"], v["blobs_spread"],
            derived_seed(seed, "data"),
        )
    elif v["dataset"] == "csv":
        d = datamod.load_csv(v["csv_path"], has_labels=v["csv_labels"])
    else:
        d = datamod.load_idx(v["idx_images"], v["idx_labels"] or None)
    if v["subsample"] and v["subsample"] < d.n:
        draw = datamod.subsample_balanced if v["subsample_mode"] == "balanced" else datamod.subsample
        d = draw(d, v["subsample"], derived_seed(seed, "data"))
    return d


def make_shards(spec: RunSpec, d: datamod.DataMatrix, seed: int, partition: str | None = None):
    v = spec.values
    kind = partition or v["partition"]
    pseed = derived_seed(seed, "partition")
    if kind == "iid":
        return datamod.partition_iid(d.n, v["N"], pseed)
    if kind == "shards":
        return datamod.partition_shards(d.labels, v["N"], v["classes_per_client"], pseed)
    return datamod.partition_by_kmeans(d.values, v["N"], pseed)


def resolve_k(spec: RunSpec, d: datamod.DataMatrix) -> int:
    k = spec["k"]
    if k is None:
        if d.labels is None:
            raise ConfigError("k = auto needs labelled data; set k explicitly")
        k = d.n_classes
    return k


def build_config(spec: RunSpec, d: datamod.DataMatrix, seed: int) -> FedConfig:
    v = spec.values
    scale = float(np.vdot(d.values, d.values)) / v["N"]
    params = ProblemParams(resolve_k(spec, d), rho=v["rho_scale"] * scale, mu_h=v["mu_h_scale"] * scale, mu_w=v["mu_w"])
    if math.isinf(v["eps_total"]):
        dp = DpConfig.off()
    else:
        dp = DpConfig(eps_total=v["eps_total"], delta=v["delta"], clip_G=v["clip_G"], c0=v["c0"])
    policy = StepPolicy(gamma_scale=v["gamma_scale"], eta_scale=v["eta_scale"], power_iters=v["power_iters"])
    return FedConfig(
        N=v["N"], K=v["K"], R=v["R"], params=params, Q1=v["Q1"], Q_hat=v["Q_hat"], b=v["b"], seed=seed,
        dp=dp, policy=policy, init=v["init"], bootstrap=v["bootstrap"], workers=v["workers"],
        record_wall_time=v["record_wall_time"],
    )


def execute(spec: RunSpec, seed: int, partition: str | None = None) -> tuple[MetricsLog, FedConfig]:
    """One complete run of ``spec`` at ``seed``."""
    d = load_dataset(spec, seed)
    shards = make_shards(spec, d, seed, partition)
    cfg = build_config(spec, d, seed)
    if spec["method"] == "fedkmeans":
        return baseline_fed_kmeans(d, shards, cfg), cfg
    return run_experiment(cfg, d, shards), cfg


def _execute_to_csv(args) -> tuple[str, dict]:
    spec, seed = args
    log, cfg = execute(spec, seed)
    resolved = {
        "rho": repr(cfg.params.rho),
        "mu_h": repr(cfg.params.mu_h),
        "k": cfg.params.k,
        "bootstrap": cfg.bootstrap_size,
        "eps_round": repr(log.meta.get("eps_round")),
        "q_agg": repr(log.meta.get("q_agg")),
        "scaling": "pixels / 255" if spec["dataset"] == "idx" else "none",
        "eta": "eta_scale * max L_W over sampled clients",
    }
    if spec["method"] == "fedkmeans":
        resolved["dp_calibration"] = "fed-kmeans convention, not certified"
    return log.to_csv(), resolved


def summarize(logs: list[MetricsLog]) -> tuple[np.ndarray, np.ndarray]:
    """Per-round mean and population std of every metric across ``logs``."""
    stack = np.stack([[log.column(name) for name in METRICS] for log in logs])  # runs x metrics x rounds
    same = np.all(stack == stack[:1], axis=0)
    with np.errstate(invalid="ignore"):
        mean = np.where(same, stack[0], stack.mean(axis=0))
        std = np.where(same, 0.0, stack.std(axis=0))
    return mean, std


def summary_csv(logs: list[MetricsLog]) -> str:
    mean, std = summarize(logs)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["round"] + [f"{m}_{s}" for m in METRICS for s in ("mean", "std")])
    rounds = logs[0].column("round").astype(int)
    for j, t in enumerate(rounds):
        row = [str(t)]
        for i in range(len(METRICS)):
            row += [repr(float(mean[i, j])), repr(float(std[i, j]))]
        w.writerow(row)
    return buf.getvalue()


def _run_all(spec: RunSpec, jobs: int) -> tuple[list[str], dict]:
    seeds = [spec["seed"] + r for r in range(spec["repeat"])]
    tasks = [(spec, s) for s in seeds]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_execute_to_csv, tasks))
    else:
        results = [_execute_to_csv(t) for t in tasks]
    return [r[0] for r in results], results[0][1]


def preflight(spec: RunSpec) -> None:
    """Raise the feasibility error a run of ``spec`` would hit, without running it."""
    d = load_dataset(spec, spec["seed"])
    shards = make_shards(spec, d, spec["seed"])
    check_feasible(build_config(spec, d, spec["seed"]), [s.n_i for s in shards])


def cli_run(spec: RunSpec, jobs: int = 1) -> list[MetricsLog]:
    """Run ``repeat`` seeds; write per-run CSVs, ``summary.csv`` and ``metadata.cfg``."""
    texts, resolved = _run_all(spec, jobs)
    out = spec.output_dir
    out.mkdir(parents=True, exist_ok=True)
    logs = []
    for r, text in enumerate(texts):
        path = out / f"run_seed{spec['seed'] + r}.csv"
        path.write_text(text)
        logs.append(MetricsLog.from_csv(path))
    (out / "summary.csv").write_text(summary_csv(logs))
    (out / "metadata.cfg").write_text(spec.dump(resolved))
    return logs


def cli_sweep(spec: RunSpec, axis: str, values, jobs: int = 1) -> Path:
    """Run every ``axis`` value and write ``sweep_<axis>.csv`` in long format."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = [str(x).strip() for x in values if str(x).strip()]
    if not values:
        raise ConfigError("sweep needs at least one value")
    points = [spec.with_value(axis, value) for value in values]
    for point in points:
        preflight(point)
    out = spec.output_dir
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, point in zip(values, points):
        sub = point.with_value("output_dir", str(out / f"{axis}={value}"))
        logs = cli_run(sub, jobs)
        mean, std = summarize(logs)
        for j, t in enumerate(logs[0].column("round").astype(int)):
            for i, metric in enumerate(METRICS):
                rows.append([value, str(t), metric, repr(float(mean[i, j])), repr(float(std[i, j]))])
    path = out / f"sweep_{axis}.csv"
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["axis_value", "round", "metric", "mean", "std"])
        w.writerows(rows)
    return path


@dataclass
class AccountantTable:
    rows: list  # (t, Q2, q, eps, sigma2)
    q_agg: float
    eps_round: float
    eps_total_check: float


def accountant_table(eps_total=20.0, delta=1e-4, R=100, N=100, K=30, Q_hat=10, b=50, n_min=580, c0=1.0,
                     G=10.0, eta=1.0) -> AccountantTable:
    """Worst-case per-round privacy schedule for the smallest client."""
    if not 1 <= K <= N:
        raise ConfigError(f"need 1 <= K <= N, got K={K}, N={N}")
    if b < 1 or n_min < 1:
        raise ConfigError(f"b and n_min must be >= 1, got b={b}, n_min={n_min}")
    schedule = [(t, q2_schedule(Q_hat, t)) for t in range(1, R + 1)]
    qs = [Q2 * b / n_min for _, Q2 in schedule]
    if qs and qs[0] >= 1:
        raise PrivacyError(
            f"round 1 samples Q2*b = {schedule[0][1] * b} of n_min = {n_min} (q = {qs[0]:.6g} >= 1); "
            "lower b or Q_hat"
        )
    q_agg = aggregate_ratio(qs)
    p = K / N
    eps = per_round_epsilon(eps_total, R, p, q_agg, c0)
    rows = [(t, Q2, q, eps, round_sigma2(G, Q2, q, eta, eps, delta)) for (t, Q2), q in zip(schedule, qs)]
    return AccountantTable(rows, q_agg, eps, total_loss(eps, R, p, q_agg, c0))


def format_accountant(table: AccountantTable) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "Q2", "q", "eps", "sigma2"])
    for t, Q2, q, eps, s2 in table.rows:
        w.writerow([t, Q2, repr(q), repr(eps), repr(s2)])
    return buf.getvalue()


def gradient_check(trials: int = 50, seed: int = 0, step: float = 1e-6) -> tuple[float, float]:
    """Largest relative error of ``grad_H`` and full-batch ``grad_W`` against central differences."""
    rng = np.random.default_rng(seed)
    worst_H = worst_W = 0.0
    for _ in range(trials):
        m, k, n = (int(x) for x in rng.integers(1, 9, size=3))
        X = rng.standard_normal((m, n))
        W = rng.standard_normal((m, k))
        H = rng.uniform(0.1, 1.0, size=(k, n))
        params = ProblemParams(k, *rng.uniform(0.0, 1.0, size=3))
        worst_H = max(worst_H, _fd_error(lambda A: model.objective_local(W, A, X, params),
                                         model.grad_H(W, H, X, params), H, step))
        worst_W = max(worst_W, _fd_error(lambda A: model.objective_local(A, H, X, params),
                                         model.grad_W(W, H, X, params), W, step))
    return worst_H, worst_W


def _fd_error(f, analytic, at, step):
    numeric = np.empty_like(at)
    for idx in np.ndindex(at.shape):
        plus, minus = at.copy(), at.copy()
        plus[idx] += step
        minus[idx] -= step
        numeric[idx] = (f(plus) - f(minus)) / (2 * step)
    return float(np.linalg.norm(numeric - analytic) / max(np.linalg.norm(analytic), 1e-12))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dpfedc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value configuration file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one key (repeatable)")
        p.add_argument("--jobs", type=int, default=1, help="parallel processes over seeds")

    common(sub.add_parser("run", help="run one configuration over `repeat` seeds"))
    sw = sub.add_parser("sweep", help="run a configuration across values of one axis")
    common(sw)
    sw.add_argument("--axis", required=True, choices=SWEEP_AXES)
    sw.add_argument("--values", required=True, help="comma-separated values (inf turns DP off)")

    acc = sub.add_parser("accountant", help="print the per-round privacy schedule")
    acc.add_argument("--eps-total", type=float, default=20.0)
    acc.add_argument("--delta", type=float, default=1e-4)
    acc.add_argument("--R", type=int, default=100)
    acc.add_argument("--N", type=int, default=100)
    acc.add_argument("--K", type=int, default=30)
    acc.add_argument("--Q-hat", type=int, default=10)
    acc.add_argument("--b", type=int, default=50)
    acc.add_argument("--n-min", type=int, default=580)
    acc.add_argument("--c0", type=float, default=1.0)
    acc.add_argument("--G", type=float, default=10.0, help="clipping bound used for sigma2")
    acc.add_argument("--eta", type=float, default=1.0, help="W step constant used for sigma2")

    part = sub.add_parser("partition", help="write the client assignment of every sample")
    common(part)
    part.add_argument("--out", help="destination CSV (default: <output_dir>/partition_seed<seed>.csv)")

    gc = sub.add_parser("gradcheck", help="compare analytic gradients with finite differences")
    gc.add_argument("--trials", type=int, default=50)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-5)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            spec = RunSpec.load(args.config, args.set)
            cli_run(spec, args.jobs)
            print(f"wrote {spec['repeat']} run(s) to {spec.output_dir}")
        elif args.command == "sweep":
            spec = RunSpec.load(args.config, args.set)
            path = cli_sweep(spec, args.axis, args.values.split(","), args.jobs)
            print(f"wrote {path}")
        elif args.command == "accountant":
            table = accountant_table(args.eps_total, args.delta, args.R, args.N, args.K, args.Q_hat, args.b,
                                     args.n_min, args.c0, args.G, args.eta)
            sys.stdout.write(format_accountant(table))
            print(f"q_agg = {table.q_agg!r}")
            print(f"eps_round = {table.eps_round!r}")
            print(f"eps_total recomputed = {table.eps_total_check!r}")
            if abs(table.eps_total_check - args.eps_total) > 1e-9 * max(1.0, args.eps_total):
                raise PrivacyError("recomputed eps_total does not match the input")
            print("accepted")
        elif args.command == "partition":
            spec = RunSpec.load(args.config, args.set)
            d = load_dataset(spec, spec["seed"])
            shards = make_shards(spec, d, spec["seed"])
            out = Path(args.out) if args.out else spec.output_dir / f"partition_seed{spec['seed']}.csv"
            out.parent.mkdir(parents=True, exist_ok=True)
            datamod.write_partition_csv(shards, out)
            print(f"wrote {out}")
        elif args.command == "gradcheck":
            err_H, err_W = gradient_check(args.trials, args.seed)
            print(f"max relative error grad_H = {err_H:.3e}")
            print(f"max relative error grad_W = {err_W:.3e}")
            if max(err_H, err_W) > args.tol:
                print(f"error: gradient mismatch above {args.tol:g}", file=sys.stderr)
                return 1
    except (ValueError, OSError) as exc:
        print(f"error: {exc}".splitlines()[0], file=sys.stderr)
        return 2
    return 0
