"""Command line front end: simulate | cluster | sil | rand | hclust | compare.

Exit codes: 0 success, 1 usage error, 2 data or compute error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from .dataset import (
    DatasetError,
    TrajectoryDataset,
    csv_columns,
    filter_cohort,
    load_csv,
    validate_for_clustering,
    write_csv,
)
from .diagnostics import (
    adjusted_rand,
    align_curves,
    center_curves,
    hcluster_centers,
    rand_replicates,
    silhouette,
)
from .plots import centers_svg, dendrogram_svg, rand_matrix_svg, silhouette_svg
from .simgen import GeneratorSpec, generate, preset
from .spline import SplineError, SplineModel, predict
from .trajectories import STARTS, ClusteringError, ClusterParams, ClusterResult, cluster

logger = logging.getLogger("trajkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def parse_k_list(text: str) -> list[int]:
    """``"2..10"``, ``"2,5,10"`` or a mix such as ``"2..4,8"``."""
    ks: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if ".." in part:
            lo, hi = part.split("..", 1)
            ks.extend(range(int(lo), int(hi) + 1))
        else:
            ks.append(int(part))
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"invalid k list {text!r}")
    return ks


def default_cores(n_tasks: int) -> int:
    env = os.environ.get("TRAJKIT_CORES")
    if env:
        return max(1, int(env))
    return max(1, min(n_tasks, os.cpu_count() or 1))


class RunManifest:
    """Record of one subcommand run; written last as manifest.json."""

    def __init__(self, command: str, out_dir: Path, args: argparse.Namespace):
        self.command = command
        self.out_dir = out_dir
        self.input = getattr(args, "input", None)
        self.seed = getattr(args, "seed", None)
        self.params: dict = {}
        self.files: list[dict] = []
        self.started = time.perf_counter()
        out_dir.mkdir(parents=True, exist_ok=True)

    def write_csv(self, name: str, frame: pd.DataFrame) -> Path:
        path = self.out_dir / name
        frame.to_csv(path, index=False, lineterminator="\n")
        self.files.append({"name": name, "rows": int(len(frame))})
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.write_text(text, encoding="utf-8")
        self.files.append({"name": name})
        return path

    def write_json(self, name: str, obj) -> Path:
        return self.write_text(name, json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def plot(self, name: str, render) -> None:
        """Plots are best effort; a failure is logged and never touches the data files."""
        try:
            svg = render()
        except Exception as exc:
            logger.warning("could not render %s: %s", name, exc)
            return
        self.write_text(name, svg)

    def finish(self) -> dict:
        record = {
            "command": self.command,
            "input": str(self.input) if self.input else None,
            "params": self.params,
            "seed": self.seed,
            "out_dir": str(self.out_dir),
            "files": self.files,
            "wall_seconds": round(time.perf_counter() - self.started, 3),
            "version": __version__,
        }
        (self.out_dir / "manifest.json").write_text(json.dumps(record, indent=2) + "\n", encoding="utf-8")
        verify_manifest(self.out_dir)
        return record


def verify_manifest(out_dir) -> None:
    """Check every file named in manifest.json exists and CSV row counts match."""
    out_dir = Path(out_dir)
    record = json.loads((out_dir / "manifest.json").read_text())
    for entry in record["files"]:
        path = out_dir / entry["name"]
        if not path.exists():
            raise RuntimeError(f"manifest names missing file {path}")
        if "rows" in entry:
            with open(path, encoding="utf-8") as fh:
                rows = sum(1 for _ in fh) - 1
            if rows != entry["rows"]:
                raise RuntimeError(f"{path}: {rows} rows, manifest says {entry['rows']}")


# ---------------------------------------------------------------- shared helpers


def _load_input(args) -> TrajectoryDataset:
    if not args.input:
        raise UsageError("--input is required")
    truth_col = args.truth_col
    if truth_col == "auto":
        truth_col = "true_group" if "true_group" in csv_columns(args.input) else None
    elif truth_col == "none":
        truth_col = None
    ds = load_csv(args.input, args.id_col, args.time_col, args.response_col, truth_col)
    if args.cohort_filter:
        ds = filter_cohort(ds)
        logger.info("cohort filter kept %d subjects", ds.n_subjects)
    return ds


def _params(args, k: int) -> ClusterParams:
    try:
        return ClusterParams(
            k=k,
            maxdf=args.maxdf,
            max_iter=args.max_iter,
            conv_pct=args.conv_pct,
            seed=args.seed,
            starts=args.starts,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _warn(ds: TrajectoryDataset, k: int, maxdf: int) -> None:
    for msg in validate_for_clustering(ds, k, maxdf):
        logger.warning(msg)


def _assignments_frame(result: ClusterResult) -> pd.DataFrame:
    return pd.DataFrame({"id": result.ids, "cluster": result.assignments.astype(np.int64)})


def _day_grid(ds: TrajectoryDataset) -> np.ndarray:
    lo, hi = ds.time_range
    return np.arange(math.floor(lo), math.ceil(hi) + 1, 1.0)


def _centers_frame(result: ClusterResult, grid: np.ndarray) -> pd.DataFrame:
    parts = [
        pd.DataFrame({"cluster": lab, "time": grid, "pred": predict(result.centers[lab], grid)})
        for lab in result.labels
    ]
    frame = pd.concat(parts, ignore_index=True)
    if np.all(grid == np.round(grid)):
        frame["time"] = frame["time"].astype(np.int64)
    return frame


def _trace_frame(result: ClusterResult) -> pd.DataFrame:
    drops = {}
    for ev in result.dropped:
        drops.setdefault(ev.iteration, []).append(f"{ev.label}:{ev.reason}")
    return pd.DataFrame(
        {
            "iter": np.arange(1, len(result.changes_per_iter) + 1),
            "switch_pct": result.changes_per_iter,
            "drops": [";".join(drops.get(i, [])) for i in range(1, len(result.changes_per_iter) + 1)],
        }
    )


def _models_json(result: ClusterResult) -> dict:
    return {
        "k": result.k,
        "iterations": result.iterations,
        "converged": result.converged,
        "centers": {str(lab): result.centers[lab].to_dict() for lab in result.labels},
    }


def _centers_plot(frame: pd.DataFrame, args, title: str) -> str:
    series = [
        (f"cluster {lab}", g["time"].to_numpy(), g["pred"].to_numpy(), i, None)
        for i, (lab, g) in enumerate(frame.groupby("cluster", sort=True))
    ]
    return centers_svg(series, ymin=args.ymin, ymax=args.ymax, title=title)


def _report(result: ClusterResult, ds: TrajectoryDataset) -> dict:
    summary = {
        "k": result.k,
        "live_clusters": len(result.centers),
        "iterations": result.iterations,
        "converged": result.converged,
        "sizes": {str(k): v for k, v in result.sizes().items()},
        "aic": {str(lab): result.centers[lab].aic for lab in result.labels},
    }
    msg = f"k={result.k}: {len(result.centers)} clusters, {result.iterations} iterations"
    msg += ", converged" if result.converged else ", iteration cap reached"
    if ds.has_truth:
        summary["ari_vs_truth"] = adjusted_rand(result.assignments, ds.truth)
        msg += f", ARI vs truth {summary['ari_vs_truth']:.4f}"
    print(msg)
    return summary


def _write_cluster_outputs(man: RunManifest, result: ClusterResult, ds: TrajectoryDataset, args, prefix=""):
    man.write_csv(f"{prefix}assignments.csv", _assignments_frame(result))
    frame = _centers_frame(result, _day_grid(ds))
    man.write_csv(f"{prefix}centers.csv", frame)
    man.write_csv(f"{prefix}trace.csv", _trace_frame(result))
    man.write_json(f"{prefix}models.json", _models_json(result))
    if not args.no_plots:
        man.plot(f"{prefix}centers.svg", lambda: _centers_plot(frame, args, f"{result.k} clusters"))


# ---------------------------------------------------------------- subcommands


def cmd_simulate(args) -> int:
    if args.preset:
        spec = preset(args.preset, n_subjects=args.n, seed=args.seed)
    elif args.spec:
        spec = GeneratorSpec.from_dict(json.loads(Path(args.spec).read_text()))
        if args.n:
            spec = GeneratorSpec.from_dict({**spec.to_dict(), "n_subjects": args.n, "seed": args.seed})
    else:
        raise UsageError("give --preset or --spec")
    overrides = {}
    if args.noise_sd is not None:
        overrides["noise_sd"] = args.noise_sd
    if args.mean_obs is not None:
        overrides["mean_obs"] = args.mean_obs
    if overrides:
        spec = GeneratorSpec.from_dict({**spec.to_dict(), **overrides})
    ds = generate(spec)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(ds, out)
    spec_out = Path(args.spec_out) if args.spec_out else out.parent / "spec.json"
    spec_out.write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {ds.n_rows} rows for {ds.n_subjects} subjects to {out}")
    return EXIT_OK


def cmd_cluster(args) -> int:
    ds = _load_input(args)
    params = _params(args, args.k)
    _warn(ds, params.k, params.maxdf)
    cores = args.cores or default_cores(params.k)
    man = RunManifest("cluster", Path(args.out_dir), args)
    result = cluster(ds, params, cores=cores)
    man.params = {**vars(params), "cores": cores}
    _write_cluster_outputs(man, result, ds, args)
    man.params["summary"] = _report(result, ds)
    man.finish()
    return EXIT_OK


def _result_from_run(run_dir: Path, ds: TrajectoryDataset) -> ClusterResult:
    models = json.loads((run_dir / "models.json").read_text())
    centers = {int(k): SplineModel.from_dict(v) for k, v in models["centers"].items()}
    assign = pd.read_csv(run_dir / "assignments.csv", dtype={"id": str})
    lookup = dict(zip(assign["id"], assign["cluster"]))
    missing = [i for i in ds.ids if i not in lookup]
    if missing:
        raise DatasetError(f"{len(missing)} subjects have no assignment in {run_dir} (e.g. {missing[0]!r})")
    labels = np.array([lookup[i] for i in ds.ids], dtype=np.int64)
    return ClusterResult(
        ids=ds.ids,
        assignments=labels,
        centers=centers,
        iterations=models["iterations"],
        converged=models["converged"],
        k=models["k"],
    )


def _write_sil(man: RunManifest, result: ClusterResult, ds: TrajectoryDataset, args, suffix: str):
    table = silhouette(result, ds)
    man.write_csv(f"silhouette{suffix}.csv", table)
    if not args.no_plots:
        man.plot(
            f"silhouette{suffix}.svg",
            lambda: silhouette_svg(table, title=f"Silhouette, {len(result.centers)} clusters"),
        )
    mean = float(table["silhouette"].mean())
    print(f"k={result.k}: mean silhouette {mean:.4f}")
    return mean


def cmd_sil(args) -> int:
    man = RunManifest("sil", Path(args.out_dir), args)
    means = {}
    if args.from_run:
        run_dir = Path(args.from_run)
        run_manifest = json.loads((run_dir / "manifest.json").read_text())
        if not args.input:
            args.input = run_manifest["input"]
        ds = _load_input(args)
        result = _result_from_run(run_dir, ds)
        if len(result.centers) < 2:
            raise ClusteringError("silhouette undefined for a single cluster")
        means[str(result.k)] = _write_sil(man, result, ds, args, "")
        man.params = {"from_run": str(run_dir)}
    else:
        if not args.k_list:
            raise UsageError("give --from-run or --k-list")
        ks = parse_k_list(args.k_list)
        if 1 in ks:
            raise UsageError("silhouette undefined for a single cluster")
        ds = _load_input(args)
        cores = args.cores or default_cores(max(ks))
        for k in ks:
            params = _params(args, k)
            result = cluster(ds, params, cores=cores)
            if len(result.centers) < 2:
                raise ClusteringError(f"k={k} collapsed to a single cluster; silhouette undefined")
            means[str(k)] = _write_sil(man, result, ds, args, f"_k{k}")
        man.params = {"k_list": ks, "maxdf": args.maxdf, "max_iter": args.max_iter, "conv_pct": args.conv_pct}
    man.params["mean_silhouette"] = means
    man.finish()
    return EXIT_OK


def cmd_rand(args) -> int:
    ks = parse_k_list(args.k_list)
    if args.replicates < 2:
        raise UsageError("--replicates must be at least 2")
    ds = _load_input(args)
    params = _params(args, max(ks))
    _warn(ds, max(ks), params.maxdf)
    n_runs = len(ks) * args.replicates
    cores = args.cores or default_cores(n_runs)
    man = RunManifest("rand", Path(args.out_dir), args)
    table = rand_replicates(ds, ks, args.replicates, params, seed=args.seed, cores=cores)

    long = pd.concat(
        [
            pd.DataFrame({"k": k, "replicate": r, "id": ds.ids, "cluster": p.astype(np.int64)})
            for (k, r), p in zip(table.runs, table.partitions)
        ],
        ignore_index=True,
    )
    man.write_csv("assignments.csv", long)
    man.write_csv("rand.csv", table.pairs)
    if table.truth is not None:
        man.write_csv("truth_ari.csv", table.truth)
    if not args.no_plots:
        man.plot("rand_matrix.svg", lambda: rand_matrix_svg(table.matrix(), table.runs))
    within = table.within_k_mean()
    for k in sorted(within):
        line = f"k={k}: mean pairwise ARI between replicates {within[k]:.4f}"
        if table.truth is not None:
            line += f", mean ARI vs truth {table.truth[table.truth.k == k].ari.mean():.4f}"
        print(line)
    man.params = {
        "k_list": ks,
        "replicates": args.replicates,
        "maxdf": params.maxdf,
        "max_iter": params.max_iter,
        "conv_pct": params.conv_pct,
        "starts": params.starts,
        "cores": cores,
        "within_k_mean_ari": {str(k): v for k, v in within.items()},
    }
    man.finish()
    return EXIT_OK


def cmd_hclust(args) -> int:
    ds = _load_input(args)
    params = _params(args, args.k)
    _warn(ds, params.k, params.maxdf)
    cores = args.cores or default_cores(params.k)
    man = RunManifest("hclust", Path(args.out_dir), args)
    result = cluster(ds, params, cores=cores)
    if len(result.centers) < 2:
        raise ClusteringError("fewer than two centers survived; nothing to cluster")
    _write_cluster_outputs(man, result, ds, args)
    tree = hcluster_centers(result.centers, args.grid, ds.time_range)
    resp = pd.DataFrame(tree.curves, columns=[f"{t:.6g}" for t in tree.grid])
    resp.insert(0, "cluster", tree.labels)
    man.write_csv("resp.csv", resp)
    man.write_csv("dendrogram.csv", tree.to_frame())
    cut_height = None
    if args.cut:
        clades = tree.cut(args.cut)
        man.write_csv("clades.csv", pd.DataFrame({"cluster": list(clades), "clade": list(clades.values())}))
        heights = np.sort(tree.heights)
        if 1 < args.cut <= len(heights):
            # midway between the last kept merge and the first cut one
            cut_height = float(heights[-args.cut] + heights[-args.cut + 1]) / 2
    if not args.no_plots:
        man.plot("dendrogram.svg", lambda: dendrogram_svg(tree, cut_height=cut_height))
    man.params = {**vars(params), "grid": args.grid, "cut": args.cut, "summary": _report(result, ds)}
    man.finish()
    return EXIT_OK


def read_centers_csv(path) -> dict[int, pd.DataFrame]:
    try:
        frame = pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DatasetError(f"{path}: {exc}") from exc
    for col in ("cluster", "time", "pred"):
        if col not in frame.columns:
            raise DatasetError(f"{path}: centers file needs columns cluster,time,pred (missing {col!r})")
    for col in ("time", "pred"):
        if not pd.api.types.is_numeric_dtype(frame[col]):
            raise DatasetError(f"{path}: column {col!r} is not numeric")
    return {int(lab): g.sort_values("time") for lab, g in frame.groupby("cluster", sort=True)}


def _shared_curves(a: dict, b: dict):
    times = None
    for g in list(a.values()) + list(b.values()):
        t = set(g["time"].to_numpy().tolist())
        times = t if times is None else times & t
    if not times:
        raise DatasetError("the two centers files share no time points")
    grid = np.array(sorted(times))

    def curves(groups):
        return np.vstack([g.set_index("time").loc[grid, "pred"].to_numpy() for g in groups.values()])

    return grid, curves(a), curves(b)


def _read_assignments(path) -> pd.Series:
    frame = pd.read_csv(path, dtype={"id": str})
    if not {"id", "cluster"} <= set(frame.columns):
        raise DatasetError(f"{path}: assignments file needs columns id,cluster")
    return frame.set_index("id")["cluster"]


def cmd_compare(args) -> int:
    a = read_centers_csv(args.centers_a)
    b = read_centers_csv(args.centers_b)
    grid, curves_a, curves_b = _shared_curves(a, b)
    alignment = align_curves(list(a), curves_a, list(b), curves_b)
    man = RunManifest("compare", Path(args.out_dir), args)
    rows = [(la, alignment.mapping[la], alignment.distances[la]) for la in sorted(alignment.mapping)]
    rows += [(la, None, None) for la in alignment.unmapped_a]
    mapping = pd.DataFrame(rows, columns=["label_a", "label_b", "distance"])
    mapping["label_b"] = mapping["label_b"].astype("Int64")
    man.write_csv("mapping.csv", mapping)

    report = {
        "mapping": {str(k): v for k, v in alignment.mapping.items()},
        "distances": {str(k): v for k, v in alignment.distances.items()},
        "unmapped_a": alignment.unmapped_a,
        "unmapped_b": alignment.unmapped_b,
        "ari": None,
    }
    if args.assign_a and args.assign_b:
        sa, sb = _read_assignments(args.assign_a), _read_assignments(args.assign_b)
        common = sa.index.intersection(sb.index)
        if len(common) < 2:
            raise DatasetError("assignment files share fewer than two subject ids")
        ari = adjusted_rand(sa.loc[common].to_numpy(), sb.loc[common].to_numpy())
        report["ari"] = ari
        report["n_subjects"] = int(len(common))
        print(f"ARI {ari:.7f}")
    for la in sorted(alignment.mapping):
        print(f"{la} -> {alignment.mapping[la]} (distance {alignment.distances[la]:.4g})")

    if not args.no_plots:
        def overlay():
            series = []
            for i, la in enumerate(sorted(alignment.mapping)):
                lb = alignment.mapping[la]
                ga, gb = a[la], b[lb]
                series.append((f"A{la}", ga["time"].to_numpy(), ga["pred"].to_numpy(), i, "6 4"))
                series.append((f"B{lb}", gb["time"].to_numpy(), gb["pred"].to_numpy(), i, None))
            return centers_svg(series, ymin=args.ymin, ymax=args.ymax, title="A (dashed) vs B (solid)")

        man.plot("overlay.svg", overlay)
    man.write_json("compare.json", report)
    man.params = {"centers_a": str(args.centers_a), "centers_b": str(args.centers_b)}
    man.finish()
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, data=True, clustering=True):
    p.add_argument("--out-dir", default=".", help="output directory (created if needed)")
    p.add_argument("--seed", type=int, default=12345)
    p.add_argument("--cores", type=int, default=None, help="worker threads (default min(K, CPUs) or $TRAJKIT_CORES)")
    p.add_argument("--verbose", "-v", action="count", default=0)
    p.add_argument("--no-plots", action="store_true", help="skip SVG output")
    p.add_argument("--ymin", type=float, default=None)
    p.add_argument("--ymax", type=float, default=None)
    if data:
        p.add_argument("--input", help="long-format CSV (optionally gzipped)")
        p.add_argument("--id-col", default="id")
        p.add_argument("--time-col", default="time")
        p.add_argument("--response-col", default="response")
        p.add_argument("--truth-col", default="auto", help="'auto' uses true_group when present; 'none' ignores it")
        p.add_argument("--cohort-filter", action="store_true", help="keep subjects with >=1 pre-zero and >=3 post-zero times")
    if clustering:
        p.add_argument("--maxdf", type=int, default=30)
        p.add_argument("--max-iter", type=int, default=20)
        p.add_argument("--conv-pct", type=float, default=0.5)
        p.add_argument("--starts", choices=STARTS, default="random")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trajkit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="write a synthetic cohort")
    _common(p, data=False, clustering=False)
    p.add_argument("--preset", choices=("bp5", "clean2", "clean5"))
    p.add_argument("--spec", help="generator spec JSON (as written next to a simulated file)")
    p.add_argument("--n", type=int, default=None, help="number of subjects")
    p.add_argument("--noise-sd", type=float, default=None)
    p.add_argument("--mean-obs", type=float, default=None)
    p.add_argument("--out", required=True, help="CSV path; a .gz suffix gzips")
    p.add_argument("--spec-out", default=None, help="where to write the spec JSON (default: spec.json beside --out)")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("cluster", help="k-means with spline centers")
    _common(p)
    p.add_argument("--k", type=int, required=True)
    p.set_defaults(func=cmd_cluster)

    p = sub.add_parser("sil", help="silhouette tables and plots")
    _common(p)
    p.add_argument("--from-run", help="directory written by 'trajkit cluster'")
    p.add_argument("--k-list", help="e.g. 2,5,10 or 2..10")
    p.set_defaults(func=cmd_sil)

    p = sub.add_parser("rand", help="replicate ARI table over several k")
    _common(p)
    p.add_argument("--k-list", required=True)
    p.add_argument("--replicates", type=int, default=10)
    p.set_defaults(func=cmd_rand)

    p = sub.add_parser("hclust", help="hierarchical clustering of many centers")
    _common(p)
    p.add_argument("--k", type=int, default=40)
    p.add_argument("--grid", type=int, default=100)
    p.add_argument("--cut", type=int, default=None, help="also report the cut into this many clades")
    p.set_defaults(func=cmd_hclust)

    p = sub.add_parser("compare", help="align and compare two runs' centers")
    _common(p, data=False, clustering=False)
    p.add_argument("--centers-a", required=True)
    p.add_argument("--centers-b", required=True)
    p.add_argument("--assign-a")
    p.add_argument("--assign-b")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.cores is not None and args.cores < 1:
        parser.error("--cores must be positive")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"trajkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, SplineError, ClusteringError, ValueError, RuntimeError, OSError, KeyError) as exc:
        print(f"trajkit {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
