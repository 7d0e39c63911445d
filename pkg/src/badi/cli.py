"""Command-line entry point: synth, build-index, benchmark, glm and report subcommands."""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import io
import json
import logging
import shutil
import sys
import tempfile
import time
from dataclasses import fields
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import __version__
from .benchmark import (
    CorrelationReport,
    MetroCrosswalk,
    OutcomeTable,
    aggregate,
    common_geoids_or_raise,
    dump_json,
    housing_correlation_by_county,
    housing_correlation_by_metro,
    housing_figure_data,
    housing_quantiles,
    index_values,
    outcome_correlations,
)
from .census_data import (
    HOME_VALUE_INDEX,
    VARIABLE_NAMES,
    CensusSchema,
    filter_block_groups,
    parse_block_groups,
    read_jsonl,
    write_block_groups,
    write_jsonl,
)
from .errors import BadiError
from .imputation import ImputationConfig, knn_impute
from .index_core import (
    CoefficientSet,
    IndexScores,
    StandardizedMatrix,
    load_external_coefficients,
    principal_factor,
    replicate_adi,
    scores_from,
    standardize,
)
from .outcomes_glm import read_beneficiaries, stratified_run, write_beneficiaries
from .synth import SynthConfig, synth_beneficiaries, synth_census, synth_crosswalk, synth_outcomes

logger = logging.getLogger("badi")

MANIFEST_VERSION = 1


class StageError(Exception):
    def __init__(self, stage: str, exc: BaseException):
        self.stage = stage
        self.exc = exc
        super().__init__(f"[{stage}] {exc}")


@contextlib.contextmanager
def stage(name: str, timings: dict):
    start = time.perf_counter()
    try:
        yield
    except (BadiError, ValueError, KeyError, OSError) as exc:
        raise StageError(name, exc) from exc
    finally:
        timings[name] = round(time.perf_counter() - start, 6)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Staging:
    """Collects outputs in a scratch directory and moves them into place only on success."""

    def __init__(self, out: Path):
        self.out = out
        out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".staging-", dir=out))
        self.written: list[str] = []

    def path(self, name: str) -> Path:
        self.written.append(name)
        return self.tmp / name

    def open(self, name: str):
        return open(self.path(name), "w", encoding="utf-8", newline="")

    def commit(self) -> dict[str, str]:
        digests = {}
        for name in self.written:
            src = self.tmp / name
            digests[name] = sha256_file(src)
            shutil.move(str(src), str(self.out / name))
        shutil.rmtree(self.tmp, ignore_errors=True)
        return digests

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def write_manifest(out: Path, args, inputs: list[Path], outputs: dict, timings: dict, failures=()) -> None:
    config = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func",)}
    blob = json.dumps(config, sort_keys=True).encode()
    manifest = {
        "schema_version": MANIFEST_VERSION,
        "tool_version": __version__,
        "subcommand": args.command,
        "config": config,
        "config_hash": hashlib.sha256(blob).hexdigest(),
        "inputs": {str(p): sha256_file(p) for p in inputs if p is not None},
        "outputs": outputs,
        "timings": timings,
        "failures": list(failures),
        "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    with open(out / "manifest.json", "w", encoding="utf-8") as fh:
        dump_json(manifest, fh)


def _check_exists(*paths):
    for p in paths:
        if p is not None and not Path(p).exists():
            raise StageError("config", FileNotFoundError(f"input not found: {p}"))


# ---------------------------------------------------------------------------
# build-index
# ---------------------------------------------------------------------------


def _load_schema(path):
    if path is None:
        return CensusSchema()
    with open(path, encoding="utf-8") as fh:
        return CensusSchema.from_mapping(yaml.safe_load(fh) or {})


def _cached_factor(zmat: StandardizedMatrix, imputed_blob: bytes, args, cache_root: Path):
    key = hashlib.sha256(imputed_blob + f"|iterations={args.factor_iterations}".encode()).hexdigest()[:24]
    cdir = cache_root / key
    if not args.no_cache and (cdir / "coefficients.json").exists():
        with open(cdir / "coefficients.json", encoding="utf-8") as fh:
            return CoefficientSet.from_json(json.load(fh)), True
    coef = principal_factor(zmat, iterations=args.factor_iterations)
    if not args.no_cache:
        cdir.mkdir(parents=True, exist_ok=True)
        np.savez(cdir / "standardized.npz", Z=zmat.Z, means=zmat.column_means, sds=zmat.column_sds)
        with open(cdir / "coefficients.json", "w", encoding="utf-8") as fh:
            dump_json(coef.to_json(), fh)
    return coef, False


def cmd_build_index(args) -> int:
    _check_exists(args.census, args.schema, args.coefficients)
    variants = _variants(args.variants)
    if "ADI" in variants and args.coefficients is None:
        raise StageError("config", ValueError("ADI variant requested but no --coefficients file given"))
    out = Path(args.out)
    timings: dict = {}
    staging = Staging(out)
    try:
        with stage("parse", timings):
            schema = _load_schema(args.schema)
            with open(args.census, encoding="utf-8", newline="") as fh:
                records = parse_block_groups(fh, schema, delimiter=args.delimiter)
            if not records:
                raise ValueError(f"no block groups in {args.census}")
        with stage("filter", timings):
            report = filter_block_groups(records)
            with staging.open("filter_report.csv") as fh:
                report.write(fh)
        with stage("impute", timings):
            imputed, audit = knn_impute(report.records, ImputationConfig(k=args.k))
            with staging.open("imputation_audit.csv") as fh:
                audit.write(fh)
            buf = io.StringIO()
            write_jsonl(imputed, buf)
            blob = buf.getvalue().encode()
            with staging.open("imputed.jsonl") as fh:
                fh.write(buf.getvalue())
        with stage("standardize", timings):
            zmat = standardize(imputed)
        cache_hit = False
        if "bADI" in variants:
            with stage("factor", timings):
                coef, cache_hit = _cached_factor(zmat, blob, args, out / ".cache")
                with staging.open("coefficients.json") as fh:
                    dump_json(coef.to_json(), fh)
            with stage("score", timings):
                badi = scores_from(zmat, coef, "bADI")
                with staging.open("index_badi.csv") as fh:
                    badi.write(fh)
        if "ADI" in variants:
            with stage("adi", timings):
                with open(args.coefficients, encoding="utf-8") as fh:
                    weights = load_external_coefficients(fh)
                adi = replicate_adi(imputed, weights)
                with staging.open("index_adi.csv") as fh:
                    adi.write(fh)
        outputs = staging.commit()
    except BaseException:
        staging.abort()
        raise
    timings["cache_hit"] = cache_hit
    write_manifest(out, args, [Path(args.census), _opt(args.schema), _opt(args.coefficients)], outputs, timings)
    logger.info("kept %d of %d block groups; imputed %d cells", len(report.kept), len(records), len(audit))
    return 0


def _opt(p):
    return None if p is None else Path(p)


def _variants(text) -> list[str]:
    items = [v.strip() for v in (text if isinstance(text, list) else str(text).split(",")) if v.strip()]
    lookup = {"badi": "bADI", "adi": "ADI"}
    out = []
    for v in items:
        if v.lower() not in lookup:
            raise StageError("config", ValueError(f"unknown index variant {v!r}"))
        out.append(lookup[v.lower()])
    return out


def _load_index_dir(index_dir: Path) -> dict[str, IndexScores]:
    found = {}
    for name, variant in (("index_badi.csv", "bADI"), ("index_adi.csv", "ADI")):
        p = index_dir / name
        if p.exists():
            with open(p, encoding="utf-8") as fh:
                found[variant] = IndexScores.read(fh)
    if not found:
        raise FileNotFoundError(f"no index_*.csv files in {index_dir}")
    return found


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def _read_external(spec: str) -> tuple[str, pd.Series]:
    name, _, path = spec.partition("=")
    if not path:
        raise ValueError(f"--external expects NAME=PATH, got {spec!r}")
    df = pd.read_csv(path, dtype={"geoid": str})
    return name, pd.Series(df["value"].to_numpy(dtype=float), index=df["geoid"].str.strip().to_numpy())


def cmd_benchmark(args) -> int:
    index_dir = Path(args.index_dir)
    _check_exists(index_dir, args.outcomes, args.tract_outcomes, args.crosswalk)
    out = Path(args.out)
    timings: dict = {}
    stats = [s.strip() for s in args.statistics.split(",") if s.strip()]
    staging = Staging(out)
    summary: dict = {"schema_version": 1}
    inputs = []
    try:
        with stage("load", timings):
            indices = _load_index_dir(index_dir)
            with open(index_dir / "imputed.jsonl", encoding="utf-8") as fh:
                records = read_jsonl(fh)
            housing = pd.Series([r.variables[HOME_VALUE_INDEX] for r in records],
                                index=[r.geo.key for r in records], dtype=float)
            population = pd.Series([r.population for r in records], index=housing.index, dtype=float)
            crosswalk = None
            if args.crosswalk:
                with open(args.crosswalk, encoding="utf-8", newline="") as fh:
                    crosswalk = MetroCrosswalk.read(fh)
                inputs.append(Path(args.crosswalk))
            field_name = "percentile" if args.percentile_avg else "rescaled"
            bg_values = {v: index_values(s, field_name) for v, s in indices.items()}
            for v, s in bg_values.items():
                common_geoids_or_raise(s, housing.index, f"imputed block groups ({v})")

        with stage("housing", timings):
            county_report = CorrelationReport()
            for v in sorted(indices):
                county_report = county_report.extend(
                    housing_correlation_by_county(index_values(indices[v]), housing, variant=v))
            with staging.open("housing_county.csv") as fh:
                county_report.write_csv(fh)
            summary["housing_quantiles"] = {
                v: housing_quantiles(county_report, v) for v in sorted(indices)
                if len(county_report.values(v))
            }
            with staging.open("housing_quantiles.csv") as fh:
                fh.write("variant,min,q1,q2,q3,max\n")
                for v, q in summary["housing_quantiles"].items():
                    fh.write(",".join([v] + [repr(q[k]) for k in ("min", "q1", "q2", "q3", "max")]) + "\n")
            with staging.open("fig1_county_correlations.csv") as fh:
                housing_figure_data(county_report, absolute=True).to_csv(fh, lineterminator="\n")
            with staging.open("figA1_county_pearson.csv") as fh:
                housing_figure_data(county_report, absolute=False).to_csv(fh, lineterminator="\n")
            if crosswalk is not None:
                metro_report = CorrelationReport()
                for v in sorted(indices):
                    metro_report = metro_report.extend(
                        housing_correlation_by_metro(index_values(indices[v]), housing, crosswalk, variant=v))
                with staging.open("housing_metro.csv") as fh:
                    metro_report.write_csv(fh)
                summary["housing_metro"] = metro_report.to_json()

        externals = dict(_read_external(s) for s in (args.external or []))
        weights = population if args.weighted_agg else None
        for level, path in (("county", args.outcomes), ("tract", args.tract_outcomes)):
            if not path:
                continue
            with stage(f"outcomes_{level}", timings):
                inputs.append(Path(path))
                table = OutcomeTable.read(path, level)
                tables = {v: aggregate(s, level, weights) for v, s in bg_values.items()}
                width = 5 if level == "county" else 11
                tables.update({k: s for k, s in externals.items() if len(str(s.index[0])) == width})
                for v, s in tables.items():
                    common_geoids_or_raise(s, table.frame["geoid"], f"{level} outcomes ({v})")
                report = outcome_correlations(tables, table, stats)
                with staging.open(f"outcomes_{level}.csv") as fh:
                    report.write_csv(fh)
                summary[f"outcomes_{level}"] = report.to_json()
                if crosswalk is not None:
                    metro = outcome_correlations(tables, table, stats, crosswalk=crosswalk)
                    with staging.open(f"outcomes_{level}_by_metro.csv") as fh:
                        metro.write_csv(fh)
                    summary[f"outcomes_{level}_by_metro"] = metro.to_json()

        with staging.open("benchmark.json") as fh:
            dump_json(summary, fh)
        outputs = staging.commit()
    except BaseException:
        staging.abort()
        raise
    inputs.extend(sorted(index_dir.glob("index_*.csv")))
    write_manifest(out, args, inputs, outputs, timings)
    return 0


# ---------------------------------------------------------------------------
# glm
# ---------------------------------------------------------------------------


def cmd_glm(args) -> int:
    _check_exists(args.beneficiaries, args.index_dir)
    out = Path(args.out)
    timings: dict = {}
    staging = Staging(out)
    try:
        with stage("load", timings):
            beneficiaries = read_beneficiaries(args.beneficiaries)
            indices = _load_index_dir(Path(args.index_dir))
            wanted = _variants(args.variants) if args.variants else sorted(indices)
            quintiles = {v: indices[v].quintile_map() for v in wanted}
        with stage("fit", timings):
            grid = stratified_run(beneficiaries, quintiles, quasi=args.quasi)
            with staging.open("contrast_grid.csv") as fh:
                grid.write_csv(fh)
            with staging.open("contrast_grid.json") as fh:
                dump_json(grid.to_json(), fh)
        outputs = staging.commit()
    except BaseException:
        staging.abort()
        raise
    failures = [f"{s.program}/{s.state}/{s.variant}/{s.outcome}: {s.reason}" for s in grid.skipped]
    write_manifest(out, args, [Path(args.beneficiaries)], outputs, timings, failures)
    return 0


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------


def _synth_config(args) -> SynthConfig:
    names = {f.name for f in fields(SynthConfig)}
    kwargs = {k: v for k, v in (args.synth or {}).items() if k in names}
    for name in ("seed", "n_states", "counties_per_state", "tracts_per_county", "block_groups_per_tract",
                 "missing_rate", "violation_rate", "noise_sd"):
        value = getattr(args, name, None)
        if value is not None:
            kwargs[name] = value
    cfg = SynthConfig(**kwargs)
    if args.beneficiaries_per_stratum is not None:
        cfg.beneficiaries = {(p, s): args.beneficiaries_per_stratum for p in ("FFS", "MA") for s in cfg.states}
    return cfg


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    out = Path(args.out)
    timings: dict = {}
    staging = Staging(out)
    try:
        with stage("census", timings):
            census = synth_census(cfg)
            with staging.open("census.csv") as fh:
                write_block_groups(census.records, fh)
            with staging.open("latent.csv") as fh:
                fh.write("geoid,latent\n")
                for g in sorted(census.latent):
                    fh.write(f"{g},{census.latent[g]!r}\n")
            with staging.open("adi_coefficients.json") as fh:
                dump_json({"coefficients": cfg.true_adi_weights().tolist(),
                           "note": "weights of the generating one-factor model"}, fh)
            with staging.open("outcomes_county.csv") as fh:
                synth_outcomes(cfg, census).to_csv(fh, index=False, lineterminator="\n")
            with staging.open("crosswalk.csv") as fh:
                synth_crosswalk(census).to_csv(fh, index=False, lineterminator="\n")
        if not args.no_beneficiaries:
            with stage("beneficiaries", timings):
                kept = filter_block_groups(census.records).records
                imputed, _ = knn_impute(kept)
                zmat = standardize(imputed)
                if cfg.quintile_variant == "ADI":
                    scores = replicate_adi(imputed, cfg.true_adi_weights())
                else:
                    scores = scores_from(zmat, principal_factor(zmat), "bADI")
                people = synth_beneficiaries(cfg, scores.quintile_map())
                with staging.open("beneficiaries.csv") as fh:
                    write_beneficiaries(people, fh)
        outputs = staging.commit()
    except BaseException:
        staging.abort()
        raise
    write_manifest(out, args, [], outputs, timings)
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------


def cmd_report(args) -> int:
    lines = ["# bADI run report", ""]
    for d in map(Path, args.run_dirs):
        lines.append(f"## {d}")
        lines.append("")
        coef_path = d / "coefficients.json"
        if coef_path.exists():
            coef = CoefficientSet.from_json(json.loads(coef_path.read_text()))
            lines.append(f"Leading eigenvalue {coef.eigenvalue:.4f}; oriented score coefficients:")
            lines.append("")
            lines.append("| variable | loading | weight |")
            lines.append("|---|---|---|")
            for name, l, w in zip(VARIABLE_NAMES, coef.oriented_loadings, coef.oriented_weights):
                lines.append(f"| {name} | {l:.4f} | {w:.4f} |")
            lines.append("")
        for name in ("index_badi.csv", "index_adi.csv"):
            p = d / name
            if p.exists():
                with open(p, encoding="utf-8") as fh:
                    s = IndexScores.read(fh)
                lines.append(f"{s.variant}: n={len(s)}, mean={s.rescaled.mean():.6f}, "
                             f"sd={s.rescaled.std():.6f}, quintile counts="
                             f"{np.bincount(s.national_quintile, minlength=6)[1:].tolist()}")
        bench = d / "benchmark.json"
        if bench.exists():
            summary = json.loads(bench.read_text())
            lines.append("")
            lines.append("Housing correlation quantiles over counties (absolute Pearson):")
            lines.append("")
            lines.append("| variant | min | Q1 | Q2 | Q3 | max |")
            lines.append("|---|---|---|---|---|---|")
            for v, q in summary.get("housing_quantiles", {}).items():
                lines.append(f"| {v} | " + " | ".join(f"{q[k]:.2f}" for k in ("min", "q1", "q2", "q3", "max")) + " |")
        grid = d / "contrast_grid.csv"
        if grid.exists():
            df = pd.read_csv(grid)
            lines.append("")
            lines.append("Quintile contrasts versus Q3:")
            lines.append("")
            cols = ["program", "state", "variant", "outcome", "q1_effect", "q1_p", "q5_effect", "q5_p", "n"]
            lines.append("| " + " | ".join(cols) + " |")
            lines.append("|" + "---|" * len(cols))
            for row in df[cols].itertuples(index=False):
                cells = [f"{x:.4g}" if isinstance(x, float) else str(x) for x in row]
                lines.append("| " + " | ".join(cells) + " |")
        lines.append("")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def build_parser(config: dict | None = None) -> argparse.ArgumentParser:
    """Argument parser; ``config`` sections (keyed by subcommand) become defaults."""
    config = config or {}
    parser = argparse.ArgumentParser(prog="badi", description="Balanced Area Deprivation Index toolkit")
    parser.add_argument("--config", help="YAML config file; command-line flags override it")
    parser.add_argument("--log-level", default="WARNING")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-index", help="parse, filter, impute and score block groups")
    p.add_argument("--census", required=False, help="block-group table")
    p.add_argument("--schema", help="YAML column mapping (defaults to canonical names)")
    p.add_argument("--delimiter", default=",")
    p.add_argument("--coefficients", help="JSON weights for the ADI variant")
    p.add_argument("--variants", default=None, help="comma list of bADI, ADI")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--factor-iterations", type=int, default=1)
    p.add_argument("--out", required=False)
    p.add_argument("--no-cache", action="store_true")
    p.set_defaults(func=cmd_build_index)

    p = sub.add_parser("benchmark", help="housing and outcome correlations")
    p.add_argument("--index-dir", required=False)
    p.add_argument("--outcomes", help="county outcome table (geoid, measure, value)")
    p.add_argument("--tract-outcomes", help="tract outcome table")
    p.add_argument("--crosswalk", help="county_fips, metro_id, metro_name table")
    p.add_argument("--external", action="append", help="NAME=PATH area-level index (geoid, value)")
    p.add_argument("--statistics", default="pearson,spearman_decile")
    p.add_argument("--weighted-agg", action="store_true", help="population-weighted county means")
    p.add_argument("--percentile-avg", action="store_true", help="average percentiles instead of scores")
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("glm", help="quintile contrasts for cost and ER visits")
    p.add_argument("--beneficiaries", required=False)
    p.add_argument("--index-dir", required=False)
    p.add_argument("--variants", default=None)
    p.add_argument("--quasi", action="store_true", help="Pearson-dispersion SEs for ER visits")
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_glm)

    p = sub.add_parser("synth", help="write synthetic census, outcome and beneficiary files")
    p.add_argument("--out", required=False)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-states", type=int)
    p.add_argument("--counties-per-state", type=int)
    p.add_argument("--tracts-per-county", type=int)
    p.add_argument("--block-groups-per-tract", type=int)
    p.add_argument("--missing-rate", type=float)
    p.add_argument("--violation-rate", type=float)
    p.add_argument("--noise-sd", type=float)
    p.add_argument("--beneficiaries-per-stratum", type=int)
    p.add_argument("--no-beneficiaries", action="store_true")
    p.set_defaults(func=cmd_synth, synth=None)

    p = sub.add_parser("report", help="summarize run directories as markdown")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    for name, p in sub.choices.items():
        section = {k.replace("-", "_"): v for k, v in (config.get(name) or {}).items()}
        known = {a.dest for a in p._actions}
        extra = {k: v for k, v in section.items() if k not in known}
        if extra and name != "synth":
            raise ValueError(f"unknown config keys for {name}: {sorted(extra)}")
        p.set_defaults(**{k: v for k, v in section.items() if k in known})
        if name == "synth":
            p.set_defaults(synth=extra)
    return parser


REQUIRED = {
    "build-index": ("census", "out"),
    "benchmark": ("index_dir", "out"),
    "glm": ("beneficiaries", "index_dir", "out"),
    "synth": ("out",),
}


def parse_args(argv=None):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    doc = {}
    if known.config:
        with open(known.config, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh) or {}
    parser = build_parser(doc)
    args = parser.parse_args(argv)
    if args.command == "build-index" and args.variants is None:
        args.variants = "bADI,ADI" if args.coefficients else "bADI"
    for dest in REQUIRED.get(args.command, ()):
        if getattr(args, dest, None) in (None, ""):
            parser.error(f"{args.command}: --{dest.replace('_', '-')} is required (flag or config)")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except (OSError, ValueError, yaml.YAMLError) as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
