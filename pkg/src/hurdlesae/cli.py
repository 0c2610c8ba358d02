"""Command-line interface: ``hurdlesae <command> [--config run.json] [flags]``.

Exit codes: 0 success, 2 input error, 3 missing prerequisite, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diagnostics, direct, evaluate, predict
from .config import RunConfig
from .data import (
    PLOT_KEY_COLUMNS,
    StandardizationStats,
    attach_grid,
    load_plot_table,
    read_header,
    spatial_subsample,
    write_plot_table,
)
from .errors import ConfigError, InputError, MissingPrerequisiteError, NumericalError, SchemaError
from .mcmc import SampleStore
from .pipeline import HurdleFit, fit_hurdle
from .simulate import SimConfig, sample_replicate, simulate_population

log = logging.getLogger("hurdlesae")

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERICAL = 0, 2, 3, 4

STAGE_DIRS = ("stage1", "stage2")
STATS_FILE = "standardization.json"
POSTERIOR_DIR = "area_posterior"


# ---- helpers -----------------------------------------------------------------


def _out(cfg: RunConfig) -> Path:
    p = Path(cfg.output_dir)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _species(cfg: RunConfig, plots: Path) -> list[str]:
    """Configured species, or every column that is neither a key nor a covariate."""
    if cfg.species:
        return cfg.species
    header = read_header(plots)
    covs = set(cfg.stage1.linear) | set(cfg.stage2.linear)
    found = [h for h in header if h not in PLOT_KEY_COLUMNS and h not in covs]
    if not found:
        raise SchemaError(f"{plots}: no species columns found")
    return found


def _load_plots(cfg: RunConfig, command: str):
    path = cfg.require("plots")
    covs = list(dict.fromkeys([*cfg.stage1.linear, *cfg.stage2.linear]))
    table = load_plot_table(path, _species(cfg, path), covs)
    if cfg.subsample is not None:
        table = spatial_subsample(table, cfg.subsample, np.random.default_rng([cfg.seed, 7]))
        log.info("%s: spatial subsample of %d plots", command, table.n)
    return table


def _drop_rare(table, minimum: int = 2):
    """Species with fewer than ``minimum`` presences removed (subsampled fits only)."""
    keep = np.sum(table.response > 0, axis=1) >= minimum
    dropped = [sp for sp, k in zip(table.species, keep) if not k]
    if dropped:
        log.warning("subsample leaves fewer than %d presences for %s; not modeled", minimum, ", ".join(dropped))
        table = replace(table, species=tuple(sp for sp, k in zip(table.species, keep) if k),
                        response=table.response[keep])
    return table, dropped


def _load_fit(cfg: RunConfig) -> HurdleFit:
    out = Path(cfg.output_dir)
    stores = []
    for name in STAGE_DIRS:
        if not (out / name / "manifest.json").exists():
            raise MissingPrerequisiteError(f"missing {name} sample store at {out / name}; run 'fit' first")
        stores.append(SampleStore.load(out / name))
    stats_path = out / STATS_FILE
    if not stats_path.exists():
        raise MissingPrerequisiteError(f"missing {stats_path}; run 'fit' first")
    stats = StandardizationStats.from_dict(json.loads(stats_path.read_text(encoding="utf-8")))
    return HurdleFit(stores[0], stores[1], stats)


def _write_rows(path: Path, header, rows, manifest: str) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        fh.write(f"# {manifest}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _write_rhat(store: SampleStore, path: Path, manifest: str) -> float:
    if store.n_chains < 2:
        _write_rows(path, ("stage", "block", "index", "rhat"), [], manifest)
        return float("nan")
    rows = diagnostics.rhat_table(store)
    _write_rows(path, ("stage", "block", "index", "rhat"),
                [(store.stage, r["block"], r["index"], repr(r["rhat"])) for r in rows], manifest)
    return max(r["rhat"] for r in rows)


def _write_traces(store: SampleStore, blocks, out: Path, manifest: str) -> None:
    for name in blocks:
        if name not in store.blocks:
            continue
        a = store.blocks[name]
        flat = a.reshape(a.shape[0], a.shape[1], -1)
        cols = [f"{name}[{','.join(map(str, idx))}]" for idx in np.ndindex(a.shape[2:])] or [name]
        rows = [[c, d, *map(repr, flat[c, d].tolist())] for c in range(flat.shape[0]) for d in range(flat.shape[1])]
        _write_rows(out / f"trace_{store.stage}_{name}.csv", ("chain", "draw", *cols), rows, manifest)


# ---- commands ----------------------------------------------------------------


def cmd_fit(cfg: RunConfig) -> None:
    table = _load_plots(cfg, "fit")
    dropped = []
    if cfg.subsample is not None:
        table, dropped = _drop_rare(table)
    out = _out(cfg)
    manifest = cfg.manifest("fit")
    settings = cfg.fit_settings()
    fit = fit_hurdle(table, settings)
    for name, store in zip(STAGE_DIRS, (fit.stage1, fit.stage2)):
        store.meta["manifest"] = manifest
        store.save(out / name)
        _write_traces(store, cfg.trace_blocks, out, manifest)
    (out / STATS_FILE).write_text(json.dumps(fit.stats.to_dict(), indent=2) + "\n", encoding="utf-8")
    worst = [_write_rhat(s, out / f"rhat_{s.stage}.csv", manifest) for s in (fit.stage1, fit.stage2)]
    (out / "fit_manifest.json").write_text(json.dumps({
        "manifest": manifest, "n_plots": table.n, "species": list(table.species),
        "dropped_species": dropped, "mcmc1": settings.mcmc1.to_dict(), "mcmc2": settings.mcmc2.to_dict(),
        "config": {k: v for k, v in cfg.to_dict().items() if k not in ("output_dir", "threads")},
    }, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"fit: {table.n} plots, {table.n_species} species; max R-hat stage1={worst[0]:.3f} stage2={worst[1]:.3f}")


def cmd_predict(cfg: RunConfig) -> None:
    fit = _load_fit(cfg)
    grid = attach_grid(cfg.require("grid"), fit.stats, fit.stage1.meta["species"])
    post = predict.predict_area_posterior(fit.stage1, fit.stage2, grid, seed=cfg.seed, block_size=cfg.block_size)
    post.save(_out(cfg) / POSTERIOR_DIR)
    print(f"predict: {grid.n} cells, {len(post.areas)} areas, {post.draws.shape[2]} draws")


def cmd_aggregate(cfg: RunConfig) -> None:
    out = _out(cfg)
    post = predict.AreaPosterior.load(out / POSTERIOR_DIR)
    est = predict.summarize(post, cfg.level)
    predict.write_estimates(est, out / "area_estimates.csv", manifest=cfg.manifest("aggregate"))
    print(f"aggregate: {len(est)} (species, area) estimates")


def cmd_direct(cfg: RunConfig) -> None:
    table = _load_plots(cfg, "direct")
    est = direct.direct_table(table)
    direct.write_direct(est, _out(cfg) / "direct_estimates.csv", manifest=cfg.manifest("direct"))
    print(f"direct: {len(est)} (species, area) estimates")


def cmd_simulate(cfg: RunConfig, args) -> None:
    sim = SimConfig.from_json(args.sim_config) if args.sim_config else (
        SimConfig.paper_scale() if args.paper_scale else SimConfig())
    if args.replicates is not None:
        sim = SimConfig.from_dict({**sim.to_dict(), "n_replicates": args.replicates})
    out = _out(cfg)
    manifest = cfg.manifest("simulate") + f" sim_seed={sim.seed} sim_version={sim.version}"
    population, truth = simulate_population(sim)
    write_plot_table(population, out / "population.csv", manifest=manifest)
    _write_rows(out / "truth.csv", ("species", "area_id", "true_mean"),
                [(sp, a, repr(truth.mean(sp, a))) for sp in truth.species for a in truth.areas], manifest)
    (out / "sim_config.json").write_text(json.dumps(sim.to_dict(), indent=2, sort_keys=True) + "\n")
    rdir = out / "replicates"
    rdir.mkdir(exist_ok=True)
    for r in range(sim.n_replicates):
        sample = sample_replicate(population, sim.sample_size, np.random.default_rng([sim.seed, 1, r]))
        write_plot_table(sample, rdir / f"sample_{r:03d}.csv", manifest=manifest + f" replicate={r}")
    print(f"simulate: {population.n} units, {len(truth.species)} species, {len(truth.areas)} areas, "
          f"{sim.n_replicates} samples of {sim.sample_size}")


def _keyed(path: Path, value: str) -> dict:
    if not path.exists():
        raise MissingPrerequisiteError(f"estimate file not found: {path}")
    rows = predict.read_estimates(path)
    if rows and value not in rows[0]:
        raise SchemaError(f"{path}: no {value!r} column")
    return {(r["species"], r["area_id"]): r for r in rows}


def cmd_evaluate(cfg: RunConfig, args) -> None:
    out = _out(cfg)
    model_path = Path(args.estimates) if args.estimates else out / "area_estimates.csv"
    direct_path = Path(args.direct) if args.direct else out / "direct_estimates.csv"
    model = _keyed(model_path, args.point)
    drct = _keyed(direct_path, "mean")
    if args.truth:
        ref = {k: r["true_mean"] for k, r in _keyed(Path(args.truth), "true_mean").items()}
        mode = "truth"
    else:
        ref = {k: r["mean"] for k, r in drct.items()}
        mode = "direct"
    report = evaluate.score(
        {k: r[args.point] for k, r in model.items()}, ref, mode,
        model_cv={k: r["cv"] for k, r in model.items()},
        direct_cv={k: r["cv"] for k, r in drct.items()},
    )
    manifest = cfg.manifest("evaluate")
    report.write_csv(out / "evaluation.csv", manifest=manifest)
    report.write_json(out / "evaluation.json", manifest=manifest)
    pct = report.pct_re_gt1
    print(f"evaluate ({mode}): {len(report.species)} species; RE > 1 in "
          f"{'undefined' if pct is None else f'{pct:.1f}%'} of cells")


def cmd_diagnose(cfg: RunConfig) -> None:
    fit = _load_fit(cfg)
    out = _out(cfg)
    manifest = cfg.manifest("diagnose")
    rows = []
    for store in (fit.stage1, fit.stage2):
        if store.n_chains >= 2:
            rows += [(store.stage, r["block"], r["index"], repr(r["rhat"])) for r in diagnostics.rhat_table(store)]
        for c, st in enumerate(store.meta.get("chain_stats", [])):
            rows += [(store.stage, "phi_acceptance", f"{c},{r}", repr(float(a))) for r, a in enumerate(st["phi_acceptance"])]
    _write_rows(out / "diagnostics.csv", ("stage", "quantity", "index", "value"), rows, manifest)
    rh = [float(r[3]) for r in rows if r[1] != "phi_acceptance"]
    print(f"diagnose: {len(rows)} rows; max R-hat {max(rh):.3f}" if rh else "diagnose: single chain, no R-hat")


COMMANDS = ("fit", "predict", "aggregate", "direct", "simulate", "evaluate", "diagnose")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hurdlesae", description="Spatial hurdle small-area estimation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration JSON; flags override it")
    common.add_argument("--plots")
    common.add_argument("--grid")
    common.add_argument("--out", dest="output_dir")
    common.add_argument("--species", type=lambda s: [x.strip() for x in s.split(",") if x.strip()],
                        help="comma-separated species columns")
    common.add_argument("--q", type=int)
    common.add_argument("--m", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--level", type=float)
    common.add_argument("--block-size", dest="block_size", type=int)
    common.add_argument("--subsample", type=float, help="fraction of plots kept by spatial subsampling")
    common.add_argument("--n-chains", dest="n_chains", type=int)
    common.add_argument("--n-iters", dest="n_iters", type=int)
    common.add_argument("--n-burn", dest="n_burn", type=int)
    common.add_argument("--n-thin", dest="n_thin", type=int)
    common.add_argument("--threads", type=int, help="maximum worker processes")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name, parents=[common])
        if name == "simulate":
            sp.add_argument("--sim-config", help="SimConfig JSON")
            sp.add_argument("--paper-scale", action="store_true")
            sp.add_argument("--replicates", type=int)
        if name == "evaluate":
            sp.add_argument("--estimates", help="model estimate CSV (default: <out>/area_estimates.csv)")
            sp.add_argument("--direct", help="direct estimate CSV (default: <out>/direct_estimates.csv)")
            sp.add_argument("--truth", help="true-mean CSV; scores against it instead of the direct estimates")
            sp.add_argument("--point", choices=("median", "mean"), default="median")
    return p


_FLAGS = ("plots", "grid", "output_dir", "species", "q", "m", "seed", "level", "block_size", "subsample",
          "n_chains", "n_iters", "n_burn", "n_thin", "threads")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = RunConfig.load(args.config).override(**{k: getattr(args, k) for k in _FLAGS})
        if args.command == "simulate":
            cmd_simulate(cfg, args)
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args)
        else:
            globals()[f"cmd_{args.command}"](cfg)
    except MissingPrerequisiteError as exc:
        print(f"error [{args.command}] missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (InputError, ConfigError) as exc:
        print(f"error [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"error [{args.command}] numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
