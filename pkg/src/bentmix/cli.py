"""Command-line front end: fit, simulate, summarize, compare-dic, replicate-study.

Every command writes a single ``manifest.json`` into its output directory
recording the command, a digest of the resolved configuration, the seed(s),
package versions, wall-clock time, and the primary output paths.  Given the
same inputs and seed, primary outputs are byte-identical across runs.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, load_csv, write_csv
from .priors import Hyperparameters, default_hyperparameters, elicit_scale_matrices
from .sampler import ChainOutput, ChainSettings, SamplerError, run_chain, VARIANTS
from .selection import compare_models
from .simulate import (
    BUILTIN_SCENARIOS,
    ScenarioSpec,
    builtin_scenario,
    generate,
    replicate_study,
)
from .summarize import (
    curves_to_csv,
    fitted_individual,
    fitted_population,
    render_svg,
    report_to_json,
    summarize_population,
)


def _worker_cap(requested=None) -> int:
    cap = os.environ.get("BENTCABLE_THREADS")
    cap = int(cap) if cap else (os.cpu_count() or 1)
    if requested is not None:
        cap = min(cap, int(requested))
    return max(cap, 1)


def _fresh_seed() -> int:
    return int(np.random.SeedSequence().entropy % (2**63))


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def _write_manifest(out_dir: Path, command: str, config: dict, seeds, outputs,
                    started: float, extra=None) -> None:
    manifest = {
        "command": command,
        "config_digest": _digest(config),
        "config": config,
        "seeds": seeds,
        "versions": {
            "bentmix": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
        "wall_clock_sec": round(time.monotonic() - started, 3),
        "outputs": [str(p) for p in outputs],
    }
    if extra:
        manifest.update(extra)
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_config(path):
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _settings_from(config: dict, args, seed: int) -> ChainSettings:
    def pick(flag, key, default):
        val = getattr(args, flag, None)
        if val is not None:
            return val
        return config.get(key, default)

    return ChainSettings(
        iters=int(pick("iters", "iters", 20000)),
        burnin=int(pick("burnin", "burnin", 5000)),
        thin=int(pick("thin", "thin", 1)),
        seed=seed,
        adapt_every=int(config.get("adapt_every", 100)),
        adapt_target=float(config.get("adapt_target", 0.3)),
        step_init=float(config.get("step_init", 0.25)),
    )


def _build_hyper(dataset, p: int, config: dict) -> Hyperparameters:
    scale_beta, scale_alpha = elicit_scale_matrices(dataset)
    hyper = default_hyperparameters(p, scale_beta, scale_alpha)
    overrides = config.get("hyperparameters", {})
    if overrides:
        hyper = hyper.override(overrides)
    return hyper


def _resolve_scenario(args) -> ScenarioSpec:
    if getattr(args, "spec", None):
        spec = ScenarioSpec.from_json(args.spec)
    elif getattr(args, "scenario", None):
        spec = builtin_scenario(args.scenario)
    else:
        raise ValueError("provide --scenario or --spec")
    if getattr(args, "seed", None) is not None:
        from dataclasses import replace

        spec = replace(spec, seed=int(args.seed))
    return spec


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_fit(args) -> int:
    started = time.monotonic()
    config = _load_config(args.config)
    dataset = load_csv(args.data)
    p = int(args.p if args.p is not None else config.get("p", 0))
    variant = args.variant or config.get("variant", "flexible")
    n_chains = int(args.chains if args.chains is not None else config.get("chains", 1))
    seed = args.seed if args.seed is not None else config.get("seed")
    seed = int(seed) if seed is not None else _fresh_seed()
    hyper = _build_hyper(dataset, p, config)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    chain_meta = []
    lo, hi = dataset.time_range()
    for c in range(n_chains):
        settings = _settings_from(config, args, seed + c)
        chain = run_chain(dataset, hyper, p, settings, variant=variant)
        draws_path = out_dir / f"draws_chain{c + 1}.csv"
        chain.save_csv(draws_path)
        outputs.append(draws_path)
        chain_meta.append({**chain.meta_dict(), "draws_file": draws_path.name})
        print(
            f"chain {c + 1}/{n_chains}: {chain.n_draws} draws, "
            f"mean alpha acceptance {float(chain.alpha_accept_rate.mean()):.3f}"
            + (
                f", stationarity proportion {chain.stationarity_proportion:.3f}"
                if chain.stationarity_proportion is not None
                else ""
            )
        )
    _write_manifest(
        out_dir,
        "fit",
        {**config, "p": p, "variant": variant, "chains": n_chains,
         "data": str(args.data)},
        [seed + c for c in range(n_chains)],
        outputs,
        started,
        extra={"chains": chain_meta, "data_time_range": [lo, hi],
               "hyperparameters": hyper.to_dict()},
    )
    return 0


def cmd_simulate(args) -> int:
    started = time.monotonic()
    spec = _resolve_scenario(args)
    dataset, truth = generate(spec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_path = out_dir / "dataset.csv"
    truth_path = out_dir / "truth.json"
    write_csv(dataset, data_path)
    with open(truth_path, "w", encoding="utf-8") as fh:
        json.dump(truth, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(
        out_dir, "simulate", spec.to_dict(), [spec.seed],
        [data_path, truth_path], started,
    )
    print(f"wrote {dataset.m} profiles ({sum(dataset.n)} rows) to {data_path}")
    return 0


def _load_chain_dir(chain_dir: Path):
    manifest_path = chain_dir / "manifest.json"
    meta_by_file = {}
    time_range = None
    if manifest_path.exists():
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        time_range = manifest.get("data_time_range")
        for entry in manifest.get("chains", []):
            meta_by_file[entry.get("draws_file")] = entry
    files = sorted(chain_dir.glob("draws_chain*.csv")) or sorted(chain_dir.glob("*.csv"))
    if not files:
        raise DataError(f"no chain draws found in {chain_dir}")
    chains = [ChainOutput.load_csv(f, meta_by_file.get(f.name)) for f in files]
    return chains, time_range


def _pool_chains(chains):
    if len(chains) == 1:
        return chains[0]
    import dataclasses

    first = chains[0]
    pooled = {}
    for name in (
        "omega", "mu_beta", "Sigma_beta", "mu_alpha", "Sigma_alpha",
        "mu_tauA", "sigma2_tauA", "phi", "beta", "gamma", "tau",
        "indicator", "sigma2", "deviance",
    ):
        pooled[name] = np.concatenate([getattr(ch, name) for ch in chains], axis=0)
    rates = np.stack([ch.alpha_accept_rate for ch in chains])
    props = [ch.stationarity_proportion for ch in chains if ch.stationarity_proportion is not None]
    return dataclasses.replace(
        first,
        **pooled,
        alpha_accept_rate=rates.mean(axis=0),
        indicator_flips=np.sum([ch.indicator_flips for ch in chains], axis=0),
        stationarity_proportion=float(np.mean(props)) if props else None,
    )


def cmd_summarize(args) -> int:
    started = time.monotonic()
    chain_dir = Path(args.chain_dir)
    chains, time_range = _load_chain_dir(chain_dir)
    chain = _pool_chains(chains)
    report = summarize_population(chain, time_factor=args.time_factor)

    out_dir = Path(args.out) if args.out else chain_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.json"
    report_to_json(report, report_path)
    outputs = [report_path]

    if time_range is None:
        time_range = (0.0, 1.0)
    grid = np.linspace(time_range[0], time_range[1], 200)
    curves = fitted_population(chain, grid)
    if args.data:
        dataset = load_csv(args.data)
        for i, prof in enumerate(dataset.profiles):
            curves[f"individual:{prof.id}"] = fitted_individual(chain, i, prof.times)
    curves_path = out_dir / "curves.csv"
    curves_to_csv(curves, curves_path)
    outputs.append(curves_path)
    if args.svg:
        svg_path = out_dir / "curves.svg"
        render_svg({k: v for k, v in curves.items() if k in ("G", "A")}, svg_path)
        outputs.append(svg_path)
    _write_manifest(
        out_dir, "summarize",
        {"chain_dir": str(chain_dir), "time_factor": args.time_factor},
        [chain.seed], outputs, started,
    )
    print(f"report written to {report_path}")
    return 0


def cmd_compare_dic(args) -> int:
    started = time.monotonic()
    config = _load_config(args.config)
    dataset = load_csv(args.data)
    p_list = [int(tok) for tok in str(args.p or config.get("p", "0")).split(",")]
    variants = [v.strip() for v in (args.variant or "flexible").split(",")]
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; choose from {VARIANTS}")
    seed = args.seed if args.seed is not None else config.get("seed")
    seed = int(seed) if seed is not None else _fresh_seed()
    settings = _settings_from(config, args, seed)
    hyper = _build_hyper(dataset, max(p_list), config)

    comparison = compare_models(
        dataset, hyper, p_list, variants, settings,
        refit_winner=not args.no_refit, workers=_worker_cap(),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranking_path = out_dir / "dic_ranking.json"
    with open(ranking_path, "w", encoding="utf-8") as fh:
        json.dump([rep.to_dict() for rep in comparison.reports], fh, indent=2)
        fh.write("\n")
    outputs = [ranking_path]

    lines = [f"{'rank':>4}  {'p':>2}  {'variant':<10}  {'DIC':>14}  {'pD':>10}"]
    for k, rep in enumerate(comparison.reports, start=1):
        lines.append(
            f"{k:>4}  {rep.p:>2}  {rep.variant:<10}  {rep.dic:>14.3f}  {rep.pd:>10.3f}"
        )
    table = "\n".join(lines)
    table_path = out_dir / "dic_ranking.txt"
    table_path.write_text(table + "\n", encoding="utf-8")
    outputs.append(table_path)
    print(table)

    if comparison.winner_chain is not None:
        winner_path = out_dir / "winner_draws.csv"
        comparison.winner_chain.save_csv(winner_path)
        outputs.append(winner_path)
    _write_manifest(
        out_dir, "compare-dic",
        {**config, "p_list": p_list, "variants": variants, "data": str(args.data)},
        [seed], outputs, started,
        extra={"winner": comparison.winner.to_dict()},
    )
    return 0


def cmd_replicate_study(args) -> int:
    started = time.monotonic()
    config = _load_config(args.config)
    spec = _resolve_scenario(args)
    settings = _settings_from(config, args, spec.seed)
    p_fit = int(args.p) if args.p is not None else None
    variant = args.variant or "flexible"
    report = replicate_study(
        spec, settings, int(args.replicates),
        p_fit=p_fit, variant=variant, workers=_worker_cap(int(args.replicates)),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    study_path = out_dir / "study.csv"
    report.to_csv(study_path)
    _write_manifest(
        out_dir, "replicate-study",
        {**config, "spec": spec.to_dict(), "replicates": int(args.replicates),
         "p_fit": report.p_fit, "variant": variant},
        [spec.seed], [study_path], started,
        extra={"n_failed": report.n_failed},
    )
    print(f"{report.replicates - report.n_failed} replicates succeeded, "
          f"{report.n_failed} failed; study written to {study_path}")
    return 0


# ---------------------------------------------------------------------------
# Parser / entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bentmix",
        description="Bayesian mixture bent-cable regression for longitudinal data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_chain_flags(p):
        p.add_argument("--config", help="JSON config (hyperparameters + chain settings)")
        p.add_argument("--seed", type=int)
        p.add_argument("--iters", type=int)
        p.add_argument("--burnin", type=int)
        p.add_argument("--thin", type=int)

    fit = sub.add_parser("fit", help="fit the model to a CSV dataset")
    fit.add_argument("--data", required=True)
    fit.add_argument("--out", required=True)
    fit.add_argument("--p", type=int, help="AR order of the noise process")
    fit.add_argument("--variant", choices=VARIANTS)
    fit.add_argument("--chains", type=int)
    add_chain_flags(fit)
    fit.set_defaults(func=cmd_fit)

    sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    sim.add_argument("--scenario", help=f"builtin name: {', '.join(BUILTIN_SCENARIOS)}")
    sim.add_argument("--spec", help="scenario spec JSON file")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)

    summ = sub.add_parser("summarize", help="summarize a fitted chain directory")
    summ.add_argument("chain_dir")
    summ.add_argument("--out")
    summ.add_argument("--data", help="original dataset for individual fitted curves")
    summ.add_argument("--time-factor", type=float, default=1.0, dest="time_factor",
                      help="multiply time-dimension summaries (e.g. 0.25 steps->minutes)")
    summ.add_argument("--svg", action="store_true", help="also render curves.svg")
    summ.set_defaults(func=cmd_summarize)

    cmp_ = sub.add_parser("compare-dic", help="rank AR orders/variants by DIC")
    cmp_.add_argument("--data", required=True)
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--p", help="comma-separated AR orders, e.g. 0,1,2")
    cmp_.add_argument("--variant", help="comma-separated variants")
    cmp_.add_argument("--no-refit", action="store_true",
                      help="skip refitting the winner on the full data")
    add_chain_flags(cmp_)
    cmp_.set_defaults(func=cmd_compare_dic)

    rep = sub.add_parser("replicate-study", help="generate-and-fit replicate study")
    rep.add_argument("--scenario")
    rep.add_argument("--spec")
    rep.add_argument("--replicates", type=int, required=True)
    rep.add_argument("--out", required=True)
    rep.add_argument("--p", type=int, help="AR order used for fitting")
    rep.add_argument("--variant", choices=VARIANTS)
    add_chain_flags(rep)
    rep.set_defaults(func=cmd_replicate_study)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, SamplerError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}))
        return 2


if __name__ == "__main__":
    sys.exit(main())
