"""Command-line entry point: ``subgroup-gda {generate,fit,experiment,typei}``.

Exit codes: 0 success, 2 configuration error, 3 I/O or input-data error,
4 infeasible or collapsed result, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace

import numpy as np

from .config import PRESETS, RunConfig, load_config
from .data import write_csv
from .errors import (CollapseError, DomainError, FitError, NumericalError, ParameterError, ParseError, SchemaError,
                     StudyError)
from .gda import write_trace_csv
from .nuisance import save_models
from .pipeline import derive_seed, fit_cell, load_data, prepare_split, run_experiment, run_typei, versions

log = logging.getLogger("subgroup_gda")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INFEASIBLE, EXIT_NUMERICAL = 0, 2, 3, 4, 5


def _json_default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialise {type(o).__name__}")


def write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=_json_default, allow_nan=True)
        fh.write("\n")


def write_records_csv(path, records) -> None:
    keys = sorted({k for r in records for k in r})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for r in records:
            w.writerow({k: json.dumps(v, default=_json_default) if isinstance(v, (dict, list)) else v
                        for k, v in r.items()})


def _outdir(cfg: RunConfig, args) -> str:
    out = args.out or cfg.output_dir
    os.makedirs(out, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(cfg: RunConfig, args) -> int:
    if cfg.data.source != "synthetic":
        raise ParameterError("generate needs a synthetic data source")
    out = _outdir(cfg, args)
    seed = derive_seed(cfg.experiment.seed, 0)
    ds = load_data(cfg, seed)
    path = os.path.join(out, "dataset.csv")
    write_csv(ds, path)
    write_json(os.path.join(out, "dataset.json"), {
        "dgp": cfg.data.dgp_config().to_dict(), "seed": seed, "master_seed": cfg.experiment.seed,
        "constraint_aux": cfg.data.constraint_aux, "risk_form": cfg.data.risk_form,
        "aux_feature_scale": cfg.data.aux_feature_scale, "rows": ds.n, "columns": ds.d,
    })
    write_json(os.path.join(out, "resolved_config.json"), cfg.to_dict())
    print(f"wrote {ds.n} rows to {path}")
    return EXIT_OK


def cmd_fit(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    bundle = prepare_split(cfg, 0)
    res = fit_cell(cfg, bundle, cfg.constraints.size_c, cfg.constraints.alpha)
    rep = res.report
    save_models(os.path.join(out, "nuisance.json"), bundle.propensity, bundle.outcome)
    write_json(os.path.join(out, "surrogate.json"), rep.model.to_dict())
    doc = rep.to_dict()
    doc.pop("model")
    doc.update({"record": res.record(), "train_metrics": res.train_metrics.to_dict(),
                "test_metrics": res.test_metrics.to_dict(), "n_overlap_constraints": res.cset.n_overlap,
                "versions": versions()})
    write_json(os.path.join(out, "report.json"), doc)
    write_json(os.path.join(out, "resolved_config.json"), cfg.to_dict())
    if args.trace:
        write_trace_csv(rep.traces, os.path.join(out, "trace.csv"), res.cset.names())
    if args.dump_phi:
        with open(os.path.join(out, "phi.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["row", "phi", "e_hat"])
            for i, (p, e) in enumerate(zip(bundle.phi_train, bundle.est_train.e_hat)):
                w.writerow([i, repr(float(p)), repr(float(e))])
    status = "collapsed" if rep.collapsed else ("feasible" if rep.feasible else "infeasible")
    print(f"{rep.termination}: {status}, group size {rep.final_size:.4f}, "
          f"{res.cset.n_overlap} overlap constraints, restarts {rep.restarts}")
    return EXIT_OK if rep.feasible else EXIT_INFEASIBLE


def cmd_experiment(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    report = run_experiment(cfg)
    write_json(os.path.join(out, "experiment.json"), report.to_dict())
    write_records_csv(os.path.join(out, "metrics.csv"), report.records)
    write_records_csv(os.path.join(out, "aggregates.csv"), report.aggregates)
    write_json(os.path.join(out, "resolved_config.json"), cfg.to_dict())
    failed = sum("error" in r for r in report.records)
    print(f"{len(report.records)} records ({failed} failed) in {report.wall_clock:.1f}s")
    return EXIT_OK


def cmd_typei(cfg: RunConfig, args) -> int:
    out = _outdir(cfg, args)
    result = run_typei(cfg)
    write_json(os.path.join(out, "typei.json"), result)
    write_records_csv(os.path.join(out, "typei_records.csv"), result["records"])
    write_json(os.path.join(out, "resolved_config.json"), cfg.to_dict())
    for c, rate in result["rejection_rate"].items():
        print(f"c={c}: rejection rate {rate:.3f}")
    return EXIT_OK


COMMANDS = {"generate": cmd_generate, "fit": cmd_fit, "experiment": cmd_experiment, "typei": cmd_typei}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="subgroup-gda", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", required=True, help="run configuration (JSON)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--seed", type=int, help="master seed (overrides experiment.seed)")
    p.add_argument("--trace", action="store_true", help="write the per-iteration trace CSV (fit)")
    p.add_argument("--dump-phi", action="store_true", help="write training pseudo-outcomes (fit)")
    p.add_argument("--preset", choices=sorted(PRESETS), help="merge the config over a named preset")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.preset)
        if args.seed is not None:
            cfg = replace(cfg, experiment=replace(cfg.experiment, seed=args.seed))
        return COMMANDS[args.command](cfg, args)
    except (ParameterError, SchemaError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ParseError, DomainError, FitError) as exc:
        print(f"input/output error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (CollapseError, StudyError) as exc:
        print(f"no usable result: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except NumericalError as exc:
        where = f" (iteration {exc.iteration})" if exc.iteration is not None else ""
        print(f"numerical error{where}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
