"""Command-line entry point.

Exit status: 0 when the run converged, 2 when it stopped without converging,
1 on a usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from ..gad import Flow, gad_run
from ..hmm import hmm_run
from ..model import MODEL_NAMES, TWOD_MINIMA, TWOD_SADDLES, ModelError, make_model
from ..scm import scm_run
from . import config as cfgmod
from .analysis import DEFAULT_SEGMENT, cost_report, variance_scan, write_table
from .record import STATUS_CONVERGED, RunRecord
from .reference import ReferenceNotConverged, ReferenceSaddle, make_reference

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED = 0, 1, 2

log = logging.getLogger("msgad")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p):
    p.add_argument("--model", choices=MODEL_NAMES, help="built-in model (default twod-ou)")
    p.add_argument("--config", help="YAML file with dotted or nested keys")
    p.add_argument("--seed", type=int, help="master seed for every random stream")
    p.add_argument("--out", help="output directory (default $MSGAD_OUT/<command>-<model>-s<seed>)")
    p.add_argument("--x0", help="start: comma list, a named 2D point (m1, s2, ...) or 'default'")
    p.add_argument("--v0", help="initial direction: comma list, 'ones' or 'random'")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key, e.g. --set hmm.M=10000 (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="msgad", description="Saddle search on averaged slow-fast dynamics.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("make-reference", help="deterministic GAD on the closed-form averaged force")
    _common(p)
    for name in ("run-gad", "run-hmm", "run-scm"):
        p = sub.add_parser(name, help=f"{name[4:].upper()} saddle search")
        _common(p)
        p.add_argument("--reference", help="reference directory for the error column")
        p.add_argument("--max-time", type=float, help="shortcut for <method>.max_time")
        if name == "run-scm":
            p.add_argument("--switch-to-hmm", action="store_true",
                           help="hand over to the HMM once eps' has decayed")
    p = sub.add_parser("scan-variance", help="estimator variances along a segment")
    _common(p)
    p.add_argument("--segment", help="x1a,x2a,x1b,x2b (default 1.2841,3,1.2841,6)")
    p = sub.add_parser("cost-report", help="aligned error-vs-force-evaluations table")
    p.add_argument("runs", nargs="*", help="run directories holding record.csv")
    p.add_argument("--out", help="CSV path (default stdout)")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _settings(args) -> dict:
    flat = cfgmod.load_config(args.config) if getattr(args, "config", None) else {}
    for item in getattr(args, "set", []):
        key, value = cfgmod.parse_override(item)
        flat[key] = value
    for key, attr in (("model", "model"), ("seed", "seed"), ("x0", "x0"), ("v0", "v0"),
                      ("reference", "reference")):
        value = getattr(args, attr, None)
        if value is not None:
            flat[key] = value
    flat.setdefault("model", "twod-ou")
    flat.setdefault("seed", 0)
    return flat


def _vector(text, n, name):
    values = [float(v) for v in str(text).split(",")]
    if len(values) != n:
        raise UsageError(f"--{name} needs {n} comma-separated values, got {len(values)}")
    return np.array(values)


def _start(flat, model):
    x0 = flat.get("x0")
    if x0 is None or x0 == "default":
        return model.default_x0()
    if isinstance(x0, (list, tuple)):
        return _vector(",".join(map(str, x0)), model.n, "x0")
    named = {**TWOD_MINIMA, **TWOD_SADDLES}
    if model.name == "twod-ou" and str(x0) in named:
        return named[str(x0)].copy()
    return _vector(x0, model.n, "x0")


def _direction(flat, model):
    v0 = flat.get("v0")
    if v0 is None or v0 == "random":
        return np.random.default_rng(np.random.SeedSequence(int(flat["seed"]), spawn_key=(99,))
                                     ).standard_normal(model.n)
    if v0 == "ones":
        return np.ones(model.n)
    if isinstance(v0, (list, tuple)):
        v0 = ",".join(map(str, v0))
    return _vector(v0, model.n, "v0")


def _out_dir(args, flat):
    if args.out:
        return Path(args.out)
    root = Path(os.environ.get("MSGAD_OUT", "runs"))
    return root / f"{args.command}-{flat['model']}-s{flat['seed']}"


def _reference(flat, model):
    path = flat.get("reference")
    if path is None:
        return None
    ref = ReferenceSaddle.load(path)
    if ref.model != model.name:
        raise UsageError(f"reference is for model {ref.model!r}, not {model.name!r}")
    if ref.x.shape != (model.n,):
        if ref.grid is None:
            raise UsageError("reference dimension does not match the model")
        ref = ref.on_grid(model.grid)
    return ref


def _report(rec, out, x_star):
    rec.write(out)
    np.savetxt(out / "x_star.csv", np.atleast_1d(x_star), delimiter=",")
    err = rec.final_error
    tail = f", err {err:.3e}" if np.isfinite(err) else ""
    print(f"{rec.method}: {rec.status} after {len(rec)} rows{tail}; wrote {out}")
    return EXIT_OK if rec.status == STATUS_CONVERGED else EXIT_NOT_CONVERGED


def _run(args) -> int:
    if args.command == "cost-report":
        records = {Path(d).name: RunRecord.read(d) for d in args.runs}
        table = cost_report(records)
        if args.out:
            write_table(table, args.out)
        else:
            names = list(table)
            print(",".join(names))
            for row in zip(*(table[k] for k in names)):
                print(",".join(repr(float(v)) for v in row))
        return EXIT_OK

    flat = _settings(args)
    if getattr(args, "max_time", None) is not None:
        flat[f"{args.command[4:]}.max_time"] = args.max_time
    if getattr(args, "switch_to_hmm", False):
        flat["scm.switch_to_hmm"] = True
    model = make_model(str(flat["model"]), cfgmod.section(flat, "model"))
    seed = int(flat["seed"])
    out = _out_dir(args, flat)

    if args.command == "make-reference":
        ref = make_reference(model, _start(flat, model), _direction(flat, model), seed=seed)
        ref.save(out)
        print(f"reference residual {ref.residual:.3e}; wrote {out}")
        return EXIT_OK

    if args.command == "scan-variance":
        seg = DEFAULT_SEGMENT
        text = args.segment or flat.get("scan.segment")
        if text is not None:
            vals = _vector(",".join(map(str, text)) if isinstance(text, list) else text, 2 * model.n, "segment")
            seg = (vals[: model.n], vals[model.n:])
        table = variance_scan(model, seg, int(flat.get("scan.n_points", 31)),
                              int(flat.get("scan.M", 100_000)), seed)
        path = write_table(table, out / "variance_scan.csv")
        print(f"wrote {path}")
        return EXIT_OK

    x0, v0 = _start(flat, model), _direction(flat, model)
    ref = _reference(flat, model)
    if args.command == "run-gad":
        flow = Flow.from_model(model, ref)
        x_star, rec = gad_run(flow, x0, v0, None, cfgmod.gad_config(flat))
        rec.meta.update(seed=seed, model=model.name, model_params=model.params())
    elif args.command == "run-hmm":
        x_star, rec = hmm_run(model, x0, v0, None, cfgmod.hmm_config(flat), reference=ref, seed=seed)
    else:
        x_star, rec = scm_run(model, x0, v0, None, cfgmod.scm_config(flat), reference=ref, seed=seed)
    return _report(rec, out, x_star)


def cli_main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return _run(args)
    except (UsageError, cfgmod.ConfigError, ModelError) as exc:
        print(f"msgad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ReferenceNotConverged as exc:
        print(f"msgad: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED


def main():
    sys.exit(cli_main())


if __name__ == "__main__":
    main()
