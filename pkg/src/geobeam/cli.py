"""Command line entry point: ``geobeam run <config>`` and ``geobeam report <dir>``.

Exit codes: 0 when every assertion holds, 1 when an assertion fails or an
experiment raises, 2 for usage and configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import platform
import sys
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .errors import ConfigurationError, GeobeamError, UsageError
from .experiments import clean, config_digest, load_config, run_experiment

MANIFEST = "manifest.json"


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: Path, rows: list):
    cols = []
    for r in rows:
        for k in r:
            if k not in cols:
                cols.append(k)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(clean(r.get(c))) for c in cols])


def write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(clean(obj), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _stems(configs):
    kinds = [c.kind for c in configs]
    return [c.kind if kinds.count(c.kind) == 1 else f"{c.kind}-{c.name}" for c in configs]


def cmd_run(args) -> int:
    if args.workers < 1:
        raise UsageError("--workers must be at least 1")
    configs = load_config(args.config, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.config).with_suffix("").parent / (Path(args.config).stem + "_out")
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    status = "pass"
    for cfg, stem in zip(configs, _stems(configs)):
        entry = {"name": cfg.name, "kind": cfg.kind, "outputs": []}
        try:
            res = run_experiment(cfg, workers=args.workers)
        except GeobeamError as exc:
            entry.update({"status": "error", "error": f"{type(exc).__name__}: {exc}", "assertions": []})
            status = "fail"
            print(f"[{cfg.name}] ERROR {type(exc).__name__}: {exc}")
            entries.append(entry)
            continue
        write_csv(out / f"{stem}.csv", res.records)
        entry["outputs"].append(f"{stem}.csv")
        for tname, rows in sorted(res.extra_tables.items()):
            write_csv(out / f"{stem}.{tname}.csv", rows)
            entry["outputs"].append(f"{stem}.{tname}.csv")
        write_json(out / f"{stem}.json", {
            "name": cfg.name, "kind": cfg.kind, "seed": cfg.seed, "settings": cfg.settings, "chart": cfg.chart,
            "records": res.records, "summary": res.summary, "assertions": res.assertions,
        })
        entry["outputs"].append(f"{stem}.json")
        entry["status"] = "pass" if res.passed else "fail"
        entry["assertions"] = res.assertions
        entry["summary"] = res.summary
        if not res.passed:
            status = "fail"
        for a in res.assertions:
            print(f"[{cfg.name}] {'PASS' if a['passed'] else 'FAIL'} {a['name']}: value={clean(a['value'])} limit={a['limit']}")
        entries.append(entry)
    manifest = {
        "config": Path(args.config).name,
        "config_sha256": config_digest(args.config),
        "seed": configs[0].seed,
        "workers_independent": True,
        "versions": {"geobeam": __version__, "numpy": np.__version__, "scipy": scipy.__version__, "python": platform.python_version()},
        "experiments": entries,
        "status": status,
    }
    write_json(out / MANIFEST, manifest)
    print(f"status: {status} ({out})")
    return 0 if status == "pass" else 1


# ---------------------------------------------------------------------------
# report


def _table(headers, rows):
    cells = [[_fmt_cell(v) for v in r] for r in rows]
    widths = [max(len(h), *(len(c[i]) for c in cells)) if cells else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.rjust(w) for h, w in zip(headers, widths))]
    lines += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in cells]
    return "\n".join(lines)


def _fmt_cell(v):
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _local_orders(hs, vals):
    out = [None]
    for i in range(1, len(hs)):
        if vals[i] and vals[i - 1] and vals[i] > 0 and vals[i - 1] > 0:
            out.append(float(np.log(vals[i - 1] / vals[i]) / np.log(hs[i - 1] / hs[i])))
        else:
            out.append(None)
    return out


def format_experiment(data: dict) -> str:
    kind, recs = data["kind"], data["records"]
    if kind in ("beam_residual_sweep", "wkb_residual_sweep"):
        hs = [r["h"] for r in recs]
        b = [r["residual_bound"] for r in recs]
        orders = _local_orders(hs, b)
        return _table(["h", "bound", "bound/h", "fitted order"], [(r["h"], r["residual_bound"], r["bound_over_h"], o) for r, o in zip(recs, orders)])
    if kind == "carleman_check":
        return _table(["h", "eps", "family", "min_ratio"], [(r["h"], r["eps"], r["family"], r["min_ratio"]) for r in recs])
    if kind == "riccati_demo":
        s = data["summary"]
        return _table(["closed form error", "min eig Im H", "det identity error"], [(s.get("closed_form_error"), s.get("im_min_eigenvalue"), s.get("det_identity_error"))])
    if kind == "concentration":
        return _table(["lam", "pairing", "slice", "limit", "rel error"], [(r["lam"], r["pairing"], complex(r["re_slice"], r["im_slice"]), complex(r["re_limit"], r["im_limit"]), r["rel_error"]) for r in recs])
    if kind == "ray_roundtrip":
        return _table(["lam", "geodesics", "f error", "d alpha error", "solenoidal gap", "gauge"], [(r["lam"], r["n_geodesics"], r["f_error"], r["dalpha_error"], r["solenoidal_gap"], r["gauge_invariance"]) for r in recs])
    if kind == "boundary_recovery":
        s = data["summary"]
        t = _table(["lam", "Re I1", "Im I1"], [(r["lam"], r["re_I1"], r["im_I1"]) for r in recs])
        ex = s["exponents"]
        t += "\n" + _table(["estimate", "target", "rel error"], [(s["estimate_re"], s["target"], s["rel_error"])])
        t += "\n" + _table(["norm", "fitted exponent", "expected"], [(k, ex[k], s["expected_exponents"][k]) for k in sorted(ex)])
        return t
    if kind == "holonomy_gauge":
        return _table(["kappa", "trivial", "dist to Z", "conjugation", "boundary"], [(r["kappa"], r["trivial"], r["max_distance_to_Z"], r["conjugation_error"], r["boundary_error"]) for r in recs])
    return _table(list(recs[0]), [list(r.values()) for r in recs]) if recs else "(no records)"


def cmd_report(args) -> int:
    d = Path(args.dir)
    mpath = d / MANIFEST
    if not mpath.is_file():
        raise UsageError(f"no {MANIFEST} in {str(d)!r}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"unreadable manifest: {exc}") from None
    print(f"config {manifest['config']} sha256 {manifest['config_sha256'][:16]} seed {manifest['seed']}")
    for e in manifest["experiments"]:
        print()
        print(f"== {e['name']} ({e['kind']}): {e['status'].upper()}")
        if e["status"] == "error":
            print(f"   {e['error']}")
            continue
        for a in e["assertions"]:
            print(f"   {'PASS' if a['passed'] else 'FAIL'} {a['name']}: {a['value']} vs {a['limit']}")
        js = [o for o in e["outputs"] if o.endswith(".json")]
        if js:
            data = json.loads((d / js[0]).read_text(encoding="utf-8"))
            print(format_experiment(data))
    print()
    print(f"overall: {manifest['status'].upper()}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="geobeam", description="Run and summarise geobeam experiments.")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run the experiments of a config file")
    r.add_argument("config")
    r.add_argument("--workers", type=int, default=1, help="parallel workers per parameter sweep")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--out", default=None, help="artifact directory (default: <config>_out)")
    r.set_defaults(func=cmd_run)
    s = sub.add_parser("report", help="summarise an artifact directory")
    s.add_argument("dir")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, UsageError) as exc:
        print(f"geobeam: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
