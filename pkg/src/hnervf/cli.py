"""``hnervf`` command line: fit, predict and simulate.

Exit codes: 0 success, 2 usage or config error, 3 data parse error,
4 data schema error, 5 estimation error, 6 study failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import estimation, simulation
from .errors import HnervfError, StudyFailureError
from .estimation import FitOptions
from .io import (
    ConfigError,
    ParseError,
    SchemaError,
    ingest,
    load_config,
    write_json,
    write_rows,
)
from .prediction import PredictionTarget, mse_report

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_PARSE = 3
EXIT_SCHEMA = 4
EXIT_ESTIMATION = 5
EXIT_STUDY = 6

# full-scale replication counts, used unless the config overrides them
DEFAULT_R = 10_000
DEFAULT_R_MSE = 10_000
DEFAULT_R_EST = 5_000


def _fit_options(cfg: dict) -> FitOptions:
    kw = dict(cfg.get("fit", {}))
    if isinstance(kw.get("gamma_init"), list):
        kw["gamma_init"] = np.asarray(kw["gamma_init"], dtype=float)
    return FitOptions(**kw)


def _out(args, cfg, key, default) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out / cfg.get("outputs", {}).get(key, default)


def fit_report(fit, data) -> dict:
    p, q = data.p, data.q
    est = {f"beta_{k}": fit.beta[k] for k in range(p)}
    est.update({f"gamma_{k}": fit.gamma[k] for k in range(q)})
    est["tau2"] = fit.tau2
    rep = {
        "estimates": est,
        "display": {k: f"{v:.2f}" for k, v in est.items()},
        "beta": fit.beta,
        "gamma": fit.gamma,
        "tau2": fit.tau2,
        "variance_function": fit.vf.kind,
        "data": {"m": data.m, "N": data.N, "p": p, "q": q},
        "diagnostics": {
            "newton_iterations": fit.newton_iterations,
            "newton_residual": fit.newton_residual,
            "tau2_raw": fit.tau2_raw,
            "tau2_truncated": fit.tau2_truncated,
            "variance_floored": fit.variance_floored,
            "flags": fit.flags,
            "formulas": fit.options.formulas,
            "kurtosis_coef": fit.options.kurtosis_coef,
        },
    }
    if fit.omega is not None:
        o = fit.omega
        rep["omega"] = {
            "full": o.full,
            "beta_beta": o.bb,
            "beta_gamma": o.bg,
            "beta_tau": o.bt,
            "gamma_gamma": o.gg,
            "gamma_tau": o.gt,
            "tau_tau": o.tt,
        }
    if fit.bias is not None:
        rep["bias"] = {"b_beta": fit.bias.b_beta, "b_gamma": fit.bias.b_gamma, "b_tau": fit.bias.b_tau}
    rep["kurtosis"] = (
        {"kappa_v": fit.kurtosis.kappa_v, "kappa_eps": fit.kurtosis.kappa_eps}
        if fit.kurtosis is not None
        else {"note": fit.kurtosis_note}
    )
    return rep


def _fit(args, cfg):
    data = ingest(args.data)
    vf = cfg.get("variance_function", "exponential")
    res = estimation.fit(data, vf, _fit_options(cfg))
    return data, res


def cmd_fit(args, cfg) -> int:
    data, res = _fit(args, cfg)
    path = _out(args, cfg, "fit", "fit.json")
    write_json(fit_report(res, data), path)
    rep = fit_report(res, data)["display"]
    print("  ".join(f"{k}={v}" for k, v in rep.items()))
    print(f"wrote {path}")
    return EXIT_OK


PREDICT_HEADER = [
    "cluster_id", "n", "mean", "eblup", "smse", "naive_smse", "dif",
    "mse", "r1_plugin", "r1_bias", "r1_corrected", "r2", "r31", "clipped",
]


def cmd_predict(args, cfg) -> int:
    data, res = _fit(args, cfg)
    targets = [PredictionTarget(str(t["cluster_id"]), t.get("c")) for t in cfg.get("targets", [])]
    rep = mse_report(res, data, targets or None)
    write_json(fit_report(res, data), _out(args, cfg, "fit", "fit.json"))
    path = _out(args, cfg, "predict", "predict.csv")
    rows = [
        [
            rep.ids[i], int(rep.n[i]), rep.sample_mean[i], rep.eblup[i], rep.smse[i], rep.naive_smse[i],
            rep.dif[i], rep.mse_estimate[i], rep.r1_plugin[i], rep.r1_bias[i], rep.r1_corrected[i],
            rep.r2[i], rep.r31[i], int(rep.clipped[i]),
        ]
        for i in range(len(rep))
    ]
    write_rows(path, PREDICT_HEADER, rows)
    print(f"{'area':>8} {'n':>3} {'mean':>9} {'EBLUP':>9} {'SMSE':>7} {'naive':>7} {'dif':>7}")
    for r in rows:
        print(f"{r[0]:>8} {r[1]:>3} {r[2]:9.2f} {r[3]:9.2f} {r[4]:7.2f} {r[5]:7.2f} {r[6]:7.2f}")
    if rep.flags:
        print("flags: " + ", ".join(rep.flags))
    print(f"wrote {path}")
    return EXIT_OK


def _study_config(preset: str, cfg: dict):
    st = dict(cfg.get("study", {}))
    dgp_keys = ("m", "sizes", "beta", "gamma", "tau", "x_range", "z_range")
    over = {k: (tuple(st[k]) if isinstance(st[k], list) else st[k]) for k in dgp_keys if k in st}
    if "seed" in cfg:
        over["seed"] = cfg["seed"]
    if preset == "custom":
        base = simulation.DgpConfig(**over)
        kind = st.get("kind", "eblup_mse")
    else:
        base = simulation.preset(preset, **over)
        kind = "mse_estimator" if preset == "table1" else "eblup_mse"
        if st.get("kind", kind) != kind:
            raise ConfigError(f"preset {preset} runs a {kind} study; study.kind={st['kind']!r} conflicts")
    dists = st.get("distributions", list(simulation.DISTRIBUTIONS))
    return base, kind, dists, st


def cmd_simulate(args, cfg) -> int:
    base, kind, dists, st = _study_config(args.preset, cfg)
    opts = _fit_options(cfg)
    path = _out(args, cfg, "study", "study.csv")
    rows = []
    if kind == "eblup_mse":
        R = st.get("R", DEFAULT_R)
        print(f"{'model':>5} {'area':>4} {'n':>3} {'HNERVF':>8} {'NER':>8}")
        for d in dists:
            res = simulation.run_eblup_mse_study(base.with_(distribution=d), R, opts)
            for k, aid in enumerate(res.area_ids):
                n = int(res.sizes[k])
                rows.append([d, aid, n, "", "HNERVF", "mse", res.mse_hnervf[k]])
                rows.append([d, aid, n, "", "NER", "mse", res.mse_ner[k]])
                print(f"{d:>5} {aid:>4} {n:>3} {res.mse_hnervf[k]:8.2f} {res.mse_ner[k]:8.2f}")
    else:
        R_mse = st.get("R_mse", DEFAULT_R_MSE)
        R_est = st.get("R_est", DEFAULT_R_EST)
        table = []
        for d in dists:
            res = simulation.run_mse_estimator_study(base.with_(distribution=d), R_mse, R_est, opts)
            for k, aid in enumerate(res.area_ids):
                n, g = int(res.sizes[k]), int(res.groups[k])
                for name, arr in (("mse_true", res.mse_hnervf), ("rb", res.rb), ("cv", res.cv), ("rbn", res.rbn)):
                    rows.append([d, aid, n, g, "HNERVF", name, arr[k]])
            gm = res.group_means()
            for g, (rb, cv, rbn) in gm.items():
                for name, v in (("RB", rb), ("CV", cv), ("RBN", rbn)):
                    rows.append([d, "", "", g, "HNERVF", name, v])
            table.append((d, gm))
        groups = sorted(table[0][1])
        print("model " + " ".join(f"{'G' + str(g) + ' RB':>8} {'CV':>7} {'RBN':>7}" for g in groups))
        for d, gm in table:
            print(f"{d:>5} " + " ".join(f"{gm[g][0]:8.2f} {gm[g][1]:7.2f} {gm[g][2]:7.2f}" for g in groups))
    write_rows(path, ["model", "area", "n", "group", "estimator", "quantity", "value"], rows)
    print(f"wrote {path}")
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="hnervf", description="Nested error regression with variance functions.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, helptext in (("fit", "estimate parameters, write fit.json"), ("predict", "EBLUPs and MSE estimates, write predict.csv")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True, help="CSV with cluster_id,y,x1..xp,z1..zq")
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--out", default=".", help="output directory")
    p = sub.add_parser("simulate", help="Monte Carlo studies, write study.csv")
    p.add_argument("--preset", required=True, choices=["fig1", "fig2", "table1", "custom"])
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--out", default=".", help="output directory")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        return {"fit": cmd_fit, "predict": cmd_predict, "simulate": cmd_simulate}[args.command](args, cfg)
    except (ConfigError, TypeError) as exc:
        print(f"hnervf: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ParseError as exc:
        print(f"hnervf: parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except SchemaError as exc:
        print(f"hnervf: schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except StudyFailureError as exc:
        print(f"hnervf: study failed: {exc}", file=sys.stderr)
        return EXIT_STUDY
    except (HnervfError, ValueError, KeyError) as exc:
        print(f"hnervf: estimation error: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION


if __name__ == "__main__":
    sys.exit(main())
