"""Command-line interface: ``koopmpc {datagen,fit,predict,compare,mpc}``.

Each subcommand reads an optional YAML config (unknown keys are rejected),
writes CSV output into ``--out`` and, unless ``--no-figures`` is given,
renders PNG figures next to it.

Exit codes: 0 success, 2 usage or file error, 3 numerical failure,
4 closed-loop infeasibility.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np
import yaml

from . import experiments as ex
from .dictionary import (identity_dictionary, make_kdv_dictionary,
                         make_polynomial_dictionary, make_rbf_dictionary)
from .dynamics import (SYSTEMS, CampaignSpec, IntegrationError,
                       KdvModel, collect_data, collect_kdv_data, delay_embed,
                       discretize, read_dataset, write_dataset)
from .edmd import fit_io_model, fit_model, load_model, save_model
from .predictor import prbs, rollout_lifted, simulate, square_wave

log = logging.getLogger("koopmpc")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_INFEASIBLE = 0, 2, 3, 4


class UsageError(ValueError):
    """Bad configuration or arguments."""


class Infeasible(RuntimeError):
    """A closed-loop run hit an infeasible QP."""


SCHEMA = {
    "datagen": {"system", "n_traj", "steps", "Ts", "seed"},
    "fit": {"dataset", "dictionary", "n_d", "output", "method", "ridge",
            "seed"},
    "predict": {"model", "x0", "steps", "forcing", "system", "seed"},
    "compare": {"experiment", "dataset", "n_traj", "steps", "n_trials",
                "horizon", "n_rbf", "sizes", "seed"},
    "mpc": {"scenario", "controller", "model", "horizon", "weights",
            "bounds", "reference", "x0", "steps", "n_traj",
            "steps_per_traj", "seed"},
}
DICT_KEYS = {"kind", "count", "box", "seed", "width", "degree"}


def load_config(path, command) -> dict:
    """Read a YAML mapping and reject keys outside the command schema."""
    if path is None:
        return {}
    with open(path) as fh:
        try:
            cfg = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise UsageError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config must be a mapping")
    unknown = set(cfg) - SCHEMA[command]
    if unknown:
        raise UsageError(f"unknown config keys for {command}: "
                         f"{sorted(unknown)}")
    return cfg


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating))
                        else v for v in row])


# -- commands ----------------------------------------------------------------

def cmd_datagen(cfg, args):
    name = cfg.get("system", "vdp")
    spec = CampaignSpec(int(cfg.get("n_traj", 200)),
                        int(cfg.get("steps", 1000)),
                        float(cfg.get("Ts", 0.01)), args.seed)
    if name == "kdv":
        data = collect_kdv_data(KdvModel(dt=spec.Ts), spec)
    elif name in SYSTEMS:
        data = collect_data(SYSTEMS[name], spec)
    else:
        raise UsageError(f"unknown system {name!r}")
    ext = "csv" if args.format == "csv" else "bin"
    path = os.path.join(args.out, f"dataset.{ext}")
    write_dataset(data, path, args.format)
    print(f"wrote {path}: n={data.n} m={data.m} K={data.K}")


def build_dictionary(spec: dict, n: int, seed: int):
    unknown = set(spec) - DICT_KEYS
    if unknown:
        raise UsageError(f"unknown dictionary keys {sorted(unknown)}")
    kind = spec.get("kind", "rbf")
    if kind in ("rbf", "thin_plate_rbf", "gauss_rbf"):
        return make_rbf_dictionary(
            n, int(spec.get("count", 100)), spec.get("box"),
            int(spec.get("seed", seed)),
            "gauss_rbf" if kind == "gauss_rbf" else "thin_plate_rbf",
            float(spec.get("width", 1.0)))
    if kind == "identity":
        return identity_dictionary(n)
    if kind == "kdv":
        return make_kdv_dictionary(n)
    if kind == "polynomial":
        return make_polynomial_dictionary(n, int(spec.get("degree", 2)))
    raise UsageError(f"unknown dictionary kind {kind!r}")


def cmd_fit(cfg, args):
    if "dataset" not in cfg:
        raise UsageError("fit needs 'dataset' in the config")
    data = read_dataset(cfg["dataset"])
    method = cfg.get("method", "normal_equations")
    ridge = float(cfg.get("ridge", 0.0))
    n_d = cfg.get("n_d")
    if n_d is None:
        dic = build_dictionary(cfg.get("dictionary", {}), data.n, args.seed)
        model, report = fit_model(dic, data, method, ridge)
    else:
        idx = list(cfg.get("output", range(data.n)))
        io = delay_embed(data, int(n_d), output=lambda X: X[idx])
        dic = build_dictionary(cfg.get("dictionary", {}), io.n, args.seed)
        model, report = fit_io_model(dic, io, int(n_d), len(idx), method,
                                     ridge)
    path = os.path.join(args.out, "model.txt")
    save_model(model, path)
    print(f"wrote {path}: N={model.N}")
    print(report.summary())


def _forcing(spec, steps, rng):
    spec = spec or {"square": {"period": 0.3}}
    if not isinstance(spec, dict) or len(spec) != 1:
        raise UsageError("forcing must be a one-key mapping")
    (kind, a), = spec.items()
    a = a or {}
    if kind == "square":
        return square_wave(steps, 0.01, float(a.get("period", 0.3)),
                           float(a.get("amplitude", 1.0)))
    if kind == "prbs":
        return prbs(rng, steps, switch_prob=float(a.get("switch_prob", 0.5)))
    if kind == "constant":
        return np.full((1, steps), float(a.get("value", 0.0)))
    raise UsageError(f"unknown forcing {kind!r}")


def cmd_predict(cfg, args):
    if "model" not in cfg or "x0" not in cfg:
        raise UsageError("predict needs 'model' and 'x0'")
    model = load_model(cfg["model"])
    steps = int(cfg.get("steps", 200))
    u = _forcing(cfg.get("forcing"), steps, np.random.default_rng(args.seed))
    x0 = np.asarray(cfg["x0"], dtype=float)
    pred = rollout_lifted(model, x0, u)
    cols = {f"pred{i}": pred[i] for i in range(pred.shape[0])}
    truth = None
    if "system" in cfg:
        if cfg["system"] not in SYSTEMS:
            raise UsageError(f"unknown system {cfg['system']!r}")
        truth = simulate(discretize(SYSTEMS[cfg["system"]], 0.01), x0, u)
        if truth.shape != pred.shape:
            raise UsageError("model outputs do not match the system state; "
                             "drop 'system' for input-output models")
        cols.update({f"true{i}": truth[i] for i in range(truth.shape[0])})
    path = os.path.join(args.out, "prediction.csv")
    t = 0.01 * np.arange(steps + 1)
    _write_rows(path, ["step", "t"] + list(cols),
                ([k, t[k]] + [c[k] for c in cols.values()]
                 for k in range(steps + 1)))
    print(f"wrote {path}")
    if not args.no_figures and truth is not None:
        from .plotting import plot_prediction
        plot_prediction(os.path.join(args.out, "prediction.png"), 0.01,
                        truth, {"koopman": pred})


def cmd_compare(cfg, args):
    exp = cfg.get("experiment", "table1")
    n_trials = int(cfg.get("n_trials", 100))
    seed = args.seed
    data = read_dataset(cfg["dataset"]) if "dataset" in cfg else None
    sizes = dict(n_traj=int(cfg.get("n_traj", 200)),
                 steps=int(cfg.get("steps", 1000)))
    figs = not args.no_figures
    if figs:
        from . import plotting
    if exp in ("table1", "table2"):
        data = ex.vdp_data(seed, **sizes) if data is None else data
        horizon = int(cfg.get("horizon", ex.VDP_HORIZON))
        if exp == "table1":
            comp, model = ex.vdp_table1(data, n_trials, horizon, seed,
                                        int(cfg.get("n_rbf", 100)))
        else:
            comp = ex.vdp_table2(data, tuple(cfg.get("sizes",
                                                     ex.TABLE2_SIZES)),
                                 n_trials, horizon, seed)
    elif exp == "table3":
        data = ex.motor_data(seed, **sizes) if data is None else data
        horizon = int(cfg.get("horizon", ex.MOTOR_HORIZON))
        model, _ = ex.motor_model(data, int(cfg.get("n_rbf", 100)), seed)
        comp = ex.motor_table3(model, n_trials, horizon, seed)
    else:
        raise UsageError(f"unknown experiment {exp!r}")
    comp.write_csv(os.path.join(args.out, "rmse_trials.csv"),
                   os.path.join(args.out, "rmse_summary.csv"))
    for name, mean in comp.summary().items():
        flag = " (saturated)" if comp.saturated[name].any() else ""
        print(f"{name}: mean RMSE {mean:.6g}%{flag}")
    if figs:
        if exp == "table2":
            plotting.plot_rmse_vs_size(
                os.path.join(args.out, "rmse_vs_size.png"),
                [int(k.split("_")[-1]) for k in comp.names],
                [comp.mean(k) for k in comp.names])
        else:
            plotting.plot_rmse_summary(
                os.path.join(args.out, "rmse_summary.png"), comp.summary())
            trial = (ex.vdp_trials(1, horizon, seed) if exp == "table1"
                     else ex.motor_trials(1, horizon, seed))[0]
            preds = (ex.vdp_predictors(model) if exp == "table1" else {
                "koopman": lambda t: rollout_lifted(model, t.context["zeta"],
                                                    t.u)})
            outs = {}
            for k, p in preds.items():
                out = p(trial)
                outs[k] = out[0] if isinstance(out, tuple) else out
            plotting.plot_prediction(os.path.join(args.out, "trial0.png"),
                                     0.01, trial.truth, outs)


def _motor_scenario(cfg, which):
    sc = dict(ex.MOTOR_SCENARIOS[which])
    if "x0" in cfg:
        sc["x0"] = tuple(cfg["x0"])
    if "reference" in cfg:
        sc["reference"] = cfg["reference"]
    bounds = cfg.get("bounds", {})
    if set(bounds) - {"u", "y"}:
        raise UsageError("bounds accepts only 'u' and 'y'")
    for key in ("u", "y"):
        if key in bounds:
            sc[f"{key}_bounds"] = (None if bounds[key] is None
                                   else tuple(bounds[key]))
    return sc


def _report(res, name, out, figs, reference=None, y_bounds=None, kdv=False):
    path = os.path.join(out, f"closed_loop_{name}.csv")
    res.write_csv(path)
    print(f"{name}: steps={len(res.status)} mean_solve_ms="
          f"{res.solve_ms.mean():.3f} max_solve_ms={res.solve_ms.max():.3f}"
          + (f" infeasible at step {res.infeasible_step}"
             if res.infeasible_step is not None else ""))
    if figs:
        from . import plotting
        png = os.path.join(out, f"closed_loop_{name}.png")
        if kdv:
            plotting.plot_kdv(png, res, reference)
        else:
            plotting.plot_closed_loop(png, res, reference, y_bounds, name)


def cmd_mpc(cfg, args):
    scenario = str(cfg.get("scenario", "motor2"))
    steps = cfg.get("steps")
    figs = not args.no_figures
    weights = cfg.get("weights", {})
    if set(weights) - {"Q", "R"}:
        raise UsageError("weights accepts only 'Q' and 'R'")
    infeasible = []
    if scenario in ("motor1", "motor2"):
        which = int(scenario[-1])
        sc = _motor_scenario(cfg, which)
        Q = float(weights.get("Q", ex.MOTOR_Q))
        R = float(weights.get("R", ex.MOTOR_R))
        Np = int(cfg.get("horizon", ex.MOTOR_NP))
        kinds = cfg.get("controller", "both")
        kinds = ["koopman", "linearized"] if kinds == "both" else [kinds]
        model = None
        if "koopman" in kinds:
            model = (load_model(cfg["model"]) if "model" in cfg
                     else ex.motor_model(seed=args.seed)[0])
            if model.delay is None:
                raise UsageError("motor control needs an input-output model")
        for kind in kinds:
            res, ctrl = ex.motor_closed_loop(
                kind, sc, model, int(steps or ex.MOTOR_STEPS), Np, Q, R)
            print(f"{kind}: condensations={ctrl.n_condense}")
            _report(res, f"{scenario}_{kind}", args.out, figs,
                    ex.make_reference(sc["reference"]), sc.get("y_bounds"))
            if res.infeasible_step is not None:
                infeasible.append(kind)
    elif scenario == "kdv":
        if cfg.get("controller", "koopman") not in ("koopman", "both"):
            raise UsageError("kdv supports only the koopman controller")
        model = (load_model(cfg["model"]) if "model" in cfg else
                 ex.kdv_model(int(cfg.get("n_traj", 1000)),
                              int(cfg.get("steps_per_traj", 200)),
                              args.seed)[0])
        ref_spec = cfg.get("reference", ex.KDV_REFERENCE)
        res, ctrl = ex.kdv_closed_loop(model, ref_spec,
                                       int(steps or ex.KDV_STEPS),
                                       int(cfg.get("horizon", ex.KDV_NP)))
        _report(res, "kdv_koopman", args.out, figs,
                ex.make_reference(ref_spec, 0.01, 128), kdv=True)
        if res.infeasible_step is not None:
            infeasible.append("koopman")
    else:
        raise UsageError(f"unknown scenario {scenario!r}")
    if infeasible:
        raise Infeasible(", ".join(infeasible))


COMMANDS = {"datagen": cmd_datagen, "fit": cmd_fit, "predict": cmd_predict,
            "compare": cmd_compare, "mpc": cmd_mpc}


def build_parser():
    p = argparse.ArgumentParser(prog="koopmpc", description=__doc__.split(
        "\n")[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, default=None,
                   help="base seed (overrides the config; default 0)")
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--format", choices=("csv", "binary"), default="csv",
                   help="dataset file format for datagen")
    p.add_argument("--no-figures", action="store_true",
                   help="skip PNG rendering")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else
                        logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config, args.command)
        if args.seed is None:
            args.seed = int(cfg.get("seed", 0))
        os.makedirs(args.out, exist_ok=True)
        COMMANDS[args.command](cfg, args)
    except Infeasible as exc:
        print(f"error: closed loop infeasible ({exc})", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FloatingPointError, IntegrationError, np.linalg.LinAlgError) \
            as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
