"""Command line runner: ``mulnoise <command> --config run.json``.

Each command reads one JSON document, validates it completely, and writes
CSV/JSON files into ``<out>/<command>-<hash>`` where the hash is taken over
the canonical config.  Exit status: 0 when every check passes, 2 when a
certified inequality or invariant fails, 1 on usage errors.
"""

import argparse
import hashlib
import json
import math
import os
import sys

import numpy as np

from . import analysis, converse, montecarlo
from ._validation import ConfigError, check_int, check_keys, check_positive
from .controllers import ScaledStrategy, TwoStepMeanOne, strategy_from_config
from .noise import NoiseModel

EXIT_OK, EXIT_USAGE, EXIT_FAILED = 0, 1, 2

DEFAULT_MODEL = {"kind": "gaussian_mean_one", "sigma": 1.0}

COMMAND_KEYS = {
    "thresholds": {"model", "a"},
    "simulate": {"model", "strategy", "a", "trials", "horizon", "seed", "smc_particles",
                 "smc_replicates", "probes", "block_size", "budget", "report_every", "x0",
                 "bootstrap", "naive"},
    "sweep": {"model", "strategy", "a_lo", "a_hi", "width", "trials", "horizon", "seed",
              "smc_replicates"},
    "verify": {"sigmas", "fd_step"},
    "converse": {"model", "strategy", "a", "trials", "horizon", "seed", "constants", "probe"},
    "clt": {"model", "a", "d", "horizons", "trials", "seed", "calibration"},
}
PROBE_KEYS = {"a", "M", "trials", "horizon", "strategy", "seed"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _model(cfg):
    return NoiseModel.from_config(cfg.get("model", DEFAULT_MODEL))


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def run_dir(out, command, cfg):
    digest = hashlib.sha256(canonical({"command": command, **cfg}).encode()).hexdigest()[:12]
    path = os.path.join(out, f"{command}-{digest}")
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "config.json"), "w") as fh:
        fh.write(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    return path


def write_csv(path, header, rows):
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_cell(v) for v in row) + "\n")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_json(path, obj):
    obj = {"schema_version": montecarlo.SCHEMA_VERSION, **obj}
    with open(path, "w") as fh:
        json.dump(_jsonable(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return v if math.isfinite(v) else repr(v)
    return v


def print_table(rows, stream=None):
    stream = stream or sys.stdout
    rows = [[_cell(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    for r in rows:
        stream.write("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n")


# -- commands -----------------------------------------------------------------

def cmd_thresholds(cfg, args, out):
    model = _model(cfg)
    a = cfg.get("a")
    if a is not None:
        check_positive(a, "a")
    rep = analysis.thresholds(model, a)
    rows = [("quantity", "value")] + rep.rows()
    write_csv(os.path.join(out, "thresholds.csv"), ["quantity", "value"], rep.rows())
    failed = [k for k, v in rep.certificates.items() if not v > 0]
    write_json(os.path.join(out, "summary.json"), {
        "model": model.to_config(), "a_star": rep.a_star, "d_star": rep.d_star,
        "d_dagger": rep.d_dagger, "a_dagger": rep.a_dagger, "mu_dagger": rep.mu_dagger,
        "certificates": rep.certificates, "flagged": rep.flagged, "failed": failed})
    if args.summary:
        print_table(rows)
    return EXIT_FAILED if failed else EXIT_OK


def _ensemble_config(cfg, args):
    model = _model(cfg)
    if "a" not in cfg:
        raise ConfigError("simulate: 'a' is required")
    kw = {k: cfg[k] for k in ("smc_particles", "smc_replicates", "block_size", "budget",
                              "report_every", "x0", "bootstrap", "naive") if k in cfg}
    if "probes" in cfg:
        kw["probes"] = tuple(float(p) for p in cfg["probes"])
    return montecarlo.EnsembleConfig(
        trials=cfg.get("trials", 10_000), horizon=cfg.get("horizon", 200), a=cfg["a"],
        model=model, strategy=cfg.get("strategy", {"kind": "linear_memoryless", "d": "optimal"}),
        base_seed=cfg.get("seed", 0), threads=args.threads, **kw)


def cmd_simulate(cfg, args, out):
    ec = _ensemble_config(cfg, args)
    rep = montecarlo.run_ensemble(ec)
    rep.write(out, every=ec.report_every)
    if args.summary:
        print_table([("verdict", rep.verdict),
                     ("second_moment_rate", rep.second_moment_rate[0]),
                     ("rate_ci_lo", rep.second_moment_rate[1]),
                     ("rate_ci_hi", rep.second_moment_rate[2])])
    return EXIT_OK


def cmd_sweep(cfg, args, out):
    model = _model(cfg)
    strategy = cfg.get("strategy", {"kind": "linear_memoryless", "d": "optimal"})
    lo, hi = cfg.get("a_lo", 1.3), cfg.get("a_hi", 1.5)
    check_positive(lo, "a_lo")
    check_positive(hi, "a_hi")
    if not lo < hi:
        raise ConfigError("sweep: need a_lo < a_hi")
    width = check_positive(cfg.get("width", 0.01), "width")

    def make(a):
        return montecarlo.EnsembleConfig(
            trials=cfg.get("trials", 100_000), horizon=cfg.get("horizon", 200), a=a, model=model,
            strategy=strategy, base_seed=cfg.get("seed", 0), naive=False, threads=args.threads,
            smc_replicates=cfg.get("smc_replicates", 8))

    make(lo).build_strategy()
    b_lo, b_hi, hist = montecarlo.bisect_transition(make, lo, hi, width)
    write_csv(os.path.join(out, "sweep.csv"), ["a", "second_moment_rate"], hist)
    write_json(os.path.join(out, "summary.json"), {"bracket": [b_lo, b_hi], "evaluations": len(hist)})
    if args.summary:
        print_table([("bracket_lo", b_lo), ("bracket_hi", b_hi)])
    return EXIT_OK


def cmd_verify(cfg, args, out):
    sigmas = cfg.get("sigmas")
    certs = analysis.run_certificates(sigmas=sigmas, fd_step=cfg.get("fd_step", 1e-4))
    header = ["name", "params", "value", "error", "passed"]
    rows = [(c.name, c.params, c.value, c.error, c.passed) for c in certs]
    write_csv(os.path.join(out, "certificates.csv"), header, rows)
    failed = [f"{c.name}[{c.params}]" for c in certs if not c.passed]
    write_json(os.path.join(out, "summary.json"), {"certificates": len(certs), "failed": failed})
    if args.summary:
        print_table([header] + rows)
    if failed:
        sys.stderr.write("CERTIFICATE FAILED: " + ", ".join(failed) + "\n")
        return EXIT_FAILED
    return EXIT_OK


def _constants(block):
    block = block or {}
    check_keys(block, {"c1", "c2", "c3", "delta", "T"}, "constants")
    return converse.ConverseConstants(**block)


def cmd_converse(cfg, args, out):
    model = _model(cfg)
    consts = _constants(cfg.get("constants"))
    a = cfg.get("a", 1.0)
    check_positive(a, "a")
    strat = strategy_from_config(cfg.get("strategy", {"kind": "linear_memoryless", "d": "optimal"}), a, model)
    if a != 1.0:
        strat = ScaledStrategy(strat, a)
    horizon = check_int(cfg.get("horizon", 100), "horizon", 1)
    trials = check_int(cfg.get("trials", 10_000), "trials", 2)
    seed = cfg.get("seed", 0)
    probe = cfg.get("probe", {})
    check_keys(probe, PROBE_KEYS, "probe")

    ens = converse.run_genie_ensemble(model, strat, horizon, trials, seed, consts)
    viol = ens.violations()
    psi = converse.psilem_check(ens)
    kn = converse.kn_growth(ens)
    converse.write_trace_csv(ens.traces[0], os.path.join(out, "trace_0.csv"))
    write_csv(os.path.join(out, "psilem.csv"), ["n", "mean_exp_psi"],
              list(enumerate(psi.means)))
    write_csv(os.path.join(out, "kn_exceedance.csv"), ["C", *[f"n={m}" for m in kn.checkpoints]],
              [(c, *p) for c, p in kn.exceedance.items()])

    # instability probe at a = 2^(C+1) with the strongest implemented strategy
    C = kn.c_vanishing if math.isfinite(kn.c_vanishing) else kn.slope + 2.0
    pa = probe.get("a", "auto")
    pa = 2.0 ** (C + 1.0) if pa == "auto" else check_positive(pa, "probe.a")
    p_strategy = probe.get("strategy")
    if p_strategy is None:
        if model.kind != "gaussian_mean_one":
            raise ConfigError("probe: give a strategy for non mean-one models")
        eps = analysis.search_epsilon(model, pa, "mean_one").eps
        p_strat = TwoStepMeanOne(eps, pa, model.sigma)
    else:
        p_strat = strategy_from_config(p_strategy, pa, model)
    Ms = [float(m) for m in probe.get("M", [1.0, 10.0])]
    p_h = check_int(probe.get("horizon", horizon), "probe.horizon", 1)
    probs = converse.instability_probe(pa, Ms, p_strat, model, p_h,
                                       check_int(probe.get("trials", trials), "probe.trials", 1),
                                       probe.get("seed", seed))
    write_csv(os.path.join(out, "instability_probe.csv"), ["n", *[f"p_M={m:g}" for m in Ms]],
              [(n, *probs[:, n]) for n in range(1, p_h + 1)])

    invariants_ok = not any(viol.values())
    write_json(os.path.join(out, "summary.json"), {
        "constants": consts.to_config(), "violations": viol,
        "captured": sum(t.captured for t in ens.traces),
        "psilem": {"running_max": psi.running_max, "tail_rise": psi.tail_rise,
                   "tail_se": psi.tail_se, "slope": psi.slope, "ci": psi.ci,
                   "cap": psi.cap, "passed": psi.passed},
        "kn": {"slope": kn.slope, "c_vanishing": kn.c_vanishing},
        "probe": {"a": pa, "M": Ms, "final": probs[:, -1]},
        "growth_condition_margin": model.growth_condition_margin(consts.c1, consts.c2)})
    if args.summary:
        print_table([("invariants_ok", invariants_ok), ("psilem_passed", psi.passed),
                     ("psilem_running_max", psi.running_max), ("kn_slope", kn.slope),
                     ("c_vanishing", kn.c_vanishing), ("probe_a", pa)])
    return EXIT_OK if invariants_ok and psi.passed else EXIT_FAILED


def cmd_clt(cfg, args, out):
    model = _model(cfg)
    tg = analysis.optimize_tightness_gain(model)
    d = cfg.get("d", "optimal")
    d = tg.d_dagger if d == "optimal" else check_positive(d, "d", allow_zero=True)
    a = cfg.get("a", "a_dagger")
    if a == "a_dagger":
        a = math.exp(-analysis.expected_log_gap(model, d)) if d else 1.0
    check_positive(a, "a")
    horizons = tuple(int(h) for h in cfg.get("horizons", (100, 1000, 10000)))
    res = montecarlo.clt_statistics(a, model, d, horizons, check_int(cfg.get("trials", 2000), "trials", 2),
                                    cfg.get("seed", 0), cfg.get("calibration", 1_000_000))
    quad = analysis.expected_log_gap(model, d) if d else 0.0
    rows = [(n, res.pvalues[n], res.exceed_quarter[n]) for n in horizons]
    write_csv(os.path.join(out, "clt.csv"), ["n", "ks_pvalue", "p_log_abs_above_n_quarter"], rows)
    write_json(os.path.join(out, "summary.json"), {
        "a": a, "d": d, "mu": res.mu, "sigma": res.sigma, "mu_se": res.mu_se,
        "mu_quadrature": quad})
    if args.summary:
        print_table([("n", "ks_pvalue", "p_above")] + rows)
    return EXIT_OK


COMMANDS = {"thresholds": cmd_thresholds, "simulate": cmd_simulate, "sweep": cmd_sweep,
            "verify": cmd_verify, "converse": cmd_converse, "clt": cmd_clt}


def load_config(path, command, seed=None):
    cfg = {}
    if path:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    check_keys(cfg, COMMAND_KEYS[command], command)
    if seed is not None:
        if "seed" not in COMMAND_KEYS[command]:
            raise ConfigError(f"{command} takes no seed")
        cfg["seed"] = seed
    if "model" in cfg:
        NoiseModel.from_config(cfg["model"])
    return cfg


def build_parser():
    p = _Parser(prog="mulnoise", description="Control under multiplicative observation noise.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", metavar="PATH")
        s.add_argument("--seed", type=int)
        s.add_argument("--out", default="runs", metavar="DIR")
        s.add_argument("--threads", type=int)
        s.add_argument("--summary", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.threads is not None and args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = load_config(args.config, args.command, args.seed)
        out = run_dir(args.out, args.command, cfg)
        code = COMMANDS[args.command](cfg, args, out)
    except (ConfigError, TypeError, ValueError) as exc:
        sys.stderr.write(f"mulnoise: error: {exc}\n")
        return EXIT_USAGE
    print(out)
    return code


if __name__ == "__main__":
    sys.exit(main())
