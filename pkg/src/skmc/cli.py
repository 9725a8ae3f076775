"""Batch front-end: config parsing, run dispatch, diagnostics and reports.

Configuration is a sectioned key-value file (INI). Every key is checked
against the schema; unknown keys or sections are hard errors so typos never
pass silently. Command-line --set section.key=value flags override any
config entry. Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import os
import sys
import time
from dataclasses import dataclass, field, asdict

import numpy as np

from . import diagnostics as diag
from . import network as net_mod
from . import pfilter as pf
from . import sampler as samp
from . import simulate as sim
from ._backend import backend_name
from .bridge import BridgeKind
from .lna import FilterError, LnaIntegrationError, forward_filter


class ValidationError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run specification

@dataclass
class RunSpec:
    model: str
    kind: str
    data_path: str = None
    data_x0: tuple = None
    synth_c_true: tuple = None
    synth_x0: tuple = None
    synth_times: tuple = None
    synth_generator: str = None
    synth_seed: int = 0
    observe: tuple = ("all",)
    noise: str = "constant"
    obs_sigma: float = 1.0
    prior_mean: tuple = None
    prior_sd: tuple = None
    proposal: str = "rwm"
    iters: int = 10000
    lam: float = 0.5
    rho: float = 0.0
    particles: int = 50
    delayed_acceptance: bool = False
    seed: int = 1
    init: tuple = None              # None = prior mean
    fix: tuple = ()
    sigma_t: tuple = None
    mjp_block: int = None
    surrogate_only: bool = False
    bridge: str = "myopic"
    bridge_ode: str = "iter"
    dt: float = 0.1
    filter_replicates: int = 100
    filter_at: tuple = None         # None = synthesis truth, else explicit c
    out_dir: str = "skmc_out"


_SCHEMA = {
    "model": {"model": str, "kind": str},
    "data": {"path": str, "x0": "floats"},
    "synthesis": {"c_true": "floats", "x0": "floats", "times": "times",
                  "generator": str, "seed": int},
    "obs": {"observe": "words", "noise": str, "sigma": float},
    "prior": {"mean": "floats", "sd": "floats"},
    "chain": {"proposal": str, "iters": int, "lambda": float, "rho": float,
              "particles": int, "delayed_acceptance": "bool", "seed": int,
              "init": "init", "fix": "words", "sigma_t": "floats",
              "mjp_block": int, "surrogate_only": "bool"},
    "bridge": {"bridge": str, "bridge_ode": str, "dt": float},
    "filter": {"replicates": int, "at": "floats"},
    "output": {"dir": str},
}


def _parse_times(text):
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError("times range must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop <= start:
            raise ValidationError("times range must increase")
        n = int(round((stop - start) / step))
        return tuple(start + k * step for k in range(n + 1))
    return tuple(float(v) for v in text.split())


def _coerce(kind, text, where):
    try:
        if kind is str:
            return text.strip()
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if kind == "bool":
            low = text.strip().lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        if kind == "floats":
            return tuple(float(v) for v in text.split())
        if kind == "words":
            return tuple(text.split())
        if kind == "times":
            return _parse_times(text)
        if kind == "init":
            if text.strip() == "prior_mean":
                return None
            return tuple(float(v) for v in text.split())
    except ValidationError:
        raise
    except ValueError:
        raise ValidationError(f"cannot parse value for {where}: {text!r}") from None
    raise ValidationError(f"unknown schema kind for {where}")


_KEY_TO_FIELD = {
    ("model", "model"): "model", ("model", "kind"): "kind",
    ("data", "path"): "data_path", ("data", "x0"): "data_x0",
    ("synthesis", "c_true"): "synth_c_true", ("synthesis", "x0"): "synth_x0",
    ("synthesis", "times"): "synth_times",
    ("synthesis", "generator"): "synth_generator",
    ("synthesis", "seed"): "synth_seed",
    ("obs", "observe"): "observe", ("obs", "noise"): "noise",
    ("obs", "sigma"): "obs_sigma",
    ("prior", "mean"): "prior_mean", ("prior", "sd"): "prior_sd",
    ("chain", "proposal"): "proposal", ("chain", "iters"): "iters",
    ("chain", "lambda"): "lam", ("chain", "rho"): "rho",
    ("chain", "particles"): "particles",
    ("chain", "delayed_acceptance"): "delayed_acceptance",
    ("chain", "seed"): "seed", ("chain", "init"): "init",
    ("chain", "fix"): "fix", ("chain", "sigma_t"): "sigma_t",
    ("chain", "mjp_block"): "mjp_block",
    ("chain", "surrogate_only"): "surrogate_only",
    ("bridge", "bridge"): "bridge", ("bridge", "bridge_ode"): "bridge_ode",
    ("bridge", "dt"): "dt",
    ("filter", "replicates"): "filter_replicates", ("filter", "at"): "filter_at",
    ("output", "dir"): "out_dir",
}


def parse_config_text(text, overrides=()):
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"malformed config: {exc}") from None
    values = {}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ValidationError(f"unknown section [{section}]")
        for key, raw in cp[section].items():
            if key not in _SCHEMA[section]:
                raise ValidationError(f"unknown key {key!r} in [{section}]")
            values[(section, key)] = raw
    for item in overrides:
        if "=" not in item:
            raise ValidationError(f"--set needs section.key=value, got {item!r}")
        addr, raw = item.split("=", 1)
        if "." not in addr:
            raise ValidationError(f"--set needs section.key=value, got {item!r}")
        section, key = addr.split(".", 1)
        if section not in _SCHEMA or key not in _SCHEMA[section]:
            raise ValidationError(f"unknown override {addr!r}")
        values[(section, key)] = raw
    kwargs = {}
    for (section, key), raw in values.items():
        kwargs[_KEY_TO_FIELD[(section, key)]] = _coerce(
            _SCHEMA[section][key], raw, f"[{section}] {key}")
    if "model" not in kwargs or "kind" not in kwargs:
        raise ValidationError("the [model] section needs both model and kind")
    spec = RunSpec(**kwargs)
    validate_spec(spec)
    return spec


def parse_config(path, overrides=()):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ValidationError(f"cannot read config: {exc}") from None
    return parse_config_text(text, overrides)


def emit_config(spec):
    """Inverse of parse_config_text (round-trips exactly)."""
    out = io.StringIO()
    defaults = RunSpec(model=spec.model, kind=spec.kind)

    def fmt(value, kind):
        if kind == "bool":
            return "true" if value else "false"
        if kind in ("floats", "times"):
            return " ".join(repr(float(v)) for v in value)
        if kind == "words":
            return " ".join(value)
        if kind == "init":
            return "prior_mean" if value is None else " ".join(
                repr(float(v)) for v in value)
        return str(value)

    for section, keys in _SCHEMA.items():
        lines = []
        for key, kind in keys.items():
            fieldname = _KEY_TO_FIELD[(section, key)]
            value = getattr(spec, fieldname)
            if fieldname in ("model", "kind") or value != getattr(defaults, fieldname):
                if value is None and fieldname != "init":
                    continue
                if fieldname == "init":
                    if value is None and getattr(defaults, "init") is None:
                        continue
                lines.append(f"{key} = {fmt(value, kind)}")
        if lines:
            out.write(f"[{section}]\n")
            out.write("\n".join(lines) + "\n\n")
    return out.getvalue()


def validate_spec(spec):
    if spec.kind not in ("mjp", "cle"):
        raise ValidationError("kind must be mjp or cle")
    if (spec.data_path is None) == (spec.synth_times is None):
        raise ValidationError("exactly one of [data] path / [synthesis] required")
    if not (0.0 <= spec.rho <= 1.0):
        raise ValidationError("rho must lie in [0, 1]")
    if spec.lam < 0:
        raise ValidationError("lambda must be non-negative")
    if spec.iters < 1 or spec.particles < 1:
        raise ValidationError("iters and particles must be positive")
    if spec.proposal not in samp.PROPOSALS:
        raise ValidationError(f"proposal must be one of {samp.PROPOSALS}")
    if spec.noise not in ("constant", "proportional", "exact"):
        raise ValidationError("noise must be constant, proportional or exact")
    try:
        bk = BridgeKind(spec.bridge, spec.bridge_ode, spec.dt)
        bk.validate_model(spec.kind)
    except ValueError as exc:
        raise ValidationError(str(exc)) from None
    if spec.noise == "exact" and spec.kind == "cle":
        raise ValidationError("exact observation requires the MJP model")
    if spec.prior_sd is not None and any(sd <= 0 for sd in spec.prior_sd):
        raise ValidationError("prior sds must be positive")
    if spec.synth_times is not None and len(spec.synth_times) < 2:
        raise ValidationError("need at least two observation times")


# ---------------------------------------------------------------------------
# builders

def build_network(spec):
    if spec.model in net_mod.BUILTIN_IDS:
        return net_mod.builtin(spec.model)
    if not os.path.exists(spec.model):
        raise ValidationError(f"model {spec.model!r} is neither a built-in id "
                              f"nor a file")
    net = net_mod.parse_model_file(spec.model)
    return net, None, None


def build_observation_model(spec, net):
    names = list(net.species_names)
    s = len(names)
    if spec.observe == ("all",):
        idx = list(range(s))
    else:
        try:
            idx = [names.index(w) for w in spec.observe]
        except ValueError as exc:
            raise ValidationError(f"unknown observed species: {exc}") from None
    P = np.zeros((s, len(idx)))
    for j, i in enumerate(idx):
        P[i, j] = 1.0
    if spec.noise == "exact":
        if len(idx) != s:
            raise ValidationError("exact observation requires observing all "
                                  "species")
        return sim.ObservationModel.exact(s)
    if spec.noise == "proportional":
        if len(idx) != 1:
            raise ValidationError("proportional noise requires exactly one "
                                  "observed species")
        return sim.ObservationModel.proportional(P, spec.obs_sigma)
    return sim.ObservationModel.constant(
        P, spec.obs_sigma ** 2 * np.eye(len(idx)))


def build_dataset(spec, net, defaults_c=None, defaults_x0=None):
    obs = build_observation_model(spec, net)
    if spec.data_path is not None:
        if spec.data_path == "eyam":
            if net.n_species != 2:
                raise ValidationError("the eyam dataset needs a two-species "
                                      "model")
            return sim.eyam_dataset()
        if spec.data_x0 is None:
            raise ValidationError("[data] x0 is required with a dataset path")
        return sim.Dataset.from_csv(spec.data_path, obs,
                                    x0=np.asarray(spec.data_x0, dtype=float))
    c_true = spec.synth_c_true if spec.synth_c_true is not None else defaults_c
    x0 = spec.synth_x0 if spec.synth_x0 is not None else defaults_x0
    if c_true is None or x0 is None:
        raise ValidationError("[synthesis] needs c_true and x0 (no defaults "
                              "for this model)")
    gen = spec.synth_generator or spec.kind
    rng = np.random.default_rng(spec.synth_seed)
    return sim.synthesize_dataset(net, np.asarray(c_true, dtype=float),
                                  np.asarray(x0, dtype=float),
                                  np.asarray(spec.synth_times, dtype=float),
                                  obs, rng, generator=gen, dt=spec.dt)


def build_chain_config(spec, net):
    r = net.n_reactions
    free = np.ones(r, dtype=bool)
    for name in spec.fix:
        if name not in net.rate_names:
            raise ValidationError(f"cannot fix unknown rate {name!r}")
        free[net.rate_names.index(name)] = False
    k = int(free.sum())
    Sigma_T = None
    if spec.sigma_t is not None:
        if len(spec.sigma_t) != k * k:
            raise ValidationError("sigma_t needs k*k entries over the free "
                                  "components")
        Sigma_T = np.asarray(spec.sigma_t, dtype=float).reshape(k, k)
    prior_mean = (np.zeros(r) if spec.prior_mean is None
                  else np.asarray(spec.prior_mean, dtype=float))
    prior_sd = (np.full(r, 10.0) if spec.prior_sd is None
                else np.asarray(spec.prior_sd, dtype=float))
    if prior_mean.shape != (r,) or prior_sd.shape != (r,):
        raise ValidationError("prior mean/sd must have one entry per rate")
    init = None if spec.init is None else np.asarray(spec.init, dtype=float)
    if init is not None and init.shape != (r,):
        raise ValidationError("init must have one entry per rate constant")
    return samp.ChainConfig(
        n_iters=spec.iters, proposal=spec.proposal, lam=spec.lam,
        Sigma_T=Sigma_T, rho=spec.rho, N=spec.particles,
        delayed_acceptance=spec.delayed_acceptance, seed=spec.seed,
        bridge=BridgeKind(spec.bridge, spec.bridge_ode, spec.dt),
        prior_mean=prior_mean, prior_sd=prior_sd, init_log_c=init,
        free_mask=free, mjp_block=spec.mjp_block,
        surrogate_only=spec.surrogate_only)


# ---------------------------------------------------------------------------
# outputs

def write_chain_csv(path, result):
    n, r = result.log_c.shape
    with open(path, "w") as fh:
        cols = ["iter"] + [f"log_c_{j + 1}" for j in range(r)]
        cols += ["log_phat", "log_plna", "stage1_accept", "stage2_accept"]
        fh.write(",".join(cols) + "\n")
        for i in range(n):
            row = [str(i + 1)]
            row += [repr(v) for v in result.log_c[i]]
            row += [repr(float(result.log_phat[i])),
                    repr(float(result.log_plna[i])),
                    str(int(result.stage1_accept[i])),
                    str(int(result.stage2_accept[i]))]
            fh.write(",".join(row) + "\n")


def read_chain_csv(path):
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        data = np.loadtxt(fh, delimiter=",")
    data = np.atleast_2d(data)
    r = sum(1 for h in header if h.startswith("log_c_"))
    return {
        "log_c": data[:, 1:1 + r],
        "log_phat": data[:, 1 + r],
        "log_plna": data[:, 2 + r],
        "stage1_accept": data[:, 3 + r].astype(int),
        "stage2_accept": data[:, 4 + r].astype(int),
    }


def write_summary(path, result, spec):
    summary = {
        "acceptance": {k: result.diagnostics[k]
                       for k in ("alpha1", "alpha2_given_1", "alpha")},
        "cpu_seconds": result.diagnostics["cpu_seconds"],
        "iterations": result.diagnostics["iterations"],
        "mala_fallbacks": result.diagnostics["mala_fallbacks"],
        "numerical_rejects": result.diagnostics["numerical_rejects"],
        "backend": result.diagnostics["backend"],
        "aux_dimension": result.diagnostics["aux_dimension"],
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in asdict_spec(spec).items()},
    }
    with open(path, "w") as fh:
        json.dump(summary, fh, indent=2, default=float)
        fh.write("\n")


def asdict_spec(spec):
    return {k: v for k, v in asdict(spec).items()}


def write_histograms(out_dir, log_c, rate_names):
    paths = []
    for j, name in enumerate(rate_names):
        col = log_c[:, j]
        if np.ptp(col) == 0.0:
            continue
        edges, counts = diag.histogram_data(col)
        path = os.path.join(out_dir, f"hist_log_{name}.csv")
        with open(path, "w") as fh:
            fh.write("bin_left,bin_right,count\n")
            for k in range(len(counts)):
                fh.write(f"{edges[k]!r},{edges[k + 1]!r},{counts[k]}\n")
        paths.append(path)
    return paths


def report(run_dirs, out=sys.stdout):
    """Summary table across stored runs; pure function of the chain files."""
    rows = []
    for d in run_dirs:
        chain = read_chain_csv(os.path.join(d, "chain.csv"))
        with open(os.path.join(d, "summary.json")) as fh:
            summary = json.load(fh)
        stats = diag.summarize_chain(chain["log_c"], summary["cpu_seconds"])
        rows.append({
            "run": os.path.basename(os.path.normpath(d)),
            "N": summary["config"]["particles"],
            "alpha1": summary["acceptance"]["alpha1"],
            "alpha2_given_1": summary["acceptance"]["alpha2_given_1"],
            "alpha": summary["acceptance"]["alpha"],
            "cpu_s": summary["cpu_seconds"],
            "mess": stats["mess"],
            "mess_per_s": stats["mess_per_second"],
        })
    worst = min(row["mess_per_s"] for row in rows)
    for row in rows:
        row["rel"] = row["mess_per_s"] / worst if worst > 0 else float("nan")
    header = (f"{'run':<24}{'N':>6}{'a1':>8}{'a2|1':>8}{'a':>8}"
              f"{'CPU(s)':>10}{'mESS':>10}{'mESS/s':>10}{'Rel.':>8}")
    out.write(header + "\n")
    for row in rows:
        def _f(v, w):
            return f"{v:>{w}.3g}" if isinstance(v, float) and np.isfinite(v) else f"{'--':>{w}}"
        out.write(f"{row['run']:<24}{row['N']:>6}"
                  + _f(row["alpha1"], 8) + _f(row["alpha2_given_1"], 8)
                  + _f(row["alpha"], 8) + _f(row["cpu_s"], 10)
                  + _f(row["mess"], 10) + _f(row["mess_per_s"], 10)
                  + _f(row["rel"], 8) + "\n")
    return rows


# ---------------------------------------------------------------------------
# subcommands

def _prepare(spec):
    net, def_c, def_x0 = build_network(spec)
    data = build_dataset(spec, net, def_c, def_x0)
    return net, data


def cmd_simulate(spec):
    if spec.synth_times is None:
        raise ValidationError("simulate needs a [synthesis] block")
    net, data = _prepare(spec)
    os.makedirs(spec.out_dir, exist_ok=True)
    out = os.path.join(spec.out_dir, "dataset.csv")
    data.to_csv(out)
    if data.latent_states is not None:
        lat = os.path.join(spec.out_dir, "latent.csv")
        with open(lat, "w") as fh:
            fh.write("time," + ",".join(net.species_names) + "\n")
            for t, x in zip(data.times, data.latent_states):
                fh.write(",".join([repr(float(t))] + [repr(float(v)) for v in x]) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_filter(spec):
    net, data = _prepare(spec)
    cfg = build_chain_config(spec, net)
    if spec.filter_at is not None:
        c = np.asarray(spec.filter_at, dtype=float)
    elif spec.synth_c_true is not None:
        c = np.asarray(spec.synth_c_true, dtype=float)
    else:
        c = np.exp(cfg.prior_mean if cfg.init_log_c is None else cfg.init_log_c)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "cle":
        layout = pf.ULayout.for_cle(data.times, spec.dt, spec.particles,
                                    net.n_species)
    else:
        block = spec.mjp_block or pf.estimate_mjp_block(net, c, data, rng)
        layout = pf.ULayout.for_mjp(data.n_intervals, spec.particles, block)
    bk = BridgeKind(spec.bridge, spec.bridge_ode, spec.dt)
    fo = None
    if bk.kind != "myopic":
        fo = forward_filter(net, c, data, mode="eta_G_V", dense_dt=spec.dt)
    reps = []
    for _ in range(spec.filter_replicates):
        u = pf.AuxiliaryVariables.fresh(layout, rng)
        reps.append(pf.run_filter(net, c, data, spec.particles, bk, u,
                                  spec.kind, filter_out=fo))
    reps = np.asarray(reps)
    finite = reps[np.isfinite(reps)]
    os.makedirs(spec.out_dir, exist_ok=True)
    out = os.path.join(spec.out_dir, "filter_replicates.csv")
    with open(out, "w") as fh:
        fh.write("replicate,log_phat\n")
        for i, v in enumerate(reps):
            fh.write(f"{i + 1},{v!r}\n")
    mean = float(finite.mean()) if len(finite) else float("nan")
    var = float(finite.var(ddof=1)) if len(finite) > 1 else float("nan")
    print(f"log_phat over {len(reps)} replicates at c={list(c)}: "
          f"mean {mean:.4f}, variance {var:.4f}, "
          f"zero-weight runs {int((~np.isfinite(reps)).sum())}")
    return 0


def cmd_sample(spec):
    net, data = _prepare(spec)
    cfg = build_chain_config(spec, net)
    try:
        result = samp.run_chain(cfg, net, data, spec.kind)
    except (FilterError, LnaIntegrationError, RuntimeError) as exc:
        raise NumericalFailure(str(exc)) from exc
    os.makedirs(spec.out_dir, exist_ok=True)
    write_chain_csv(os.path.join(spec.out_dir, "chain.csv"), result)
    write_summary(os.path.join(spec.out_dir, "summary.json"), result, spec)
    write_histograms(spec.out_dir, result.log_c, net.rate_names)
    d = result.diagnostics
    print(f"sample: {cfg.n_iters} iterations in {d['cpu_seconds']:.2f}s "
          f"({backend_name()} backend), alpha={d['alpha']:.3f}"
          + (f", alpha1={d['alpha1']:.3f}, alpha2|1={d['alpha2_given_1']:.3f}"
             if cfg.delayed_acceptance else ""))
    print(f"outputs in {spec.out_dir}")
    return 0


def cmd_tune(spec):
    net, data = _prepare(spec)
    cfg = build_chain_config(spec, net)
    try:
        pilot = samp.run_chain(cfg, net, data, spec.kind)
        c_central = np.exp(np.median(pilot.log_c, axis=0))
        ratio_var = samp.measure_ratio_variance(
            net, c_central, data, cfg.N, cfg.bridge, spec.kind, cfg.rho,
            n_pairs=50, rng=np.random.default_rng(spec.seed + 2),
            mjp_block=spec.mjp_block)
        rec = samp.tune(pilot, ratio_log_variance=ratio_var)
    except (FilterError, LnaIntegrationError, RuntimeError) as exc:
        raise NumericalFailure(str(exc)) from exc
    os.makedirs(spec.out_dir, exist_ok=True)
    payload = {
        "Sigma_T": rec.Sigma_T.tolist(),
        "lambda": rec.lam,
        "N": rec.N,
        "rho": rec.rho,
        "measurements": rec.measurements,
    }
    with open(os.path.join(spec.out_dir, "tune.json"), "w") as fh:
        json.dump(payload, fh, indent=2, default=float)
        fh.write("\n")
    print(json.dumps(payload, indent=2, default=float))
    return 0


def cmd_report(run_dirs):
    report(run_dirs)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="skmc",
        description="Bayesian rate-constant inference for stochastic kinetic "
                    "models via surrogate-accelerated particle MCMC")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in [
            ("simulate", "synthesize a dataset"),
            ("filter", "replicate likelihood estimates at fixed c"),
            ("sample", "run the MCMC chain"),
            ("tune", "pilot run plus tuning recommendations")]:
        p = sub.add_parser(name, help=helptext)
        p.add_argument("config", help="path to the run configuration")
        p.add_argument("--set", action="append", default=[],
                       metavar="section.key=value",
                       help="override any config key")
    p = sub.add_parser("report", help="summarize stored runs")
    p.add_argument("runs", nargs="+", help="run output directories")
    args = parser.parse_args(argv)

    try:
        if args.command == "report":
            return cmd_report(args.runs)
        spec = parse_config(args.config, args.set)
        return {"simulate": cmd_simulate, "filter": cmd_filter,
                "sample": cmd_sample, "tune": cmd_tune}[args.command](spec)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return 2
    except (NumericalFailure, FilterError, LnaIntegrationError,
            sim.SimulationExplosion) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
