"""Command line front end.

Verbs:
    run             execute a scenario and write report/CSV/figure artifacts
    list-scenarios  show the bundled scenario library
    describe        explain a check or quantity (definition, formula, source)
    export          simulate a scenario's ensemble and dump it (binary/CSV)

Exit codes:
    0   run completed and every check verdict matched its expectation
    2   run completed but some verdict diverged from the expectation
    3   run completed with an inconclusive verdict (cannot adjudicate)
    64  configuration or usage error (bad flags, bad YAML, unknown scenario)
    70  runtime failure (trajectory blow-up, step-count refusal, internal error)
"""

from __future__ import annotations

import argparse
import os
import sys
from typing import Optional

EX_OK = 0
EX_CHECK_MISMATCH = 2
EX_INCONCLUSIVE = 3
EX_CONFIG = 64
EX_RUNTIME = 70

_THREAD_ENV = "NELSONLAB_THREADS"


def resolve_threads(flag_value: Optional[int]) -> int:
    """Thread count: --threads flag beats NELSONLAB_THREADS beats 1."""
    if flag_value is not None:
        if flag_value < 1:
            raise ValueError("--threads must be >= 1")
        return int(flag_value)
    env = os.environ.get(_THREAD_ENV, "").strip()
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ValueError(f"{_THREAD_ENV}={env!r} is not an integer")
        if n < 1:
            raise ValueError(f"{_THREAD_ENV} must be >= 1")
        return n
    return 1


def _apply_threads(n: int) -> None:
    # Best effort: honored by BLAS pools not yet initialized. Recorded in the
    # manifest either way so a run documents what it asked for.
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


DESCRIPTIONS = {
    "forward_derivative": (
        "Forward stochastic derivative",
        "D+X(t) = lim_{h->0+} E[(X(t+h) - X(t))/h | X(t)]; for dX = b dt + sigma dW "
        "it equals the drift, D+X = b(X).",
        "E. Nelson, Dynamical Theories of Brownian Motion, Princeton (1967).",
    ),
    "backward_derivative": (
        "Backward stochastic derivative",
        "D-X(t) = lim_{h->0+} E[(X(t) - X(t-h))/h | X(t)] = b(X) - sigma^2 grad log p(t, X), "
        "with p the time-t density.",
        "E. Nelson, Dynamical Theories of Brownian Motion, Princeton (1967); "
        "U. Haussmann and E. Pardoux, Ann. Probab. 14 (1986).",
    ),
    "second_order": (
        "Second-order (iterated) derivatives",
        "D+^2 X = (db) b + (sigma^2/2) Lap b; D-^2 X = dt g + (dg) g - (sigma^2/2) Lap g "
        "with g = b - sigma^2 grad log p the backward drift.",
        "E. Nelson, Phys. Rev. 150, 1079 (1966).",
    ),
    "complex_derivative": (
        "Complex mean derivative",
        "Scalar sigma makes D = (D+ + D-)/2 - i (D+ - D-)/2 natural; its square has "
        "Re D^2 = (D+D- + D-D+)/2 and Im D^2 = (D+^2 - D-^2)/2. A gradient diffusion "
        "has Im D^2 = 0.",
        "E. Nelson, Phys. Rev. 150, 1079 (1966).",
    ),
    "stationarity": (
        "Stationarity criterion",
        "A stationary density makes the forward and backward drifts opposite: "
        "D+X = -D-X, equivalently 2 b = sigma^2 grad log p. The check reports "
        "sup |2b - sigma^2 grad log p| on the bulk (analytic mode) or a "
        "density-weighted RMS of the kernel-regression estimate D+hat + D-hat "
        "(empirical mode).",
        "E. Nelson, Dynamical Theories of Brownian Motion, Princeton (1967).",
    ),
    "divergence_identity": (
        "Divergence identity for the drift's rotational part",
        "(D-^2 - D+^2)^i = <grad log p, G_i> + div G_i with G = (db)^T - db the "
        "antisymmetric Jacobian part and G_i its i-th row. Both sides vanish "
        "exactly when the drift is a gradient.",
        "Follows from the forward/backward calculus of E. Nelson (1966, 1967).",
    ),
    "dynamic_gradient": (
        "Dynamic gradient classification",
        "D+^2 X = D-^2 X characterizes gradient drifts among smooth diffusions "
        "with a positive density: the second-order forward/backward gap vanishes "
        "iff curl b = 0. The check classifies the drift and cross-checks the "
        "static Jacobian-asymmetry test.",
        "E. Nelson, Phys. Rev. 150, 1079 (1966).",
    ),
    "reversibility": (
        "Detailed balance / time reversal",
        "A stationary gradient diffusion is reversible: (X_{T-t}) has the law of "
        "(X_t). The check compares paired path statistics (marginal moments, "
        "lag cross-moments, third-order asymmetry) between an ensemble and its "
        "time reversal; the residual is the largest standardized |z|.",
        "A. Kolmogorov, Zur Umkehrbarkeit der statistischen Naturgesetze, "
        "Math. Ann. 113 (1937); B. Anderson, Stoch. Proc. Appl. 12 (1982).",
    ),
    "newton": (
        "Newtonian embedding",
        "With the complex derivative, a gradient diffusion satisfies "
        "Im D^2 X = 0, and at stationarity Re D^2 X = -(db) b - (sigma^2/2) Lap b. "
        "The gated residual is the imaginary part; the real part is reported "
        "as a diagnostic against -grad U.",
        "E. Nelson, Phys. Rev. 150, 1079 (1966).",
    ),
    "girsanov_variation": (
        "Variation identity (Girsanov direction)",
        "d/d-eps E[phi(X^eps)] at eps=0 equals E[phi(X) sum_k <gamma(X_k), dW_k>] "
        "when the drift is perturbed to b + eps gamma under common noise "
        "(sigma = 1). The check compares a Richardson-extrapolated central "
        "difference against the noise functional on the same paths.",
        "I. Girsanov, Theory Probab. Appl. 5 (1960).",
    ),
    "fokker_planck": (
        "Density evolution",
        "dt p = -div(b p) + (sigma^2/2) Lap p, solved with a conservative "
        "first-order upwind flux and centered diffusion under an explicit "
        "stability bound on the step count.",
        "H. Risken, The Fokker-Planck Equation, Springer (1989).",
    ),
    "kernel_regression": (
        "Empirical derivative estimation",
        "Conditional expectations E[dX/h | X = x] are estimated by binned "
        "Nadaraya-Watson regression (linear binning plus a truncated Gaussian "
        "kernel); nodes with Kish effective sample size below the floor are "
        "masked out.",
        "E. Nadaraya (1964); G. Watson (1964); B. Silverman, Density Estimation "
        "(1986); L. Kish, Survey Sampling (1965).",
    ),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exit code is 2; keep 64 for usage
        self.print_usage(sys.stderr)
        self.exit(EX_CONFIG, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="nelsonlab",
                description="Forward/backward stochastic derivative laboratory for "
                            "Brownian diffusions.")
    sub = p.add_subparsers(dest="verb", required=True)

    def add_scenario_args(sp, with_run_flags=True):
        sp.add_argument("scenario", nargs="?", default=None,
                        help="bundled scenario name (see list-scenarios)")
        sp.add_argument("--config", default=None, metavar="FILE",
                        help="scenario YAML file (alternative to a bundled name)")
        sp.add_argument("--out", default=None, metavar="DIR",
                        help="output directory (default runs/<scenario>)")
        sp.add_argument("--seed-override", type=int, default=None, metavar="N",
                        help="replace the scenario seed")
        sp.add_argument("--threads", type=int, default=None, metavar="N",
                        help=f"worker threads (default: ${_THREAD_ENV} or 1)")
        if with_run_flags:
            sp.add_argument("--canonical-output", action="store_true",
                            help="byte-stable report.json/manifest.json "
                                 "(no timestamps or runtimes)")
            sp.add_argument("--no-figures", action="store_true",
                            help="skip PNG rendering")

    run_p = sub.add_parser("run", help="execute a scenario's checks")
    add_scenario_args(run_p)
    run_p.add_argument("--export-ensemble", action="store_true",
                       help="also write the simulated ensemble in the binary layout")

    sub.add_parser("list-scenarios", help="list bundled scenarios")

    d = sub.add_parser("describe", help="explain a check or quantity")
    d.add_argument("topic", nargs="?", default=None,
                   help="one of: " + ", ".join(sorted(DESCRIPTIONS)) + ", all")

    ex = sub.add_parser("export", help="simulate and dump the scenario ensemble")
    add_scenario_args(ex, with_run_flags=False)
    ex.add_argument("--format", choices=("binary", "csv", "both"), default="both",
                    help="ensemble output format (default both)")
    return p


def _load_config(args):
    from .config import ConfigError, load_bundled_scenario, load_scenario

    if (args.scenario is None) == (args.config is None):
        raise ConfigError("give exactly one of: a bundled scenario name, or --config FILE")
    if args.config is not None:
        cfg = load_scenario(args.config)
    else:
        # a path with a separator or .yaml suffix is a file, not a bundled name
        name = args.scenario
        if os.sep in name or name.endswith(".yaml"):
            cfg = load_scenario(name)
        else:
            cfg = load_bundled_scenario(name)
    if args.seed_override is not None:
        if args.seed_override < 0:
            raise ConfigError("--seed-override must be >= 0")
        cfg = cfg.with_seed(args.seed_override)
    return cfg


def _cmd_run(args) -> int:
    from .config import ConfigError
    from .export import export_run
    from .runner import RunnerError, run_scenario

    try:
        threads = resolve_threads(args.threads)
    except ValueError as err:
        print(f"nelsonlab: {err}", file=sys.stderr)
        return EX_CONFIG
    _apply_threads(threads)
    try:
        cfg = _load_config(args)
    except ConfigError as err:
        print(f"nelsonlab: config error: {err}", file=sys.stderr)
        return EX_CONFIG

    out_dir = args.out or os.path.join("runs", cfg.name)
    try:
        result = run_scenario(cfg)
    except (ConfigError, RunnerError) as err:
        print(f"nelsonlab: cannot run scenario: {err}", file=sys.stderr)
        return EX_CONFIG
    except Exception as err:  # noqa: BLE001 - report, then use the runtime exit code
        print(f"nelsonlab: runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EX_RUNTIME

    figures = cfg.figures and not args.no_figures
    files = export_run(result, out_dir, canonical=args.canonical_output,
                       figures=figures, threads=threads,
                       ensemble_binary=args.export_ensemble)

    print(f"scenario {cfg.name} (seed {cfg.seed})")
    for entry in result.expectations:
        status = "as expected" if entry["as_expected"] else "UNEXPECTED"
        print(f"  {entry['name']:<28s} verdict={entry['verdict']:<12s} "
              f"expected={entry['expect']:<5s} [{status}]")
    if result.error is not None:
        print(f"  aborted: {result.error}")
    print(f"wrote {len(files)} files to {out_dir}")
    return result.exit_code


def _cmd_list(_args) -> int:
    from .config import bundled_scenario_names, load_bundled_scenario

    names = bundled_scenario_names()
    if not names:
        print("no bundled scenarios")
        return EX_OK
    for name in names:
        cfg = load_bundled_scenario(name)
        checks = ", ".join(c.name for c in cfg.checks)
        print(f"{name:<28s} expect={cfg.expect:<5s} checks: {checks}")
        if cfg.description:
            print(f"{'':<28s} {cfg.description}")
    return EX_OK


def _cmd_describe(args) -> int:
    topic = args.topic
    if topic is None:
        print("topics:")
        for key in sorted(DESCRIPTIONS):
            print(f"  {key:<22s} {DESCRIPTIONS[key][0]}")
        print("  all")
        return EX_OK
    keys = sorted(DESCRIPTIONS) if topic == "all" else [topic]
    if topic != "all" and topic not in DESCRIPTIONS:
        print(f"nelsonlab: unknown topic {topic!r}; try one of: "
              + ", ".join(sorted(DESCRIPTIONS)), file=sys.stderr)
        return EX_CONFIG
    for i, key in enumerate(keys):
        title, formula, cite = DESCRIPTIONS[key]
        if i:
            print()
        print(f"{key}: {title}")
        print(f"  {formula}")
        print(f"  source: {cite}")
    return EX_OK


def _cmd_export(args) -> int:
    import numpy as np

    from .config import ConfigError
    from .export import write_density_csv, write_ensemble_summary_csv
    from .model import BlowUpError
    from .runner import RunnerError, build_grid, build_spec, derive_seed, run_scenario
    from .simulate import ensemble_to_binary, euler_maruyama

    try:
        threads = resolve_threads(args.threads)
    except ValueError as err:
        print(f"nelsonlab: {err}", file=sys.stderr)
        return EX_CONFIG
    _apply_threads(threads)
    try:
        cfg = _load_config(args)
        if cfg.ensemble is None:
            raise ConfigError("scenario has no ensemble section; nothing to export")
    except ConfigError as err:
        print(f"nelsonlab: config error: {err}", file=sys.stderr)
        return EX_CONFIG

    out_dir = args.out or os.path.join("runs", cfg.name)
    os.makedirs(out_dir, exist_ok=True)
    try:
        grid = build_grid(cfg)
        spec = build_spec(cfg, grid)
        ens = euler_maruyama(spec, int(cfg.ensemble["n_paths"]),
                             int(cfg.ensemble["n_steps"]),
                             derive_seed(cfg.seed, "ensemble"))
    except (ConfigError, RunnerError) as err:
        print(f"nelsonlab: cannot build scenario: {err}", file=sys.stderr)
        return EX_CONFIG
    except BlowUpError as err:
        print(f"nelsonlab: runtime failure: {err}", file=sys.stderr)
        return EX_RUNTIME

    written = []
    if args.format in ("binary", "both"):
        path = os.path.join(out_dir, "ensemble.nlb")
        ensemble_to_binary(ens, path)
        written.append(path)
    if args.format in ("csv", "both"):
        path = os.path.join(out_dir, "ensemble_summary.csv")
        write_ensemble_summary_csv(ens, path, every=max(1, ens.n_steps // 64))
        written.append(path)
    for path in written:
        print(f"wrote {path}")
    return EX_OK


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as e:   # argparse exits on usage errors and --help
        return int(e.code) if e.code else 0
    if args.verb == "run":
        return _cmd_run(args)
    if args.verb == "list-scenarios":
        return _cmd_list(args)
    if args.verb == "describe":
        return _cmd_describe(args)
    if args.verb == "export":
        return _cmd_export(args)
    return EX_CONFIG


def console_main() -> None:  # console_scripts entry point must sys.exit
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
