"""Command-line interface.

Subcommands: init (write a thermostat model bundle), validate (invariant
suite with a JSON report), solve (relative value iteration), simulate
(episode trace CSV), train, and pi-value (Monte Carlo path-integral
estimate). The ASC_ENUM_BUDGET environment variable overrides the
trajectory-enumeration budget everywhere.
"""

import argparse
import json
import sys

import numpy as np

from . import control, oracle, sim
from .model import (CompleteState, GenerativeModel, ModelSpec,
                    RecognitionModel, ReferenceModel, load_models, save_models)


def _parse_x0(raw):
    parts = [int(p) for p in raw.split(",")]
    if len(parts) != 6:
        raise argparse.ArgumentTypeError("x0 needs six comma-separated indices")
    return CompleteState(*parts)


def _parse_schedule(raw):
    return [int(p) for p in raw.split(",")]


def _apply_config(args, argv):
    """Fill run parameters from a JSON config; explicit flags win."""
    if not getattr(args, "config", None):
        return args
    with open(args.config) as fh:
        cfg = json.load(fh)
    for key, val in cfg.items():
        flag = "--" + key.replace("_", "-")
        if hasattr(args, key) and flag not in argv:
            setattr(args, key, val)
    return args


# ---------------------------------------------------------------------------
# subcommands


def cmd_init(args):
    env, ref = sim.thermostat_env(args.temps, args.schedule,
                                  heat_success=args.heat_success,
                                  phase_advance=args.phase_advance)
    gen, rec = sim.thermostat_agent(env, args.schedule, args.seed)
    save_models(args.out, gen, rec, ref)
    print(f"wrote thermostat model bundle to {args.out}")
    return 0


def cmd_validate(args):
    from .validate import run_validation

    report = run_validation(seed=args.seed, instances=args.instances)
    text = json.dumps(report, indent=2)
    if args.report:
        with open(args.report, "w") as fh:
            fh.write(text + "\n")
    else:
        print(text)
    for check in report["checks"]:
        status = "pass" if check["passed"] else "FAIL"
        print(f"{status}  {check['name']}  max_err={check['max_err']:.3e} "
              f"tol={check['tolerance']:.1e}", file=sys.stderr)
    return 0 if report["all_passed"] else 1


def cmd_solve(args):
    gen, rec, ref = load_models(args.model)
    value = control.relative_value_iteration(gen, rec, ref, tol=args.tol,
                                             max_iter=args.max_iter)
    value.save(args.out)
    print(f"gain {value.gain!r} nats/step; value written to {args.out}")
    return 0


def _build_env(args, spec):
    if args.env != "thermostat":
        raise SystemExit(f"unknown environment {args.env!r}")
    env, ref = sim.thermostat_env(args.temps, args.schedule,
                                  heat_success=args.heat_success,
                                  phase_advance=args.phase_advance)
    if env.spec != spec:
        raise SystemExit("model spec does not match the requested environment "
                         f"(model {spec.dims}, env {env.spec.dims})")
    return env, ref


def cmd_simulate(args):
    gen, rec, ref = load_models(args.model)
    env, _ = _build_env(args, gen.spec)
    trace = sim.run_episode(gen, rec, ref, env, args.steps, args.seed,
                            x0=args.x0)
    trace.to_csv(args.trace)
    rate = trace.rows[-1].running_rate
    print(f"episode of {args.steps} steps, final running rate {rate!r}; "
          f"trace written to {args.trace}")
    return 0


def cmd_train(args):
    gen, rec, ref = load_models(args.model)
    x0 = args.x0 or CompleteState(0, 0, 0, 0, 0, 0)
    report, gen2, rec2 = control.train(
        gen, rec, ref, x0, args.steps, iters=args.iters, lr=args.lr,
        seed=args.seed, estimator=args.estimator,
        trainable_policies=tuple(args.policies.split(",")) if args.policies else ("pol0",))
    save_models(args.out, gen2, rec2, ref)
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(report.to_dict(), fh, indent=2)
    print(f"trained {report.iterations} iterations: objective "
          f"{report.objective_trace[0]!r} -> {report.objective_trace[-1]!r}, "
          f"final rate {report.final_rate!r}")
    return 0


def cmd_pi_value(args):
    gen, rec, ref = load_models(args.model)
    x0 = args.x0 or CompleteState(0, 0, 0, 0, 0, 0)
    rate = args.rate
    if rate is None:
        rate = oracle.exact_average_rate(gen, rec, ref, x0, 64, 32,
                                         chain="generative")
    est, stderr = control.mc_path_integral_value(
        gen, rec, ref, x0, args.horizon, rate, mode=args.mode,
        n_rollouts=args.rollouts, seed=args.seed)
    print(json.dumps({"mode": args.mode, "rate": rate, "estimate": est,
                      "stderr": stderr, "rollouts": args.rollouts}))
    return 0


# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="ascontrol")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_env_opts(p):
        p.add_argument("--env", default="thermostat")
        p.add_argument("--temps", type=int, default=3)
        p.add_argument("--schedule", type=_parse_schedule, default=[0, 2])
        p.add_argument("--heat-success", type=float, default=0.85)
        p.add_argument("--phase-advance", type=float, default=0.1)

    p = sub.add_parser("init", help="write a thermostat model bundle")
    add_env_opts(p)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("validate", help="run the invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--report", default=None)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("solve", help="relative value iteration")
    p.add_argument("--model", required=True)
    p.add_argument("--tol", type=float, default=1e-8)
    p.add_argument("--max-iter", type=int, default=200_000)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="run one episode and write a CSV trace")
    p.add_argument("--model", required=True)
    add_env_opts(p)
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--trace", required=True)
    p.add_argument("--x0", type=_parse_x0, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="gradient training of the free logits")
    p.add_argument("--model", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--estimator", choices=("exact", "score"), default="exact")
    p.add_argument("--policies", default="pol0",
                   help="comma-separated trainable policy tables")
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--x0", type=_parse_x0, default=None)
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pi-value", help="Monte Carlo path-integral value")
    p.add_argument("--model", required=True)
    p.add_argument("--mode", choices=("feedforward", "feedback"),
                   default="feedforward")
    p.add_argument("--rollouts", type=int, default=1000)
    p.add_argument("--horizon", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rate", type=float, default=None)
    p.add_argument("--x0", type=_parse_x0, default=None)
    p.set_defaults(func=cmd_pi_value)

    return parser


def main(argv=None):
    if argv is None:
        argv = sys.argv[1:]
    parser = build_parser()
    args = parser.parse_args(argv)
    if hasattr(args, "config"):
        args = _apply_config(args, argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
