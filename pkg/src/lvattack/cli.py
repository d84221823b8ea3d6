"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric
failure (NaN detected in results).
"""

import argparse
import json
import sys

from . import data as D
from . import generator as G
from . import targets as M
from .experiment import (
    ConfigError,
    NumericError,
    emit_report,
    gaalv_config_from,
    lambda_sweep,
    load_config,
    resample_sweep,
    resolve_dataset,
    run_experiment,
)
from .layers import gcn_normalize
from .tensor import SeededRng, Tensor


def _parse_floats(text):
    return [float(v) for v in text.split(",") if v != ""]


def _parse_ints(text):
    return [int(v) for v in text.split(",") if v != ""]


def cmd_gen_data(args):
    params = json.loads(args.params) if args.params else {}
    ds = D.gen_synthetic(args.kind, params, SeededRng(args.seed))
    D.save_dataset(args.out, ds)
    n = ds.n_nodes if isinstance(ds, D.GraphDataset) else len(ds)
    print(f"wrote {args.kind} dataset ({n} examples) to {args.out}.json/.bin")
    return 0


def _load_data(path: str):
    return resolve_dataset({"path": path}, domain=None)


def _load_target_for(data_path: str, ckpt: str):
    dataset = _load_data(data_path)
    a_hat = gcn_normalize(Tensor(dataset.adjacency)) if isinstance(dataset, D.GraphDataset) else None
    return dataset, M.load_target(ckpt, a_hat=a_hat)


def cmd_train_target(args):
    dataset = _load_data(args.data)
    spec = {"arch": args.arch, "epochs": args.epochs, "lr": args.lr, "seed": args.seed}
    if args.hidden:
        spec["hidden"] = args.hidden
    from .experiment import ARCH_FOR_DOMAIN, resolve_target

    domain = "graph" if isinstance(dataset, D.GraphDataset) else dataset.domain
    if ARCH_FOR_DOMAIN[domain] != args.arch:
        raise ConfigError(f"arch {args.arch!r} does not serve {domain!r} data")
    model, extra = resolve_target(spec, domain, dataset)
    M.save_target(args.out, model)
    history = extra.get("target_history", {})
    val = history.get("validation", [None])[-1]
    print(f"trained {args.arch} target (validation accuracy {val}), saved to {args.out}.json/.bin")
    return 0


def cmd_attack_train(args):
    dataset, target = _load_target_for(args.data, args.target)
    spec = {
        "method": "latent-ae" if args.ae else "latent",
        "lambda": args.lam,
        "latent_dim": args.latent_d,
        "tau": args.tau,
        "epochs": args.epochs,
        "lr": args.lr,
        "batch_size": args.batch_size,
        "seed": args.seed,
        "hidden": args.hidden,
        "graph_attack": args.graph_attack,
    }
    config = gaalv_config_from(spec, args.domain)
    generator = G.build_generator(args.domain, target, dataset, config, SeededRng(config.seed))
    generator, metrics = G.train_attacker(generator, target, dataset, config)
    G.save_generator(args.out, generator, config)
    print(
        f"trained {args.domain} attacker: final train success "
        f"{metrics['success_rate'][-1]:.3f}, mean delta {metrics['mean_delta'][-1]:.4f}; "
        f"saved to {args.out}.json/.bin"
    )
    return 0


def _eval_config(args, method_spec):
    return {
        "v": 1,
        "domain": args.domain,
        "data": {"path": args.data},
        "target": {"checkpoint": args.target},
        "attack": method_spec,
        "evaluation": {
            "split": args.split,
            "resample": getattr(args, "resample", 0),
            "seeds": _parse_ints(args.seeds),
        },
    }


def cmd_attack_eval(args):
    config = _eval_config(args, {"method": "latent", "checkpoint": args.attacker})
    report = run_experiment(config)
    emit_report(report, "json", args.report)
    agg = report.aggregate["success_rate"]
    print(f"{args.split} success rate {agg['mean']:.3f} +/- {agg['std']:.3f}; report at {args.report}")
    return 0


def cmd_baseline_attack(args):
    spec = {"method": args.method, "eps": args.eps, "steps": args.steps}
    config = _eval_config(args, spec)
    report = run_experiment(config)
    emit_report(report, "json", args.report)
    agg = report.aggregate["success_rate"]
    print(f"{args.method} {args.split} success rate {agg['mean']:.3f}; report at {args.report}")
    return 0


def cmd_resample_sweep(args):
    config = load_config(args.config)
    result = resample_sweep(config, _parse_ints(args.budgets))
    emit_report(result, "json", args.report)
    for entry in result["series"]:
        print(f"budget {entry['budget']:>4}: success {entry['success_rate']['mean']:.3f}")
    return 0


def cmd_lambda_sweep(args):
    config = load_config(args.config)
    result = lambda_sweep(config, _parse_floats(args.lambdas))
    emit_report(result, "json", args.report)
    for entry in result["series"]:
        line = f"lambda {entry['lambda']:>6}: success {entry['success_rate']['mean']:.3f}, delta {entry['mean_delta']['mean']:.4f}"
        if "token_change_rate" in entry:
            line += f", token change {entry['token_change_rate']['mean']:.3f}"
        print(line)
    return 0


def cmd_run(args):
    config = load_config(args.config)
    report = run_experiment(config)
    emit_report(report, "json", args.report)
    agg = report.aggregate["success_rate"]
    print(f"success rate {agg['mean']:.3f} +/- {agg['std']:.3f}; report at {args.report}")
    return 0


def cmd_report(args):
    with open(args.infile) as fh:
        payload = json.load(fh)
    if "per_seed" not in payload:
        raise ConfigError(f"{args.infile} is not an attack report")
    from .experiment import AttackReport

    report = AttackReport(
        config=payload["config"],
        config_text=payload["config_text"],
        domain=payload["domain"],
        split=payload["split"],
        seeds=payload["seeds"],
        per_seed=payload["per_seed"],
        aggregate=payload["aggregate"],
        extra=payload.get("extra", {}),
        wall_time_s=payload.get("wall_time_s", 0.0),
    )
    emit_report(report, args.format, args.out)
    print(f"wrote {args.format} report to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lvattack", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset bundle")
    p.add_argument("--kind", required=True, choices=["blobs", "rings", "tokens", "images", "sbm-graph"])
    p.add_argument("--params", help="JSON dict of generator parameters")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train-target", help="train a whitebox target classifier")
    p.add_argument("--arch", required=True, choices=["mlp", "lstm", "gcn", "conv"])
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train_target)

    p = sub.add_parser("attack-train", help="train a latent-variable attacker")
    p.add_argument("--target", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True, choices=["image", "text", "graph", "vector"])
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--latent-d", type=int, default=None)
    p.add_argument("--tau", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ae", action="store_true", help="deterministic ablation: no sampling, no KL")
    p.add_argument("--graph-attack", choices=["direct", "influencer"], default="direct")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_attack_train)

    p = sub.add_parser("attack-eval", help="evaluate a trained attacker on a split")
    p.add_argument("--target", required=True)
    p.add_argument("--attacker", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True, choices=["image", "text", "graph", "vector"])
    p.add_argument("--split", choices=["train", "validation", "test"], default="test")
    p.add_argument("--resample", type=int, default=0)
    p.add_argument("--seeds", default="0")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_attack_eval)

    p = sub.add_parser("baseline-attack", help="run a constrained-optimization baseline")
    p.add_argument("--method", required=True, choices=["fgsm", "pgd"])
    p.add_argument("--eps", type=float, required=True)
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--target", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--domain", required=True, choices=["image", "vector"])
    p.add_argument("--split", choices=["train", "validation", "test"], default="train")
    p.add_argument("--seeds", default="0")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_baseline_attack)

    p = sub.add_parser("resample-sweep", help="success rate vs resampling budget")
    p.add_argument("--config", required=True)
    p.add_argument("--budgets", default="0,1,2,5,10,20,50,100")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_resample_sweep)

    p = sub.add_parser("lambda-sweep", help="success/perturbation tradeoff across lambda")
    p.add_argument("--config", required=True)
    p.add_argument("--lambdas", default="0.01,0.1,1.0")
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_lambda_sweep)

    p = sub.add_parser("run", help="run a full experiment from a JSON config")
    p.add_argument("--config", required=True)
    p.add_argument("--report", required=True)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("report", help="convert a JSON report to csv or markdown")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", choices=["json", "csv", "markdown"], default="csv")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    # attack-train fills domain-dependent defaults lazily
    if getattr(args, "lam", "absent") is None:
        from .experiment import DEFAULT_LAMBDA

        args.lam = DEFAULT_LAMBDA[args.domain]
    if getattr(args, "latent_d", "absent") is None:
        from .experiment import DEFAULT_LATENT

        args.latent_d = DEFAULT_LATENT[args.domain]
    try:
        return args.fn(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericError as err:
        print(f"numeric failure: {err}", file=sys.stderr)
        return 4
    except (OSError, json.JSONDecodeError) as err:
        print(f"i/o error: {err}", file=sys.stderr)
        return 3
    except ValueError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
