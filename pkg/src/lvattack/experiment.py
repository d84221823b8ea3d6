"""Experiment orchestration and reporting.

A JSON config (format version 1) names a dataset, a target, an attack, and
an evaluation protocol; ``run_experiment`` executes the pipeline and returns
an AttackReport whose JSON serialization is byte-identical across reruns
with the same config and seeds (wall time excluded). Per-example evaluation
uses rng streams derived from (seed, example id), so results do not depend
on evaluation order; aggregation is a deterministic fold in example-id
order.
"""

import json
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import baselines as B
from . import data as D
from . import generator as G
from . import layers as L
from . import targets as M
from .data import Dataset, GraphDataset
from .domains import build_adapter
from .generator import AttackGenerator, GaalvConfig
from .tensor import SeededRng, Tensor

CONFIG_VERSION = 1

DEFAULT_LAMBDA = {"image": 0.1, "text": 0.05, "graph": 0.01, "vector": 0.1}
DEFAULT_LATENT = {"image": 8, "text": 8, "graph": 32, "vector": 8}
ARCH_FOR_DOMAIN = {"vector": "mlp", "image": "conv", "text": "lstm", "graph": "gcn"}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class NumericError(RuntimeError):
    """A numeric failure (NaN) was detected in results."""


@dataclass
class AttackReport:
    config: dict
    config_text: str
    domain: str
    split: str
    seeds: list
    per_seed: list  # one dict per seed: seed, metrics, records
    aggregate: dict  # mean/std across seeds per metric
    extra: dict = field(default_factory=dict)
    wall_time_s: float = 0.0


def _py(obj):
    """Recursively convert numpy scalars/arrays so json can serialize them."""
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return [_py(v) for v in obj.tolist()]
    if isinstance(obj, dict):
        return {k: _py(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_py(v) for v in obj]
    return obj


def load_config(path: str) -> dict:
    with open(path) as fh:
        text = fh.read()
    try:
        config = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: not valid JSON ({err})") from None
    config["_config_text"] = text
    return config


def _validate_config(config: dict) -> dict:
    if config.get("v") != CONFIG_VERSION:
        raise ConfigError(f"config version {config.get('v')!r}, this build reads version {CONFIG_VERSION}")
    for key in ("domain", "data", "target", "attack", "evaluation"):
        if key not in config:
            raise ConfigError(f"config is missing the {key!r} section")
    if config["domain"] not in ("vector", "image", "text", "graph"):
        raise ConfigError(f"unknown domain {config['domain']!r}")
    seeds = config["evaluation"].get("seeds", [0])
    if not seeds:
        raise ConfigError("evaluation.seeds must be nonempty")
    return config


# ---------------------------------------------------------------------------
# resolution


def resolve_dataset(spec: dict, domain: str):
    if "path" in spec:
        if not os.path.exists(spec["path"] + ".json"):
            raise ConfigError(f"dataset bundle {spec['path']!r} does not exist")
        return D.load_dataset(spec["path"])
    if "content" in spec:
        graph = D.load_citation_graph(spec["content"], spec["cites"])
        scheme = spec.get("split_scheme", "tenth-of-all")
        rng = SeededRng(int(spec.get("split_seed", 0)))
        graph.train_mask, graph.val_mask, graph.test_mask = D.split_nodes(graph, rng, scheme=scheme)
        return graph
    if "kind" in spec:
        params = {k: v for k, v in spec.items() if k not in ("kind", "seed")}
        return D.gen_synthetic(spec["kind"], params, SeededRng(int(spec.get("seed", 0))))
    raise ConfigError("data spec needs one of: kind, path, content")


def _a_hat_for(dataset):
    return L.gcn_normalize(Tensor(dataset.adjacency)) if isinstance(dataset, GraphDataset) else None


def resolve_target(spec: dict, domain: str, dataset):
    expected_arch = ARCH_FOR_DOMAIN[domain]
    if "checkpoint" in spec:
        if not os.path.exists(spec["checkpoint"] + ".json"):
            raise ConfigError(f"target checkpoint {spec['checkpoint']!r} does not exist")
        model = M.load_target(spec["checkpoint"], a_hat=_a_hat_for(dataset))
        if model.arch != expected_arch:
            raise ConfigError(f"target arch {model.arch!r} does not serve domain {domain!r}")
        return model, {}
    arch = spec.get("arch", expected_arch)
    if arch != expected_arch:
        raise ConfigError(f"target arch {arch!r} does not serve domain {domain!r}")
    rng = SeededRng(int(spec.get("seed", 0)))
    if isinstance(dataset, GraphDataset):
        model = M.build_target("gcn", dataset.n_classes, rng, a_hat=_a_hat_for(dataset), in_dim=dataset.features.shape[1])
    elif domain == "vector":
        model = M.build_target("mlp", dataset.n_classes, rng, in_dim=dataset.inputs.shape[1], hidden=spec.get("hidden", 32))
    elif domain == "image":
        model = M.build_target("conv", dataset.n_classes, rng, channels=dataset.inputs.shape[1], size=dataset.inputs.shape[2])
    else:
        model = M.build_target(
            "lstm", dataset.n_classes, rng,
            vocab_size=dataset.meta["vocab_size"], emb_dim=spec.get("emb_dim", 16), hidden=spec.get("hidden", 32),
        )
    model, history = M.train_target(
        model, dataset,
        epochs=int(spec.get("epochs", 100)),
        lr=float(spec.get("lr", 1e-2)),
        batch_size=int(spec.get("batch_size", 32)),
        seed=int(spec.get("seed", 0)),
    )
    return model, {"target_history": {k: v for k, v in history.items()}}


def gaalv_config_from(spec: dict, domain: str, seed_override=None) -> GaalvConfig:
    method = spec.get("method", "latent")
    return GaalvConfig(
        lambda_=float(spec.get("lambda", DEFAULT_LAMBDA[domain])),
        latent_dim=int(spec.get("latent_dim", DEFAULT_LATENT[domain])),
        tau=float(spec.get("tau", 1.0)),
        lr=float(spec.get("lr", 1e-3)),
        epochs=int(spec.get("epochs", 100)),
        batch_size=int(spec.get("batch_size", 32)),
        resample_budget=int(spec.get("resample", 0)),
        seed=int(seed_override if seed_override is not None else spec.get("seed", 0)),
        variational=(method != "latent-ae"),
        hidden=int(spec.get("hidden", 64)),
        graph_attack=spec.get("graph_attack", "direct"),
        influencer_k=int(spec.get("influencer_k", 5)),
        cap_fraction=float(spec.get("cap_fraction", 0.15)),
    )


def _train_attacker_for(config: dict, domain: str, target, dataset, seed_override=None):
    spec = config["attack"]
    if "checkpoint" in spec:
        if not os.path.exists(spec["checkpoint"] + ".json"):
            raise ConfigError(f"attacker checkpoint {spec['checkpoint']!r} does not exist")
        return G.load_generator(spec["checkpoint"], target, dataset), None
    gconfig = gaalv_config_from(spec, domain, seed_override)
    generator = G.build_generator(domain, target, dataset, gconfig, SeededRng(gconfig.seed))
    generator, metrics = G.train_attacker(generator, target, dataset, gconfig)
    return generator, metrics


# ---------------------------------------------------------------------------
# evaluation


def _eval_items(dataset, split: str):
    if isinstance(dataset, GraphDataset):
        return [(int(n), int(n), int(dataset.labels[n])) for n in dataset.node_indices(split)]
    return [(int(i), dataset.inputs[i], int(dataset.labels[i])) for i in dataset.indices(split)]


def _latent_records(generator: AttackGenerator, target, dataset, split, budget, seed):
    root = SeededRng(seed)
    records = []
    for example_id, x, y in _eval_items(dataset, split):
        adapter = generator.adapter
        if isinstance(dataset, GraphDataset):
            adapter = adapter.with_mask(generator.graph_ctx.masks[example_id])
        rng = root.derive(example_id)
        records.append(G.resample_attack(generator, target, adapter, x, y, budget, rng, example_id=example_id))
    return records


def _baseline_records(spec, domain, target, dataset, split, seed):
    method = spec["method"]
    adapter = build_adapter(domain) if domain in ("vector", "image") else None
    if adapter is None:
        raise ConfigError(f"baseline {method!r} supports vector and image domains only")
    clamp = adapter.clamp
    records = []
    root = SeededRng(seed)
    for example_id, x, y in _eval_items(dataset, split):
        if method == "fgsm":
            x_prime = B.fgsm(target, x, y, float(spec.get("eps", 0.1)), clamp=clamp)
        elif method == "pgd":
            config = B.PgdConfig(
                epsilon=float(spec.get("eps", 2.0)),
                step_size=float(spec.get("step_size", spec.get("eps", 2.0) / 8.0)),
                iterations=int(spec.get("steps", 40)),
                random_start=bool(spec.get("random_start", False)),
            )
            x_prime = B.pgd_l2(target, x, y, config, clamp=clamp, rng=root.derive(example_id))
        else:
            raise ConfigError(f"unknown baseline method {method!r}")
        predicted = M.predict(target, Tensor(x_prime))
        records.append(
            G.AdversarialRecord(
                example_id=example_id,
                original=x.copy(),
                perturbed=x_prime,
                label=y,
                predicted=predicted,
                success=predicted != y,
                delta=float(np.linalg.norm(x_prime - x)),
                samples_consumed=1,
            )
        )
    return records


def _record_dict(rec: G.AdversarialRecord, include_arrays: bool, domain: str) -> dict:
    out = {
        "example_id": rec.example_id,
        "label": rec.label,
        "predicted": rec.predicted,
        "success": bool(rec.success),
        "delta": float(rec.delta),
        "samples_consumed": int(rec.samples_consumed),
    }
    for key, value in rec.extras.items():
        out[key] = _py(value)
    if include_arrays:
        out["original"] = _py(rec.original)
        if domain == "graph":
            out["perturbed"] = _py(rec.perturbed)
        else:
            out["perturbed"] = _py(rec.perturbed)
    elif domain == "graph" and isinstance(rec.perturbed, dict):
        out["attacker_set"] = _py(rec.perturbed["attacker_set"])
    return out


def _seed_metrics(record_dicts, domain: str) -> dict:
    deltas = np.array([r["delta"] for r in record_dicts], dtype=np.float64)
    if np.any(~np.isfinite(deltas)):
        raise NumericError("NaN or Inf detected in perturbation magnitudes")
    metrics = {
        "success_rate": float(np.mean([r["success"] for r in record_dicts])),
        "mean_delta": float(np.mean(deltas)),
        "median_delta": float(np.median(deltas)),
        "mean_samples_consumed": float(np.mean([r["samples_consumed"] for r in record_dicts])),
    }
    if domain == "text":
        metrics["token_change_rate"] = float(np.mean([r.get("token_change_rate", 0.0) for r in record_dicts]))
    return metrics


def _aggregate(per_seed: list) -> dict:
    keys = per_seed[0]["metrics"].keys()
    out = {}
    for key in keys:
        values = [s["metrics"][key] for s in per_seed]
        out[key] = {
            "mean": float(np.mean(values)),
            "std": float(np.std(values)),
            "per_seed": [float(v) for v in values],
        }
    return out


def run_experiment(config: dict) -> AttackReport:
    """Execute the configured pipeline and aggregate across evaluation seeds."""
    started = time.perf_counter()
    config = _validate_config(config)
    config_text = config.pop("_config_text", None)
    domain = config["domain"]
    dataset = resolve_dataset(config["data"], domain)
    target, extra = resolve_target(config["target"], domain, dataset)

    evaluation = config["evaluation"]
    split = evaluation.get("split", "test")
    budget = int(evaluation.get("resample", 0))
    seeds = [int(s) for s in evaluation.get("seeds", [0])]
    retrain = bool(evaluation.get("retrain_per_seed", False))
    include_arrays = bool(evaluation.get("include_arrays", False))
    method = config["attack"].get("method", "latent")

    per_seed = []
    trained = None
    for seed in seeds:
        if method in ("latent", "latent-ae"):
            if trained is None or retrain:
                generator, attack_metrics = _train_attacker_for(
                    config, domain, target, dataset, seed_override=seed if retrain else None
                )
                trained = (generator, attack_metrics)
            generator, attack_metrics = trained
            records = _latent_records(generator, target, dataset, split, budget, seed)
        else:
            attack_metrics = None
            records = _baseline_records(config["attack"], domain, target, dataset, split, seed)
        record_dicts = [_record_dict(r, include_arrays, domain) for r in records]
        entry = {"seed": seed, "metrics": _seed_metrics(record_dicts, domain), "records": record_dicts}
        if attack_metrics is not None and retrain:
            entry["attacker_final_train_success"] = attack_metrics["success_rate"][-1]
        per_seed.append(entry)

    if trained is not None and trained[1] is not None:
        extra["attacker_metrics"] = trained[1]

    if config_text is None:
        config_text = json.dumps(config, indent=2, sort_keys=True)
    return AttackReport(
        config=config,
        config_text=config_text,
        domain=domain,
        split=split,
        seeds=seeds,
        per_seed=per_seed,
        aggregate=_aggregate(per_seed),
        extra=_py(extra),
        wall_time_s=time.perf_counter() - started,
    )


# ---------------------------------------------------------------------------
# sweeps


def resample_sweep(config: dict, budgets: list) -> dict:
    """Success rate per resample budget, computed from one evaluation at the
    largest budget so the series is non-decreasing by construction."""
    started = time.perf_counter()
    if list(budgets) != sorted(budgets):
        raise ConfigError("budgets must be sorted ascending")
    config = _validate_config(config)
    config_text = config.pop("_config_text", None)
    domain = config["domain"]
    dataset = resolve_dataset(config["data"], domain)
    target, _ = resolve_target(config["target"], domain, dataset)
    evaluation = config["evaluation"]
    split = evaluation.get("split", "test")
    seeds = [int(s) for s in evaluation.get("seeds", [0])]
    retrain = bool(evaluation.get("retrain_per_seed", False))
    max_budget = int(budgets[-1])

    per_seed_attempts = []
    trained = None
    for seed in seeds:
        if trained is None or retrain:
            generator, _metrics = _train_attacker_for(config, domain, target, dataset, seed_override=seed if retrain else None)
            trained = (generator, _metrics)
        generator, _metrics = trained
        records = _latent_records(generator, target, dataset, split, max_budget, seed)
        per_seed_attempts.append([(r.success, r.samples_consumed) for r in records])

    series = []
    for budget in budgets:
        rates = []
        for attempts in per_seed_attempts:
            hits = [success and used <= budget + 1 for success, used in attempts]
            rates.append(float(np.mean(hits)))
        series.append({
            "budget": int(budget),
            "success_rate": {"mean": float(np.mean(rates)), "std": float(np.std(rates)), "per_seed": rates},
        })
    return {
        "kind": "resample-sweep",
        "config": config,
        "config_text": config_text or json.dumps(config, indent=2, sort_keys=True),
        "split": split,
        "seeds": seeds,
        "series": series,
        "wall_time_s": time.perf_counter() - started,
    }


def lambda_sweep(config: dict, lambdas: list) -> dict:
    """Train one attacker per lambda (shared seed) and report the tradeoff
    between success rate, perturbation size, and token change rate."""
    started = time.perf_counter()
    for lam in lambdas:
        if lam < 0:
            raise ConfigError(f"lambda must be nonnegative, got {lam}")
    config = _validate_config(config)
    config_text = config.pop("_config_text", None)
    series = []
    for lam in lambdas:
        sub = json.loads(json.dumps({k: v for k, v in config.items()}))
        sub["attack"] = dict(sub["attack"])
        sub["attack"]["lambda"] = float(lam)
        report = run_experiment(sub)
        entry = {
            "lambda": float(lam),
            "success_rate": report.aggregate["success_rate"],
            "mean_delta": report.aggregate["mean_delta"],
        }
        if "token_change_rate" in report.aggregate:
            entry["token_change_rate"] = report.aggregate["token_change_rate"]
        series.append(entry)
    return {
        "kind": "lambda-sweep",
        "config": config,
        "config_text": config_text or json.dumps(config, indent=2, sort_keys=True),
        "series": series,
        "wall_time_s": time.perf_counter() - started,
    }


# ---------------------------------------------------------------------------
# emission


def report_to_dict(report: AttackReport) -> dict:
    return {
        "config": report.config,
        "config_text": report.config_text,
        "domain": report.domain,
        "split": report.split,
        "seeds": report.seeds,
        "per_seed": report.per_seed,
        "aggregate": report.aggregate,
        "extra": report.extra,
        "wall_time_s": report.wall_time_s,
    }


def report_json_bytes(report, drop_wall_time: bool = False) -> bytes:
    obj = report_to_dict(report) if isinstance(report, AttackReport) else dict(report)
    if drop_wall_time:
        obj = {k: v for k, v in obj.items() if k != "wall_time_s"}
    return (json.dumps(_py(obj), indent=2, sort_keys=True) + "\n").encode()


def _check_aggregates(report: AttackReport) -> None:
    # aggregates must be recomputable from the per-example records
    for entry in report.per_seed:
        recomputed = float(np.mean([r["success"] for r in entry["records"]]))
        if abs(recomputed - entry["metrics"]["success_rate"]) > 1e-12:
            raise RuntimeError("aggregate success rate does not match its records")
    for key, agg in report.aggregate.items():
        values = [s["metrics"][key] for s in report.per_seed]
        if abs(float(np.mean(values)) - agg["mean"]) > 1e-12:
            raise RuntimeError(f"aggregate {key} does not match per-seed metrics")


def emit_report(report, fmt: str, path: str) -> str:
    """Write a report as json (full records), csv (one row per record), or a
    markdown aggregate table. Returns the written path."""
    if isinstance(report, AttackReport):
        _check_aggregates(report)
    if fmt == "json":
        with open(path, "wb") as fh:
            fh.write(report_json_bytes(report))
        return path
    if isinstance(report, dict):
        raise ConfigError(f"sweep results only emit json, not {fmt!r}")
    if fmt == "csv":
        lines = ["example_id,split,success,delta,samples_consumed"]
        for entry in report.per_seed:
            for rec in entry["records"]:
                lines.append(
                    f"{rec['example_id']},{report.split},{int(rec['success'])},"
                    f"{rec['delta']!r},{rec['samples_consumed']}"
                )
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return path
    if fmt == "markdown":
        lines = [
            f"# Attack report: {report.domain} / {report.split} split",
            "",
            f"Seeds: {report.seeds}",
            "",
            "| metric | mean | std |",
            "|---|---|---|",
        ]
        for key, agg in report.aggregate.items():
            lines.append(f"| {key} | {agg['mean']:.6f} | {agg['std']:.6f} |")
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")
        return path
    raise ConfigError(f"unknown report format {fmt!r}")
